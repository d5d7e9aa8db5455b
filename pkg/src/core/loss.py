# loss.py
"""
Training objective.

    l2          = mean((F(I) − αT)²)                       over every element
    perceptual  = mean_n Σ_i ‖φ_i(F(I_n)) − φ_i(αT_n)‖² / (W_i · H_i)
    combined    = l2 + λ · perceptual,  λ = 0.001 by default

φ_i is the output of the i-th conv+ReLU stage of a frozen feature extractor.
The target branch never carries gradient and extractor weights are never
trainable.

Extractor weight file (little endian)
    4 bytes   magic b"RRFX"
    uint32    format version (1)
    uint32    stage count M
    M × 3     uint32 (in_channels, out_channels, kernel) per stage
    then      float64 parameters, per stage weight (out, in, k, k) then bias
"""
from __future__ import annotations

import hashlib
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from src.core.autodiff import (
    ConvLayerSpec,
    Tensor,
    add_scalars,
    reduce_mean,
    reduce_sum,
    relu,
    scale,
    square,
    subtract,
)
from src.core.errors import ConfigError, ExtractorLoadError, InvalidArgumentError
from src.core.fileio import atomic_write_bytes

logger = logging.getLogger(__name__)

EXTRACTOR_MAGIC = b"RRFX"
EXTRACTOR_VERSION = 1
_PREAMBLE = struct.Struct("<4sII")
_STAGE = struct.Struct("<III")

StageShape = Tuple[int, int, int]


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.001

    def __post_init__(self):
        if not math.isfinite(self.lam) or self.lam < 0:
            raise InvalidArgumentError(f"lambda must be finite and >= 0, got {self.lam}")


@dataclass(frozen=True)
class ExtractorConfig:
    channels: Tuple[int, ...] = (8, 8, 16, 16, 32)
    kernel: int = 3
    in_channels: int = 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not self.channels or min(self.channels) < 1:
            raise ConfigError(f"extractor channels must be a non-empty list of positive counts, got {self.channels}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"extractor kernel must be a positive odd number, got {self.kernel}")

    @property
    def stage_shapes(self) -> List[StageShape]:
        ins = (self.in_channels,) + self.channels[:-1]
        return [(i, o, self.kernel) for i, o in zip(ins, self.channels)]


@dataclass
class FeatureExtractor:
    stages: List[ConvLayerSpec]
    metadata: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.stages:
            raise InvalidArgumentError("feature extractor needs at least one stage")
        for layer in self.stages:
            layer.weight.requires_grad = False
            layer.bias.requires_grad = False

    @property
    def stage_shapes(self) -> List[StageShape]:
        return [(s.in_channels, s.out_channels, s.kernel) for s in self.stages]

    @property
    def min_input_size(self) -> int:
        return max(s.kernel for s in self.stages)

    def features(self, x: Tensor) -> List[Tensor]:
        h, w = x.shape[2], x.shape[3]
        m = self.min_input_size
        if h < m or w < m:
            raise InvalidArgumentError(f"input {h}x{w} is smaller than the extractor minimum {m}x{m}")
        maps = []
        for layer in self.stages:
            x = relu(layer(x))
            maps.append(x)
        return maps


def build_extractor(cfg: ExtractorConfig = ExtractorConfig()) -> FeatureExtractor:
    """Seeded He-uniform extractor (same init rule as the network)."""
    rng = np.random.default_rng(cfg.seed)
    stages = [
        ConvLayerSpec.create(i, o, k, rng, name=f"phi{n}")
        for n, (i, o, k) in enumerate(cfg.stage_shapes, start=1)
    ]
    fx = FeatureExtractor(stages, {"source": "seeded", "seed": str(cfg.seed)})
    fx.metadata["sha256"] = hashlib.sha256(extractor_bytes(fx)).hexdigest()
    return fx


# ---------------- LOSSES ----------------
def _target(output: Tensor, target: Union[Tensor, np.ndarray]) -> Tensor:
    data = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if data.shape != output.shape:
        raise InvalidArgumentError(f"shape mismatch: output {output.shape} vs target {data.shape}")
    return Tensor(data)


def l2_loss(output: Tensor, target: Union[Tensor, np.ndarray]) -> Tensor:
    return reduce_mean(square(subtract(output, _target(output, target))))


def perceptual_loss(fx: FeatureExtractor, output: Tensor, target: Union[Tensor, np.ndarray]) -> Tensor:
    tgt = _target(output, target)
    batch = output.shape[0]
    terms = []
    for phi_out, phi_tgt in zip(fx.features(output), fx.features(tgt)):
        h, w = phi_out.shape[2], phi_out.shape[3]
        diff = subtract(phi_out, Tensor(phi_tgt.data))
        terms.append(scale(reduce_sum(square(diff)), 1.0 / (w * h * batch)))
    return add_scalars(*terms)


@dataclass
class LossTerms:
    total: Tensor
    l2: Tensor
    perceptual: Tensor

    def values(self) -> Dict[str, float]:
        return {"loss": self.total.item(), "l2": self.l2.item(), "perceptual": self.perceptual.item()}


def loss_terms(output: Tensor, target: Union[Tensor, np.ndarray], fx: FeatureExtractor,
               w: LossWeights = LossWeights()) -> LossTerms:
    l2 = l2_loss(output, target)
    perc = perceptual_loss(fx, output, target)
    return LossTerms(total=add_scalars(l2, scale(perc, w.lam)), l2=l2, perceptual=perc)


def combined_loss(output: Tensor, target: Union[Tensor, np.ndarray], fx: FeatureExtractor,
                  w: LossWeights = LossWeights()) -> Tensor:
    return loss_terms(output, target, fx, w).total


# ---------------- WEIGHT FILE ----------------
def extractor_bytes(fx: FeatureExtractor) -> bytes:
    parts = [_PREAMBLE.pack(EXTRACTOR_MAGIC, EXTRACTOR_VERSION, len(fx.stages))]
    parts += [_STAGE.pack(*shape) for shape in fx.stage_shapes]
    for layer in fx.stages:
        parts.append(np.ascontiguousarray(layer.weight.data, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(layer.bias.data, dtype="<f8").tobytes())
    return b"".join(parts)


def save_extractor_weights(fx: FeatureExtractor, path: Path) -> Path:
    path = atomic_write_bytes(Path(path), extractor_bytes(fx))
    logger.info(f"Extractor weights saved to {path}")
    return path


def _parse_extractor(blob: bytes, source: str) -> FeatureExtractor:
    if len(blob) < _PREAMBLE.size:
        raise ExtractorLoadError(f"{source}: file is too short for an extractor header")
    magic, version, count = _PREAMBLE.unpack_from(blob)
    if magic != EXTRACTOR_MAGIC:
        raise ExtractorLoadError(f"{source}: bad magic bytes")
    if version != EXTRACTOR_VERSION:
        raise ExtractorLoadError(f"{source}: unsupported extractor format version {version}")
    if count < 1:
        raise ExtractorLoadError(f"{source}: extractor declares no stages")
    offset = _PREAMBLE.size
    if len(blob) < offset + count * _STAGE.size:
        raise ExtractorLoadError(f"{source}: stage table is truncated")
    shapes = [_STAGE.unpack_from(blob, offset + n * _STAGE.size) for n in range(count)]
    offset += count * _STAGE.size

    expected = sum(o * i * k * k + o for i, o, k in shapes)
    if (len(blob) - offset) != 8 * expected:
        raise ExtractorLoadError(
            f"{source}: parameter block has {len(blob) - offset} bytes, stage table needs {8 * expected}"
        )
    values = np.frombuffer(blob, dtype="<f8", offset=offset)

    stages, pos = [], 0
    for n, (i, o, k) in enumerate(shapes, start=1):
        if n > 1 and i != shapes[n - 2][1]:
            raise ExtractorLoadError(f"{source}: stage {n} expects {i} channels, previous stage gives {shapes[n - 2][1]}")
        wsize = o * i * k * k
        weight = values[pos:pos + wsize].reshape(o, i, k, k).copy()
        bias = values[pos + wsize:pos + wsize + o].copy()
        pos += wsize + o
        try:
            stages.append(ConvLayerSpec(i, o, k, Tensor(weight, name=f"phi{n}.weight"),
                                        Tensor(bias, name=f"phi{n}.bias"), name=f"phi{n}"))
        except InvalidArgumentError as e:
            raise ExtractorLoadError(f"{source}: {e}") from e
    return FeatureExtractor(stages, {"source": source, "sha256": hashlib.sha256(blob).hexdigest()})


def load_extractor_weights(
    path: Optional[Union[str, Path]],
    expected: Optional[ExtractorConfig] = None,
    fallback: bool = True,
    fallback_cfg: Optional[ExtractorConfig] = None,
) -> FeatureExtractor:
    """
    Load extractor weights from `path`.

    A missing path (or an empty one) yields the seeded extractor described by
    `fallback_cfg` (else `expected`) when `fallback` is on. With `expected`
    given, the stage table of the file must match it exactly.
    """
    if not path or not Path(path).is_file():
        if not fallback:
            raise ExtractorLoadError(f"extractor weights not found: {path}")
        cfg = fallback_cfg or expected or ExtractorConfig()
        logger.info(f"No extractor weights at {path!r}, using seeded extractor (seed={cfg.seed})")
        return build_extractor(cfg)

    fx = _parse_extractor(Path(path).read_bytes(), str(path))
    if expected is not None:
        declared = expected.stage_shapes
        if [tuple(s) for s in fx.stage_shapes] != declared:
            raise ExtractorLoadError(f"{path}: stages {fx.stage_shapes} do not match declared {declared}")
    if fx.stage_shapes[0][0] != 3:
        raise ExtractorLoadError(f"{path}: first stage must take 3 channels, got {fx.stage_shapes[0][0]}")
    logger.info(f"Extractor loaded from {path} ({len(fx.stages)} stages, sha256 {fx.metadata['sha256'][:12]})")
    return fx


def stage_dims(fx: FeatureExtractor, height: int, width: int) -> List[Tuple[int, int, int]]:
    """(C_i, H_i, W_i) for every stage; stride-1 same-padding keeps H, W."""
    return [(s.out_channels, height, width) for s in fx.stages]
