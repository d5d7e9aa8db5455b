# model.py
"""
Three-stage encoder-decoder that maps a mixture image I to T' = αT.

Layer list (conv = regular, deconv = transposed, all stride 1 / same padding):

    stage 1   conv1 .. conv{s1}                                   ReLU each
    stage 2   conv{s1+1} .. conv{s1+s2}                           ReLU each
              deconv1 .. deconv{d2}                               ReLU each
              skip (c, d): post-ReLU output of conv c is added to the
              pre-activation of deconv d
    junction  relu(conv{s1}_out − deconv{d2}_out)
    stage 3   deconv{d2+1} .. deconv{d2+d3}                       ReLU except last

The first conv maps 3 → F channels, the last deconv maps F → 3, everything
else is F → F. conv1, conv2 and the last two deconvs use `outer_kernel`, the
rest `inner_kernel`.

Checkpoint format (little endian)
    offset 0   8 bytes   magic b"RRNETCKP"
    offset 8   uint32    format version (1)
    offset 12  uint32    length L of the JSON header
    offset 16  L bytes   ModelConfig as UTF-8 JSON (sorted keys)
    then       8·P bytes float64 parameters, layers in the order
                         conv1..conv{s1+s2}, deconv1..deconv{d2+d3},
                         weight then bias per layer, C order
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.core.autodiff import ConvLayerSpec, Tensor, add, parameter, relu, subtract
from src.core.errors import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    InvalidArgumentError,
)
from src.core.fileio import atomic_write_bytes
from src.core.imgcore import EncodedImage, image_to_tensor, tensor_to_image

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"RRNETCKP"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sII")

SkipPairs = Tuple[Tuple[int, int], ...]


def default_skip_pairs(stage2_convs: int, stage2_deconvs: int, stage1_convs: int = 6) -> SkipPairs:
    """Mirror pairing inside stage 2: conv at position p (2, 4, ...) feeds deconv d2 + 1 − p."""
    pairs = []
    for position in range(2, stage2_convs, 2):
        receiver = stage2_deconvs + 1 - position
        if receiver >= 1:
            pairs.append((stage1_convs + position, receiver))
    return tuple(pairs)


@dataclass(frozen=True)
class ModelConfig:
    filters: int = 64
    inner_kernel: int = 5
    outer_kernel: int = 5
    stage1_convs: int = 6
    stage2_convs: int = 6
    stage2_deconvs: int = 6
    stage3_deconvs: int = 6
    skip_pairs: Optional[SkipPairs] = None
    in_channels: int = 3
    out_channels: int = 3
    seed: int = 0

    def __post_init__(self):
        for name in ("filters", "stage1_convs", "stage2_convs", "stage2_deconvs", "stage3_deconvs",
                     "in_channels", "out_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("inner_kernel", "outer_kernel"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"{name} must be a positive odd number, got {k}")

        if self.skip_pairs is None:
            pairs = default_skip_pairs(self.stage2_convs, self.stage2_deconvs, self.stage1_convs)
        else:
            pairs = tuple((int(c), int(d)) for c, d in self.skip_pairs)
        first, last = self.stage1_convs + 1, self.stage1_convs + self.stage2_convs
        for c, d in pairs:
            if not first <= c <= last:
                raise ConfigError(f"skip source conv{c} is not a stage-2 conv ({first}..{last})")
            if not 1 <= d <= self.stage2_deconvs:
                raise ConfigError(f"skip receiver deconv{d} is not a stage-2 deconv (1..{self.stage2_deconvs})")
        if len(set(pairs)) != len(pairs):
            raise ConfigError(f"duplicate skip pairs: {pairs}")
        object.__setattr__(self, "skip_pairs", pairs)

    @property
    def total_convs(self) -> int:
        return self.stage1_convs + self.stage2_convs

    @property
    def total_deconvs(self) -> int:
        return self.stage2_deconvs + self.stage3_deconvs

    @property
    def min_input_size(self) -> int:
        return max(self.inner_kernel, self.outer_kernel)

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["skip_pairs"] = [list(p) for p in self.skip_pairs]
        return d

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown model parameter: {', '.join(sorted(unknown))}")
        kwargs = dict(data)
        if kwargs.get("skip_pairs") is not None:
            kwargs["skip_pairs"] = tuple(tuple(p) for p in kwargs["skip_pairs"])
        try:
            return cls(**kwargs)
        except TypeError as e:
            raise ConfigError(str(e)) from e


@dataclass(frozen=True)
class LayerPlan:
    name: str
    in_channels: int
    out_channels: int
    kernel: int
    transposed: bool

    @property
    def parameter_count(self) -> int:
        return self.in_channels * self.out_channels * self.kernel * self.kernel + self.out_channels


def layer_plan(cfg: ModelConfig) -> List[LayerPlan]:
    f = cfg.filters
    plan = []
    for i in range(1, cfg.total_convs + 1):
        k = cfg.outer_kernel if i <= 2 else cfg.inner_kernel
        plan.append(LayerPlan(f"conv{i}", cfg.in_channels if i == 1 else f, f, k, False))
    n = cfg.total_deconvs
    for j in range(1, n + 1):
        k = cfg.outer_kernel if j > n - 2 else cfg.inner_kernel
        plan.append(LayerPlan(f"deconv{j}", f, cfg.out_channels if j == n else f, k, True))
    return plan


def parameter_count(cfg: ModelConfig) -> int:
    return sum(p.parameter_count for p in layer_plan(cfg))


def checkpoint_size(cfg: ModelConfig) -> int:
    return _HEADER.size + len(_config_json(cfg)) + 8 * parameter_count(cfg)


@dataclass
class NetworkTaps:
    conv6_out: Tensor
    deconv6_out: Tensor
    junction_out: Tensor
    layers: Dict[str, Tensor] = field(default_factory=dict)


class Network:
    def __init__(self, cfg: ModelConfig, layers: Sequence[ConvLayerSpec]):
        self.cfg = cfg
        self.convs = [l for l in layers if not l.transposed]
        self.deconvs = [l for l in layers if l.transposed]
        if len(self.convs) != cfg.total_convs or len(self.deconvs) != cfg.total_deconvs:
            raise InvalidArgumentError("layer list does not match the model configuration")
        self._receivers: Dict[int, List[int]] = {}
        for c, d in cfg.skip_pairs:
            self._receivers.setdefault(d, []).append(c)

    @property
    def layers(self) -> List[ConvLayerSpec]:
        return self.convs + self.deconvs

    @property
    def parameters(self) -> List[Tensor]:
        return [p for layer in self.layers for p in layer.parameters]

    def _check_input(self, x: Tensor) -> None:
        if x.data.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise InvalidArgumentError(
                f"expected N×{self.cfg.in_channels}×H×W input, got shape {x.shape}"
            )
        h, w = x.shape[2], x.shape[3]
        m = self.cfg.min_input_size
        if h < m or w < m:
            raise InvalidArgumentError(f"input {h}x{w} is smaller than the minimum {m}x{m}")

    @staticmethod
    def _record(record: Optional[Dict[str, Tensor]], name: str, t: Tensor) -> Tensor:
        if record is not None:
            record[name] = t
        return t

    def stage1(self, x: Tensor, record: Optional[Dict[str, Tensor]] = None) -> Tensor:
        h = x
        for layer in self.convs[:self.cfg.stage1_convs]:
            h = self._record(record, layer.name, relu(layer(h)))
        return h

    def stage2(self, features: Tensor, record: Optional[Dict[str, Tensor]] = None) -> Tensor:
        s1 = self.cfg.stage1_convs
        sources = {c for c, _ in self.cfg.skip_pairs}
        saved: Dict[int, Tensor] = {}
        h = features
        for offset, layer in enumerate(self.convs[s1:], start=s1 + 1):
            h = self._record(record, layer.name, relu(layer(h)))
            if offset in sources:
                saved[offset] = h
        for idx, layer in enumerate(self.deconvs[:self.cfg.stage2_deconvs], start=1):
            pre = layer(h)
            for c in self._receivers.get(idx, ()):
                pre = add(pre, saved[c])
            h = self._record(record, layer.name, relu(pre))
        return h

    @staticmethod
    def junction(features: Tensor, reflection: Tensor) -> Tensor:
        return relu(subtract(features, reflection))

    def stage3(self, junction: Tensor, record: Optional[Dict[str, Tensor]] = None) -> Tensor:
        tail = self.deconvs[self.cfg.stage2_deconvs:]
        h = junction
        for layer in tail[:-1]:
            h = self._record(record, layer.name, relu(layer(h)))
        return self._record(record, tail[-1].name, tail[-1](h))

    def forward(self, x: Union[Tensor, np.ndarray], capture_taps: bool = False,
                capture_layers: bool = False) -> Tuple[Tensor, Optional[NetworkTaps]]:
        """Raw (unclamped) output and, on request, intermediate feature maps."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        self._check_input(x)
        record: Optional[Dict[str, Tensor]] = {} if capture_layers else None
        c6 = self.stage1(x, record)
        d6 = self.stage2(c6, record)
        j = self.junction(c6, d6)
        out = self.stage3(j, record)
        taps = None
        if capture_taps or capture_layers:
            taps = NetworkTaps(conv6_out=c6, deconv6_out=d6, junction_out=j, layers=record or {})
        return out, taps

    def __call__(self, x: Union[Tensor, np.ndarray]) -> Tensor:
        return self.forward(x)[0]

    def run_image(self, image: EncodedImage) -> EncodedImage:
        out, _ = self.forward(image_to_tensor(image))
        return tensor_to_image(out.data)


def _make_layer(plan: LayerPlan, rng: Optional[np.random.Generator]) -> ConvLayerSpec:
    if rng is not None:
        return ConvLayerSpec.create(plan.in_channels, plan.out_channels, plan.kernel, rng,
                                    transposed=plan.transposed, name=plan.name)
    shape = ConvLayerSpec.weight_shape(plan.in_channels, plan.out_channels, plan.kernel, plan.transposed)
    return ConvLayerSpec(
        in_channels=plan.in_channels,
        out_channels=plan.out_channels,
        kernel=plan.kernel,
        weight=parameter(np.zeros(shape), f"{plan.name}.weight"),
        bias=parameter(np.zeros(plan.out_channels), f"{plan.name}.bias"),
        transposed=plan.transposed,
        name=plan.name,
    )


def build_network(cfg: ModelConfig, initialize: bool = True) -> Network:
    """He-uniform init from cfg.seed in layer order; `initialize=False` gives all zeros."""
    rng = np.random.default_rng(cfg.seed) if initialize else None
    return Network(cfg, [_make_layer(p, rng) for p in layer_plan(cfg)])


def make_identity_network(cfg: ModelConfig) -> Network:
    """Weights for which F(I) = I on non-negative inputs."""
    if cfg.filters < cfg.in_channels or cfg.in_channels != cfg.out_channels:
        raise ConfigError("identity network needs filters >= channels and in_channels == out_channels")
    net = build_network(cfg, initialize=False)
    s2_deconvs = set(range(cfg.stage2_deconvs))
    stage2 = set(range(cfg.stage1_convs, cfg.total_convs))
    for idx, layer in enumerate(net.convs):
        if idx not in stage2:
            _identity_taps(layer)
    for idx, layer in enumerate(net.deconvs):
        if idx not in s2_deconvs:
            _identity_taps(layer)
    return net


def _identity_taps(layer: ConvLayerSpec) -> None:
    c = layer.kernel // 2
    w = layer.weight.data
    for ch in range(min(layer.in_channels, layer.out_channels)):
        w[ch, ch, c, c] = 1.0


# ---------------- CHECKPOINT ----------------
def _config_json(cfg: ModelConfig) -> bytes:
    return json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")


def checkpoint_bytes(net: Network) -> bytes:
    header = _config_json(net.cfg)
    payload = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in net.parameters)
    return _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header)) + header + payload


def save_checkpoint(net: Network, path: Path) -> Path:
    path = atomic_write_bytes(Path(path), checkpoint_bytes(net))
    logger.info(f"Checkpoint saved to {path}")
    return path


def network_from_bytes(blob: bytes) -> Network:
    if len(blob) < len(CHECKPOINT_MAGIC) or blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointVersionError("not a checkpoint file (bad magic bytes)")
    if len(blob) < _HEADER.size:
        raise CheckpointTruncatedError("checkpoint header is truncated")
    _, version, header_len = _HEADER.unpack_from(blob)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    start = _HEADER.size
    if len(blob) < start + header_len:
        raise CheckpointTruncatedError("checkpoint configuration block is truncated")
    try:
        cfg = ModelConfig.from_dict(json.loads(blob[start:start + header_len].decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"checkpoint configuration is unreadable: {e}") from e
    except (ConfigError, TypeError, ValueError) as e:
        raise CheckpointShapeError(f"checkpoint configuration is invalid: {e}") from e

    payload = memoryview(blob)[start + header_len:]
    expected = 8 * parameter_count(cfg)
    if len(payload) < expected:
        raise CheckpointTruncatedError(f"parameter block has {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise CheckpointShapeError(f"parameter block has {len(payload)} bytes, expected {expected}")

    values = np.frombuffer(payload, dtype="<f8")
    net = build_network(cfg, initialize=False)
    pos = 0
    for p in net.parameters:
        p.data[...] = values[pos:pos + p.size].reshape(p.shape)
        pos += p.size
    return net


def load_checkpoint(path: Path) -> Network:
    blob = Path(path).read_bytes()
    net = network_from_bytes(blob)
    logger.info(f"Checkpoint loaded from {path} ({parameter_count(net.cfg)} parameters)")
    return net
