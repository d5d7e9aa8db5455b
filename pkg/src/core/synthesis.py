# synthesis.py
"""
Synthetic reflection-tainted training pairs.

A mixture is formed in linear light as

    I = clamp(α·T + β·(R ∗ G ∗ K) + n, 0, 1)

with G a normalised Gaussian (defocus blur of the reflection) and K either the
identity (single reflection, β = 1 − α) or a two-pulse kernel carrying the
front/back surface amplitudes 1 − √α and √α − α (double reflection, β = 1).
The training target is α·T. Both are gamma-encoded for storage.

Convolution is true convolution (kernel flipped) with edge replication at the
borders, so a pulse at offset (dy, dx) shifts the ghost image by (dy, dx).

Randomness
    Every draw for sample `index` comes from
    `np.random.default_rng(SeedSequence([seed, stream, index]))`, one stream per
    purpose, so a sample is a pure function of (sources, config, index) and
    generation order does not matter.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage, signal

from src.core.errors import InvalidArgumentError, InvalidInputError, ManifestError
from src.core.fileio import dump_json
from src.core.imgcore import (
    EncodedImage,
    GammaParam,
    LinearImage,
    crop_offsets,
    crop_random,
    decode_gamma,
    encode_gamma,
    read_png,
    resize_bilinear,
    write_png,
)

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
BETA_MODES = ("complement", "double_reflection")

# random streams
_STREAM_DRAW = 0
_STREAM_PICK = 1
_STREAM_SPLIT = 2


def _rng(seed: int, stream: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream, *map(int, keys)]))


# ---------------- KERNELS ----------------
@dataclass(frozen=True, eq=False)
class Kernel2D:
    taps: np.ndarray
    kind: str = "generic"

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        if taps.ndim != 2 or taps.shape[0] % 2 == 0 or taps.shape[1] % 2 == 0:
            raise InvalidArgumentError(f"kernel must be 2-D with odd sides, got shape {taps.shape}")
        object.__setattr__(self, "taps", taps)

    @property
    def height(self) -> int:
        return self.taps.shape[0]

    @property
    def width(self) -> int:
        return self.taps.shape[1]

    @property
    def center(self) -> Tuple[int, int]:
        return self.height // 2, self.width // 2


def identity_kernel() -> Kernel2D:
    return Kernel2D(np.ones((1, 1)), kind="identity")


def gaussian_kernel(sigma: float) -> Kernel2D:
    """Square Gaussian of radius ceil(3σ), normalised to unit sum."""
    if not math.isfinite(sigma) or sigma <= 0:
        raise InvalidArgumentError(f"sigma must be positive, got {sigma}")
    radius = math.ceil(3.0 * sigma)
    dy, dx = np.mgrid[-radius:radius + 1, -radius:radius + 1].astype(np.float64)
    taps = np.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma))
    return Kernel2D(taps / taps.sum(), kind="gaussian")


def double_reflection_kernel(alpha: float, offset: Tuple[int, int]) -> Kernel2D:
    """
    Two pulses: 1 − √α at the centre, √α − α at (dy, dx) from it.

    α = 1 is accepted as the no-reflection limit (both pulses are zero).
    """
    if not 0.0 < alpha <= 1.0:
        raise InvalidArgumentError(f"alpha must be in (0, 1], got {alpha}")
    dy, dx = int(offset[0]), int(offset[1])
    reach = max(abs(dy), abs(dx))
    if reach == 0:
        raise InvalidArgumentError("double reflection offset must be non-zero")
    size = 2 * reach + 1
    taps = np.zeros((size, size))
    root = math.sqrt(alpha)
    taps[reach, reach] = 1.0 - root
    taps[reach + dy, reach + dx] = root - alpha
    return Kernel2D(taps, kind="double_pulse")


def compose_kernels(a: Kernel2D, b: Kernel2D) -> Kernel2D:
    """Full 2-D convolution a ∗ b (odd ∗ odd stays odd)."""
    return Kernel2D(signal.convolve2d(a.taps, b.taps, mode="full"), kind="composite")


def convolve2d(img: LinearImage, k: Kernel2D) -> LinearImage:
    """Same-size convolution, edge-replicated borders, per channel."""
    if k.height > img.height or k.width > img.width:
        raise InvalidArgumentError(
            f"kernel {k.height}x{k.width} is larger than image {img.height}x{img.width}"
        )
    out = np.empty_like(img.data)
    for c in range(img.data.shape[2]):
        out[:, :, c] = ndimage.convolve(img.data[:, :, c], k.taps, mode="nearest")
    return type(img)(out)


# ---------------- CONFIG ----------------
@dataclass(frozen=True)
class SynthConfig:
    alpha_range: Tuple[float, float] = (0.75, 0.8)
    sigma_range: Tuple[float, float] = (1.0, 5.0)
    beta_mode: str = "complement"
    offset_range: Tuple[int, int] = (3, 10)
    noise_std: float = 0.0
    patch: int = 128
    reflections_per_transmission: int = 18
    gamma: GammaParam = field(default_factory=GammaParam)
    seed: int = 0
    blur: bool = True
    crop_fraction: Tuple[float, float] = (0.5, 1.0)
    split_ratio: float = 0.75
    workers: int = 1

    def __post_init__(self):
        lo, hi = self.alpha_range
        if not (0.0 < lo <= hi <= 1.0):
            raise InvalidArgumentError(f"alpha_range must lie in (0, 1], got {self.alpha_range}")
        s_lo, s_hi = self.sigma_range
        if not (0.0 < s_lo <= s_hi):
            raise InvalidArgumentError(f"sigma_range must be positive, got {self.sigma_range}")
        o_lo, o_hi = self.offset_range
        if not (1 <= o_lo <= o_hi):
            raise InvalidArgumentError(f"offset_range must satisfy 1 <= lo <= hi, got {self.offset_range}")
        if self.beta_mode not in BETA_MODES:
            raise InvalidArgumentError(f"beta_mode must be one of {BETA_MODES}, got {self.beta_mode!r}")
        if not math.isfinite(self.noise_std) or self.noise_std < 0:
            raise InvalidArgumentError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.patch < 1 or self.reflections_per_transmission < 1:
            raise InvalidArgumentError("patch and reflections_per_transmission must be >= 1")
        f_lo, f_hi = self.crop_fraction
        if not (0.0 < f_lo <= f_hi <= 1.0):
            raise InvalidArgumentError(f"crop_fraction must lie in (0, 1], got {self.crop_fraction}")
        if not 0.0 <= self.split_ratio <= 1.0:
            raise InvalidArgumentError(f"split_ratio must lie in [0, 1], got {self.split_ratio}")
        if self.workers < 1:
            raise InvalidArgumentError(f"workers must be >= 1, got {self.workers}")
        if self.max_kernel_side > self.patch:
            raise InvalidArgumentError(
                f"patch {self.patch} is smaller than the largest kernel the ranges allow "
                f"({self.max_kernel_side}x{self.max_kernel_side})"
            )

    @property
    def max_kernel_side(self) -> int:
        """Side of the widest blur or ghosting kernel any draw can produce."""
        side = 1
        if self.blur:
            side = 2 * math.ceil(3.0 * self.sigma_range[1]) + 1
        if self.beta_mode == "double_reflection":
            side = max(side, 2 * self.offset_range[1] + 1)
        return side

    def to_dict(self) -> Dict[str, Any]:
        echo = asdict(self)
        echo["gamma"] = self.gamma.gamma
        for key in ("alpha_range", "sigma_range", "offset_range", "crop_fraction"):
            echo[key] = list(echo[key])
        # worker count does not influence the output
        echo.pop("workers")
        return echo


# ---------------- COMPOSITING ----------------
@dataclass(frozen=True)
class CompositeParams:
    alpha: float
    beta: float
    gaussian: Kernel2D = field(default_factory=identity_kernel)
    pulse: Kernel2D = field(default_factory=identity_kernel)
    noise_std: float = 0.0
    noise_seed: int = 0

    @classmethod
    def for_mode(
        cls,
        mode: str,
        alpha: float,
        sigma: Optional[float],
        offset: Tuple[int, int] = (0, 0),
        noise_std: float = 0.0,
        noise_seed: int = 0,
    ) -> "CompositeParams":
        """complement: β = 1 − α, K = identity; double_reflection: β = 1, K = two pulses."""
        gaussian = gaussian_kernel(sigma) if sigma else identity_kernel()
        if mode == "complement":
            return cls(alpha, 1.0 - alpha, gaussian, identity_kernel(), noise_std, noise_seed)
        if mode == "double_reflection":
            return cls(alpha, 1.0, gaussian, double_reflection_kernel(alpha, offset), noise_std, noise_seed)
        raise InvalidArgumentError(f"unknown beta mode: {mode!r}")


def composite(T: LinearImage, R: LinearImage, params: CompositeParams) -> LinearImage:
    if T.shape != R.shape:
        raise InvalidArgumentError(f"T and R shapes differ: {T.shape} vs {R.shape}")
    reflection = R
    if params.gaussian.kind != "identity":
        reflection = convolve2d(reflection, params.gaussian)
    if params.pulse.kind != "identity":
        reflection = convolve2d(reflection, params.pulse)
    mixed = params.alpha * T.data + params.beta * reflection.data
    if params.noise_std > 0:
        rng = np.random.default_rng(params.noise_seed)
        mixed = mixed + rng.normal(0.0, params.noise_std, size=mixed.shape)
    return LinearImage(np.clip(mixed, 0.0, 1.0))


# ---------------- PAIRS ----------------
@dataclass(frozen=True)
class SampleDraw:
    alpha: float
    sigma: float
    offsets: Tuple[int, int]
    crop_fraction: float
    crop_seed: int
    noise_seed: int


def draw_parameters(cfg: SynthConfig, index: int) -> SampleDraw:
    # fixed draw order, independent of mode, so toggling a mode keeps α and σ
    rng = _rng(cfg.seed, _STREAM_DRAW, index)
    alpha = float(rng.uniform(*cfg.alpha_range))
    sigma = float(rng.uniform(*cfg.sigma_range))
    magnitude = rng.integers(cfg.offset_range[0], cfg.offset_range[1] + 1, size=2)
    signs = rng.choice(np.array([-1, 1]), size=2)
    crop_fraction = float(rng.uniform(*cfg.crop_fraction))
    crop_seed = int(rng.integers(0, 2**32))
    noise_seed = int(rng.integers(0, 2**32))
    offsets = (int(magnitude[0] * signs[0]), int(magnitude[1] * signs[1]))
    return SampleDraw(alpha, sigma, offsets, crop_fraction, crop_seed, noise_seed)


@dataclass(frozen=True)
class SampleProvenance:
    sample_id: str
    index: int
    seed: int
    transmission_src: str
    reflection_src: str
    alpha: float
    sigma: Optional[float]
    offsets: Optional[Tuple[int, int]]
    mode: str
    crop: Tuple[int, int, int]  # top, left, side in the reflection source


@dataclass(frozen=True)
class SamplePair:
    mixture: EncodedImage
    target: EncodedImage
    provenance: SampleProvenance


def synthesize_pair(
    T_src: EncodedImage,
    R_src: EncodedImage,
    cfg: SynthConfig,
    index: int,
    transmission_id: str = "",
    reflection_id: str = "",
) -> SamplePair:
    """
    decode → resize T to the patch → crop R (a random square covering
    crop_fraction of its shorter side) and resize it to the patch → composite
    → encode mixture and α·T.
    """
    patch = cfg.patch
    for name, src in (("transmission", T_src), ("reflection", R_src)):
        if src.height < patch or src.width < patch:
            raise InvalidInputError(
                f"{name} source {src.height}x{src.width} is smaller than the {patch}x{patch} patch"
            )

    draw = draw_parameters(cfg, index)
    t_lin = resize_bilinear(decode_gamma(T_src, cfg.gamma), patch, patch)

    r_lin = decode_gamma(R_src, cfg.gamma)
    side = max(patch, int(draw.crop_fraction * min(r_lin.height, r_lin.width)))
    r_crop = crop_random(r_lin, side, side, draw.crop_seed)
    r_lin = resize_bilinear(r_crop, patch, patch)

    sigma = draw.sigma if cfg.blur else None
    params = CompositeParams.for_mode(
        cfg.beta_mode, draw.alpha, sigma, draw.offsets, cfg.noise_std, draw.noise_seed
    )
    mixture = composite(t_lin, r_lin, params)
    target = LinearImage(draw.alpha * t_lin.data)

    top, left = crop_offsets(R_src.height, R_src.width, side, side, draw.crop_seed)
    provenance = SampleProvenance(
        sample_id=f"{index:06d}",
        index=index,
        seed=cfg.seed,
        transmission_src=transmission_id,
        reflection_src=reflection_id,
        alpha=draw.alpha,
        sigma=sigma,
        offsets=draw.offsets if cfg.beta_mode == "double_reflection" else None,
        mode=cfg.beta_mode,
        crop=(top, left, side),
    )
    return SamplePair(encode_gamma(mixture, cfg.gamma), encode_gamma(target, cfg.gamma), provenance)


# ---------------- MANIFEST ----------------
@dataclass(frozen=True)
class ManifestEntry:
    id: str
    mixture_path: str
    target_path: str
    transmission_src: str = ""
    reflection_src: str = ""
    alpha: Optional[float] = None
    sigma: Optional[float] = None
    offsets: Optional[Tuple[int, int]] = None
    mode: str = ""

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["offsets"] = list(self.offsets) if self.offsets is not None else None
        return d


@dataclass
class Manifest:
    samples: List[ManifestEntry]
    config: Dict[str, Any] = field(default_factory=dict)
    split: str = ""
    base_dir: Path = Path(".")
    version: int = MANIFEST_VERSION

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def transmission_ids(self) -> List[str]:
        return sorted({s.transmission_src for s in self.samples})

    def resolve(self, entry: ManifestEntry) -> Tuple[Path, Path]:
        return self.base_dir / entry.mixture_path, self.base_dir / entry.target_path

    def to_dict(self) -> Dict[str, Any]:
        return {
            "version": self.version,
            "split": self.split,
            "config": self.config,
            "transmission_ids": self.transmission_ids,
            "samples": [s.to_dict() for s in self.samples],
        }

    def save(self, path: Path) -> Path:
        return dump_json(path, self.to_dict())


def load_manifest(path: Path) -> Manifest:
    path = Path(path)
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ManifestError(f"manifest not found: {path}") from e
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ManifestError(f"manifest {path} is not valid JSON: {e}") from e

    if not isinstance(document, dict) or not isinstance(document.get("samples"), list):
        raise ManifestError(f"manifest {path} has no 'samples' list")
    if document.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"manifest {path} has unsupported version {document.get('version')!r}")

    entries = []
    for i, raw in enumerate(document["samples"]):
        missing = [k for k in ("id", "mixture_path", "target_path") if k not in raw]
        if missing:
            raise ManifestError(f"sample {i} in {path} is missing fields: {missing}")
        offsets = raw.get("offsets")
        entries.append(ManifestEntry(
            id=str(raw["id"]),
            mixture_path=str(raw["mixture_path"]),
            target_path=str(raw["target_path"]),
            transmission_src=str(raw.get("transmission_src", "")),
            reflection_src=str(raw.get("reflection_src", "")),
            alpha=raw.get("alpha"),
            sigma=raw.get("sigma"),
            offsets=tuple(offsets) if offsets is not None else None,
            mode=str(raw.get("mode", "")),
        ))
    return Manifest(
        samples=entries,
        config=document.get("config", {}),
        split=document.get("split", ""),
        base_dir=path.parent,
    )


def pairs_manifest(pairs_dir: Path) -> Manifest:
    """In-memory manifest over `<dir>/mixture/*.png` ↔ `<dir>/target/*.png` matched by name."""
    pairs_dir = Path(pairs_dir)
    mix_dir, tgt_dir = pairs_dir / "mixture", pairs_dir / "target"
    if not mix_dir.is_dir() or not tgt_dir.is_dir():
        raise InvalidInputError(f"{pairs_dir} must contain 'mixture' and 'target' directories")
    targets = {p.name for p in tgt_dir.glob("*.png")}
    entries = [
        ManifestEntry(id=p.stem, mixture_path=f"mixture/{p.name}", target_path=f"target/{p.name}")
        for p in sorted(mix_dir.glob("*.png"))
        if p.name in targets
    ]
    return Manifest(samples=entries, split="pairs", base_dir=pairs_dir)


# ---------------- DATASET ----------------
@dataclass(frozen=True)
class DatasetManifests:
    train: Manifest
    test: Manifest

    def __len__(self) -> int:
        return len(self.train) + len(self.test)


def _list_pngs(directory: Path, role: str) -> List[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise InvalidInputError(f"{role} directory does not exist: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() == ".png" and p.is_file())
    if not files:
        raise InvalidInputError(f"{role} directory contains no PNG files: {directory}")
    return files


def split_transmissions(n: int, ratio: float, seed: int) -> List[bool]:
    """Flag per transmission index: True → train. round(ratio·n) go to train."""
    n_train = int(math.floor(ratio * n + 0.5))
    order = _rng(seed, _STREAM_SPLIT).permutation(n)
    flags = [False] * n
    for t_idx in order[:n_train]:
        flags[int(t_idx)] = True
    return flags


def pick_reflections(n_reflections: int, count: int, seed: int, t_idx: int) -> List[int]:
    rng = _rng(seed, _STREAM_PICK, t_idx)
    # without replacement while the pool allows it
    replace = count > n_reflections
    return [int(i) for i in rng.choice(n_reflections, size=count, replace=replace)]


def generate_dataset(
    transmission_dir: Path,
    reflection_dir: Path,
    cfg: SynthConfig,
    out_dir: Path,
) -> DatasetManifests:
    t_files = _list_pngs(transmission_dir, "transmission")
    r_files = _list_pngs(reflection_dir, "reflection")
    out_dir = Path(out_dir)

    rpt = cfg.reflections_per_transmission
    in_train = split_transmissions(len(t_files), cfg.split_ratio, cfg.seed)
    jobs = []
    for t_idx, t_path in enumerate(t_files):
        split = "train" if in_train[t_idx] else "test"
        for j, r_idx in enumerate(pick_reflections(len(r_files), rpt, cfg.seed, t_idx)):
            jobs.append((t_idx * rpt + j, split, t_path, r_files[r_idx]))

    logger.info(
        f"Synthesizing {len(jobs)} pairs from {len(t_files)} transmission and "
        f"{len(r_files)} reflection images (workers={cfg.workers})"
    )

    def run(job) -> Tuple[str, ManifestEntry]:
        index, split, t_path, r_path = job
        pair = synthesize_pair(read_png(t_path), read_png(r_path), cfg, index, t_path.stem, r_path.stem)
        prov = pair.provenance
        mixture_rel = f"mixture/{prov.sample_id}.png"
        target_rel = f"target/{prov.sample_id}.png"
        write_png(pair.mixture, out_dir / split / mixture_rel)
        write_png(pair.target, out_dir / split / target_rel)
        return split, ManifestEntry(
            id=prov.sample_id,
            mixture_path=mixture_rel,
            target_path=target_rel,
            transmission_src=prov.transmission_src,
            reflection_src=prov.reflection_src,
            alpha=prov.alpha,
            sigma=prov.sigma,
            offsets=prov.offsets,
            mode=prov.mode,
        )

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]

    config_echo = cfg.to_dict()
    config_echo["transmission_dir"] = str(transmission_dir)
    config_echo["reflection_dir"] = str(reflection_dir)

    manifests = {}
    for split in ("train", "test"):
        entries = [entry for s, entry in results if s == split]
        manifest = Manifest(samples=entries, config=config_echo, split=split, base_dir=out_dir / split)
        manifest.save(out_dir / split / "manifest.json")
        manifests[split] = manifest

    logger.info(
        f"Dataset written to {out_dir}: {len(manifests['train'])} train / {len(manifests['test'])} test samples"
    )
    return DatasetManifests(train=manifests["train"], test=manifests["test"])

