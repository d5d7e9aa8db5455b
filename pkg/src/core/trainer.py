# trainer.py
"""
Mini-batch training of the reflection-removal network and PSNR evaluation.

Each epoch visits the training manifest in the order
`np.random.default_rng([seed, epoch]).permutation(N)`, ⌈N / batch_size⌉ steps,
the last batch possibly smaller. A step is forward → loss → backward → Adam.
All arithmetic is float64 and single-threaded, so a fixed (config, seed,
dataset) gives a byte-identical checkpoint.

Training and evaluation work on gamma-encoded images in [0, 1]; the target
is the encoded αT written by the synthesizer.
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from src.core.autodiff import Adam, Tensor, backward
from src.core.errors import ConfigError, DataError, NonFiniteLossError, ToolkitError
from src.core.fileio import atomic_write_bytes, atomic_write_text, dump_json
from src.core.imgcore import image_to_tensor, psnr, read_png
from src.core.loss import ExtractorConfig, FeatureExtractor, LossWeights, load_extractor_weights, loss_terms
from src.core.model import ModelConfig, Network, build_network, checkpoint_bytes, load_checkpoint, save_checkpoint
from src.core.synthesis import Manifest, load_manifest
from src.settings import settings

logger = logging.getLogger(__name__)

TARGET_CONVENTION = "alpha_T"
# Published means, shown next to our numbers as context only.
REFERENCE_PSNR = {"synthetic_set": 29.08, "benchmark_set": 18.70}


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 8
    epochs: int = 5
    loss_lambda: float = 0.001
    seed: int = 0
    checkpoint_every: int = 0
    max_steps: Optional[int] = None
    manifest: str = ""
    out_dir: str = ""
    extractor_weights: str = ""

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        # lr = 0 is allowed: a frozen run that still logs losses
        if not math.isfinite(self.lr) or self.lr < 0:
            raise ConfigError(f"lr must be finite and >= 0, got {self.lr}")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ConfigError(f"beta1/beta2 must be in [0, 1), got {self.beta1}/{self.beta2}")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if self.checkpoint_every < 0:
            raise ConfigError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError(f"max_steps must be >= 1, got {self.max_steps}")
        if not math.isfinite(self.loss_lambda) or self.loss_lambda < 0:
            raise ConfigError(f"loss_lambda must be finite and >= 0, got {self.loss_lambda}")

    @property
    def output_dir(self) -> Path:
        return Path(self.out_dir) if self.out_dir else settings.out_dir / "train"

    @property
    def checkpoint_path(self) -> Path:
        return self.output_dir / "model.ckpt"

    @property
    def log_path(self) -> Path:
        return self.output_dir / "train_log.jsonl"

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class TrainingProfile:
    name: str
    train: TrainConfig
    model: ModelConfig
    extractor: ExtractorConfig
    desk_runnable: bool = True
    description: str = ""


PROFILES: Dict[str, TrainingProfile] = {
    "smoke": TrainingProfile(
        name="smoke",
        train=TrainConfig(lr=1e-3, batch_size=8, epochs=1000, max_steps=600),
        model=ModelConfig(filters=16, inner_kernel=3, outer_kernel=3,
                          stage1_convs=1, stage2_convs=1, stage2_deconvs=1, stage3_deconvs=1),
        extractor=ExtractorConfig(channels=(4, 8), kernel=3),
        description="4-layer test-scale model, overfits a handful of 32x32 pairs",
    ),
    "desk": TrainingProfile(
        name="desk",
        train=TrainConfig(lr=1e-4, batch_size=8, epochs=5),
        model=ModelConfig(filters=16, inner_kernel=3, outer_kernel=5,
                          stage1_convs=3, stage2_convs=4, stage2_deconvs=4, stage3_deconvs=3),
        extractor=ExtractorConfig(),
        description="laptop-sized network and extractor",
    ),
    "full": TrainingProfile(
        name="full",
        train=TrainConfig(lr=1e-4, batch_size=64, epochs=150),
        model=ModelConfig(),
        extractor=ExtractorConfig(channels=(64, 64, 128, 128, 256), kernel=3),
        desk_runnable=False,
        description="full-size 12+12 layer network; needs days of CPU time",
    ),
}


def get_profile(name: str) -> TrainingProfile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ConfigError(f"Unknown profile: {name} (known: {', '.join(PROFILES)})")


# ---------------- LOG ----------------
@dataclass
class TrainLog:
    seed: int
    config: Dict[str, Any]
    steps: List[Dict[str, Any]] = field(default_factory=list)
    epochs: List[Dict[str, Any]] = field(default_factory=list)
    wall_time_s: float = 0.0

    def add_step(self, step: int, epoch: int, values: Dict[str, float], elapsed_ms: float) -> None:
        self.steps.append({"step": step, "epoch": epoch, **values, "elapsed_ms": round(elapsed_ms, 3)})

    def close_epoch(self, epoch: int) -> Optional[float]:
        losses = [s["loss"] for s in self.steps if s["epoch"] == epoch]
        if not losses:
            return None
        mean = float(np.mean(losses))
        self.epochs.append({"epoch": epoch, "mean_loss": mean, "steps": len(losses)})
        return mean

    @property
    def losses(self) -> List[float]:
        return [s["loss"] for s in self.steps]

    def to_jsonl(self) -> str:
        lines = [json.dumps({"seed": self.seed, "config": self.config}, sort_keys=True)]
        lines += [json.dumps(s, sort_keys=True) for s in self.steps]
        lines += [json.dumps(e, sort_keys=True) for e in self.epochs]
        lines.append(json.dumps({"wall_time_s": round(self.wall_time_s, 3)}))
        return "\n".join(lines) + "\n"

    def save(self, path: Path) -> Path:
        return atomic_write_text(path, self.to_jsonl())


@dataclass
class TrainResult:
    network: Network
    log: TrainLog
    checkpoint_path: Path


# ---------------- DATA ----------------
def _check_files(manifest: Manifest) -> None:
    if len(manifest) == 0:
        raise DataError("training manifest has no samples")
    missing = []
    for entry in manifest.samples:
        missing += [str(p) for p in manifest.resolve(entry) if not p.is_file()]
    if missing:
        shown = ", ".join(missing[:5]) + (" ..." if len(missing) > 5 else "")
        raise DataError(f"{len(missing)} file(s) referenced by the manifest are missing: {shown}")


def load_pairs(manifest: Manifest) -> Tuple[np.ndarray, np.ndarray, List[str]]:
    """Decode every pair into N×3×H×W mixture and target arrays."""
    _check_files(manifest)
    mixtures, targets, ids = [], [], []
    for entry in manifest.samples:
        mix_path, tgt_path = manifest.resolve(entry)
        mixture, target = read_png(mix_path), read_png(tgt_path)
        if mixture.shape != target.shape:
            raise DataError(f"sample {entry.id}: mixture {mixture.shape} and target {target.shape} differ")
        if mixtures and mixture.shape[:2] != mixtures[0].shape[1:]:
            raise DataError(f"sample {entry.id}: size {mixture.shape[:2]} differs from {mixtures[0].shape[1:]}")
        mixtures.append(image_to_tensor(mixture)[0])
        targets.append(image_to_tensor(target)[0])
        ids.append(entry.id)
    return np.stack(mixtures), np.stack(targets), ids


# ---------------- TRAIN ----------------
def _extractor(cfg: TrainConfig, extractor_cfg: ExtractorConfig) -> FeatureExtractor:
    path = cfg.extractor_weights or settings.extractor_weights
    return load_extractor_weights(path, fallback=True, fallback_cfg=extractor_cfg)


def train(
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    extractor_cfg: ExtractorConfig = ExtractorConfig(),
    manifest: Optional[Manifest] = None,
) -> TrainResult:
    if manifest is None:
        if not cfg.manifest:
            raise ConfigError("no training manifest given")
        manifest = load_manifest(Path(cfg.manifest))
    mixtures, targets, ids = load_pairs(manifest)

    net = build_network(model_cfg)
    fx = _extractor(cfg, extractor_cfg)
    opt = Adam(net.parameters, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, epsilon=cfg.epsilon)
    weights = LossWeights(cfg.loss_lambda)

    n = len(ids)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    log = TrainLog(seed=cfg.seed, config={
        "train": cfg.to_dict(),
        "model": model_cfg.to_dict(),
        "extractor": fx.metadata,
        "samples": n,
    })
    logger.info(
        f"Training on {n} samples: {cfg.epochs} epochs x {steps_per_epoch} steps, "
        f"batch {cfg.batch_size}, lr {cfg.lr}"
    )

    started = time.perf_counter()
    step = 0
    done = False
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            step_started = time.perf_counter()

            opt.zero_grad()
            out = net(Tensor(mixtures[batch]))
            terms = loss_terms(out, targets[batch], fx, weights)
            values = terms.values()
            step += 1
            if not all(math.isfinite(v) for v in values.values()):
                raise NonFiniteLossError(step, [ids[i] for i in batch], values["loss"])
            backward(terms.total)
            opt.step()

            log.add_step(step, epoch, values, (time.perf_counter() - step_started) * 1000.0)
            logger.debug(f"step {step}: loss={values['loss']:.6f} l2={values['l2']:.6f}")
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(net, cfg.checkpoint_path)
                log.save(cfg.log_path)
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break

        mean = log.close_epoch(epoch)
        logger.info(f"Epoch {epoch + 1}/{cfg.epochs}: mean loss {mean:.6f}")
        if done:
            logger.info(f"Reached max_steps={cfg.max_steps}")
            break

    log.wall_time_s = time.perf_counter() - started
    path = save_checkpoint(net, cfg.checkpoint_path)
    log.save(cfg.log_path)
    return TrainResult(network=net, log=log, checkpoint_path=path)


# ---------------- EVALUATE ----------------
@dataclass
class SampleScore:
    id: str
    psnr: Optional[float] = None
    baseline_psnr: Optional[float] = None
    elapsed_ms: Optional[float] = None
    error: Optional[str] = None


def _json_float(value: Optional[float]) -> Union[float, str, None]:
    if value is None or math.isnan(value):
        return None
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return value


@dataclass
class EvalReport:
    samples: List[SampleScore]
    checkpoint_sha256: str = ""
    manifest: str = ""

    @property
    def scored(self) -> List[SampleScore]:
        return [s for s in self.samples if s.error is None]

    @property
    def zero_samples(self) -> bool:
        return not self.scored

    @property
    def mean_psnr(self) -> Optional[float]:
        return float(np.mean([s.psnr for s in self.scored])) if self.scored else None

    @property
    def baseline_mean_psnr(self) -> Optional[float]:
        return float(np.mean([s.baseline_psnr for s in self.scored])) if self.scored else None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mean_psnr": _json_float(self.mean_psnr),
            "baseline_mean_psnr": _json_float(self.baseline_mean_psnr),
            "sample_count": len(self.samples),
            "failed_count": len(self.samples) - len(self.scored),
            "zero_samples": self.zero_samples,
            "target_convention": TARGET_CONVENTION,
            "reference_psnr": dict(REFERENCE_PSNR),
            "checkpoint_sha256": self.checkpoint_sha256,
            "manifest": self.manifest,
            "samples": [
                {
                    "id": s.id,
                    "psnr": _json_float(s.psnr),
                    "baseline_psnr": _json_float(s.baseline_psnr),
                    "elapsed_ms": s.elapsed_ms,
                    "error": s.error,
                }
                for s in self.samples
            ],
        }

    def save(self, path: Path) -> Path:
        return dump_json(path, self.to_dict())

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(
            [asdict(s) for s in self.samples],
            columns=["id", "psnr", "baseline_psnr", "elapsed_ms", "error"],
        )
        df["gain"] = df["psnr"] - df["baseline_psnr"]
        return df[["id", "psnr", "baseline_psnr", "gain", "elapsed_ms", "error"]]

    def export_excel(self, out_path: Path) -> Path:
        df = self.to_frame().replace([np.inf], np.nan)
        buf = io.BytesIO()
        with pd.ExcelWriter(buf, engine="xlsxwriter") as xw:
            df.to_excel(xw, index=False, sheet_name="PSNR")
            ws = xw.sheets["PSNR"]
            header_fmt = xw.book.add_format({"bold": True, "bg_color": "#EFEFEF", "border": 1})
            float_fmt = xw.book.add_format({"num_format": "0.00"})
            for col_idx, col_name in enumerate(df.columns):
                ws.write(0, col_idx, col_name, header_fmt)
                if pd.api.types.is_float_dtype(df[col_name]):
                    ws.set_column(col_idx, col_idx, 14, float_fmt)
                else:
                    ws.set_column(col_idx, col_idx, max(12, len(col_name) + 2))
            summary_col = len(df.columns) + 1
            ws.write(0, summary_col, "mean_psnr", header_fmt)
            ws.write(1, summary_col, _json_float(self.mean_psnr) if self.mean_psnr is not None else "")
            ws.write(2, summary_col, "baseline_mean_psnr", header_fmt)
            ws.write(3, summary_col, _json_float(self.baseline_mean_psnr) if self.baseline_mean_psnr is not None else "")
        return atomic_write_bytes(Path(out_path), buf.getvalue())


def evaluate(checkpoint: Union[Network, Path, str], manifest: Manifest) -> EvalReport:
    """Per-sample PSNR of clamped network output vs target; failures are recorded, not raised."""
    net = checkpoint if isinstance(checkpoint, Network) else load_checkpoint(Path(checkpoint))
    digest = hashlib.sha256(checkpoint_bytes(net)).hexdigest()

    scores = []
    for entry in manifest.samples:
        mix_path, tgt_path = manifest.resolve(entry)
        try:
            mixture, target = read_png(mix_path), read_png(tgt_path)
            if mixture.shape != target.shape:
                raise DataError(f"mixture {mixture.shape} and target {target.shape} differ")
            started = time.perf_counter()
            restored = net.run_image(mixture)
            elapsed = (time.perf_counter() - started) * 1000.0
            scores.append(SampleScore(
                id=entry.id,
                psnr=psnr(restored, target),
                baseline_psnr=psnr(mixture, target),
                elapsed_ms=round(elapsed, 3),
            ))
        except (ToolkitError, OSError, ValueError) as e:
            logger.warning(f"Sample {entry.id} failed: {e}")
            scores.append(SampleScore(id=entry.id, error=str(e)))

    report = EvalReport(samples=scores, checkpoint_sha256=digest, manifest=str(manifest.base_dir))
    if report.zero_samples:
        logger.info("Evaluation finished with no scored samples")
    else:
        logger.info(
            f"Evaluated {len(report.scored)}/{len(scores)} samples: mean PSNR {report.mean_psnr:.2f} dB "
            f"(baseline {report.baseline_mean_psnr:.2f} dB)"
        )
    return report


def resolve_profile(
    name: str,
    train: Optional[Dict[str, Any]] = None,
    model: Optional[Dict[str, Any]] = None,
    extractor: Optional[Dict[str, Any]] = None,
) -> TrainingProfile:
    """Named profile with individual config fields replaced."""
    profile = get_profile(name)
    model = dict(model or {})
    # depth overrides need the skip pairs re-derived
    model.setdefault("skip_pairs", None)
    try:
        return replace(
            profile,
            train=replace(profile.train, **(train or {})),
            model=replace(profile.model, **model),
            extractor=replace(profile.extractor, **(extractor or {})),
        )
    except TypeError as e:
        raise ConfigError(str(e)) from e
