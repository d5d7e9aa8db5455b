# commands/synth.py
import logging
from dataclasses import fields

from src.core import BaseCommand, ConfigError, GammaParam, SynthConfig, generate_dataset, register_command
from src.settings import settings

logger = logging.getLogger(__name__)

_SYNTH_FIELDS = {f.name for f in fields(SynthConfig)}


@register_command
class SynthCommand(BaseCommand):
    slug = "synth"
    title = "Synthesize mixture/target training pairs"
    param_kinds = {
        "transmission_dir": "path",
        "reflection_dir": "path",
        "out_dir": "path",
        "alpha_range": "range",
        "sigma_range": "range",
        "beta_mode": "string",
        "offset_range": "int_range",
        "noise_std": "float",
        "patch": "int",
        "reflections_per_transmission": "int",
        "gamma": "float",
        "seed": "int",
        "blur": "bool",
        "crop_fraction": "range",
        "split_ratio": "float",
        "workers": "int",
    }
    flags = {
        "--transmission-dir": ("transmission_dir", "directory of transmission (background) PNGs"),
        "--reflection-dir": ("reflection_dir", "directory of reflection PNGs"),
        "--out-dir": ("out_dir", "dataset output directory (default: $RR_OUT_DIR/dataset)"),
    }

    def synth_config(self) -> SynthConfig:
        kwargs = {k: v for k, v in self.params.items() if k in _SYNTH_FIELDS and v is not None}
        kwargs["gamma"] = GammaParam(kwargs.get("gamma", settings.gamma))
        kwargs.setdefault("workers", settings.synth_workers)
        return SynthConfig(**kwargs)

    def run(self, ctx) -> int:
        t_dir = self.param("transmission_dir")
        r_dir = self.param("reflection_dir")
        if t_dir is None or r_dir is None:
            raise ConfigError("synth needs both transmission_dir and reflection_dir")
        out_dir = self.param("out_dir", ctx.out_dir / "dataset")

        cfg = self.synth_config()
        manifests = generate_dataset(t_dir, r_dir, cfg, out_dir)
        print(
            f"Synthesized {len(manifests)} samples "
            f"({len(manifests.train)} train / {len(manifests.test)} test) -> {out_dir}"
        )
        return 0
