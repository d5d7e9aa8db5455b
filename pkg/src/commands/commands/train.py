# commands/train.py
import logging

from src.core import BaseCommand, ConfigError, register_command, resolve_profile, train
from src.settings import settings

logger = logging.getLogger(__name__)


@register_command
class TrainCommand(BaseCommand):
    slug = "train"
    title = "Train the reflection-removal network"
    param_kinds = {
        "profile": "string",
        "manifest": "path",
        "out_dir": "path",
        "extractor_weights": "path",
        "train.lr": "float",
        "train.beta1": "float",
        "train.beta2": "float",
        "train.epsilon": "float",
        "train.batch_size": "int",
        "train.epochs": "int",
        "train.loss_lambda": "float",
        "train.seed": "int",
        "train.checkpoint_every": "int",
        "train.max_steps": "int",
        "model.filters": "int",
        "model.inner_kernel": "int",
        "model.outer_kernel": "int",
        "model.stage1_convs": "int",
        "model.stage2_convs": "int",
        "model.stage2_deconvs": "int",
        "model.stage3_deconvs": "int",
        "model.skip_pairs": "pairs",
        "model.seed": "int",
        "extractor.channels": "int_list",
        "extractor.kernel": "int",
        "extractor.seed": "int",
    }
    flags = {
        "--profile": ("profile", "smoke | desk | full (default: desk)"),
        "--manifest": ("manifest", "training manifest.json written by synth"),
        "--out-dir": ("out_dir", "where model.ckpt and train_log.jsonl go (default: $RR_OUT_DIR/train)"),
    }

    def run(self, ctx) -> int:
        manifest = self.param("manifest")
        if manifest is None:
            raise ConfigError("train needs a manifest")
        out_dir = self.param("out_dir", ctx.out_dir / "train")

        train_overrides = self.section("train")
        train_overrides["manifest"] = str(manifest)
        train_overrides["out_dir"] = str(out_dir)
        train_overrides["extractor_weights"] = str(self.param("extractor_weights", settings.extractor_weights))

        profile = resolve_profile(
            self.param("profile", "desk"),
            train=train_overrides,
            model=self.section("model"),
            extractor=self.section("extractor"),
        )
        if not profile.desk_runnable:
            logger.warning(f"Profile '{profile.name}' is not meant for a desktop CPU: {profile.description}")

        result = train(profile.train, profile.model, profile.extractor)
        losses = result.log.losses
        print(
            f"Trained {len(losses)} steps (loss {losses[0]:.6f} -> {losses[-1]:.6f}); "
            f"checkpoint: {result.checkpoint_path}"
        )
        return 0
