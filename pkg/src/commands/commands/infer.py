# commands/infer.py
import logging
import time

from src.core import (
    BaseCommand,
    ConfigError,
    GammaParam,
    estimate_reflection,
    load_checkpoint,
    read_png,
    register_command,
    restore_transmission,
    write_png,
)
from src.settings import settings

logger = logging.getLogger(__name__)


@register_command
class InferCommand(BaseCommand):
    slug = "infer"
    title = "Remove reflections from a single image"
    param_kinds = {
        "checkpoint": "path",
        "input": "path",
        "output": "path",
        "reflection_output": "path",
        "alpha": "float",
        "gamma": "float",
    }
    flags = {
        "--checkpoint": ("checkpoint", "model checkpoint written by train"),
        "--input": ("input", "mixture PNG"),
        "--output": ("output", "restored PNG (default: $RR_OUT_DIR/<input>_restored.png)"),
        "--reflection-output": ("reflection_output", "also write the residual reflection layer I - T'"),
        "--alpha": ("alpha", "write T = T'/alpha instead of T'"),
    }

    def run(self, ctx) -> int:
        checkpoint = self.param("checkpoint")
        source = self.param("input")
        if checkpoint is None or source is None:
            raise ConfigError("infer needs checkpoint and input")
        output = self.param("output", ctx.out_dir / f"{source.stem}_restored.png")

        net = load_checkpoint(checkpoint)
        mixture = read_png(source)

        started = time.perf_counter()
        t_prime = net.run_image(mixture)
        elapsed = time.perf_counter() - started

        alpha = self.param("alpha")
        if alpha is not None:
            gamma = GammaParam(self.param("gamma", settings.gamma))
            write_png(restore_transmission(t_prime, alpha, gamma), output)
        else:
            write_png(t_prime, output)

        reflection_output = self.param("reflection_output")
        if reflection_output is not None:
            write_png(estimate_reflection(mixture, t_prime), reflection_output)

        logger.info(f"Inference on {source} took {elapsed:.3f} s")
        print(f"Processed {mixture.width}x{mixture.height} image in {elapsed:.3f} s -> {output}")
        return 0
