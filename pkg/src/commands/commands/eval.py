# commands/eval.py
import logging

from src.core import BaseCommand, ConfigError, evaluate, load_manifest, pairs_manifest, register_command

logger = logging.getLogger(__name__)


@register_command
class EvalCommand(BaseCommand):
    slug = "eval"
    title = "PSNR of a checkpoint on a paired test set"
    param_kinds = {
        "checkpoint": "path",
        "manifest": "path",
        "pairs_dir": "path",
        "report": "path",
        "xlsx": "path",
    }
    flags = {
        "--checkpoint": ("checkpoint", "model checkpoint written by train"),
        "--manifest": ("manifest", "manifest.json of the test split"),
        "--pairs-dir": ("pairs_dir", "directory with mixture/ and target/ PNGs (instead of --manifest)"),
        "--report": ("report", "JSON report path (default: $RR_OUT_DIR/eval_report.json)"),
        "--xlsx": ("xlsx", "also export the per-sample table as a spreadsheet"),
    }

    def run(self, ctx) -> int:
        checkpoint = self.param("checkpoint")
        if checkpoint is None:
            raise ConfigError("eval needs a checkpoint")
        manifest_path, pairs_dir = self.param("manifest"), self.param("pairs_dir")
        if (manifest_path is None) == (pairs_dir is None):
            raise ConfigError("eval needs exactly one of manifest or pairs_dir")
        manifest = load_manifest(manifest_path) if manifest_path is not None else pairs_manifest(pairs_dir)

        report = evaluate(checkpoint, manifest)
        report_path = report.save(self.param("report", ctx.out_dir / "eval_report.json"))
        xlsx = self.param("xlsx")
        if xlsx is not None:
            report.export_excel(xlsx)

        if report.zero_samples:
            print(f"No samples scored ({len(report.samples)} in manifest); report: {report_path}")
        else:
            print(
                f"Mean PSNR {report.mean_psnr:.2f} dB over {len(report.scored)} samples "
                f"(mixture baseline {report.baseline_mean_psnr:.2f} dB); report: {report_path}"
            )
        return 0
