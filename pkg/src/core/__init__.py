from .core import (
    BaseCommand,
    CommandRegistry,
    RunContext,
    flatten_config,
    load_config_file,
    parse_overrides,
    register_command,
)
from .errors import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    DataError,
    ExtractorLoadError,
    InvalidArgumentError,
    InvalidInputError,
    ManifestError,
    NonFiniteLossError,
    ToolkitError,
)
from .imgcore import (
    EncodedImage,
    GammaParam,
    LinearImage,
    crop_random,
    decode_gamma,
    encode_gamma,
    estimate_reflection,
    psnr,
    read_png,
    resize_bilinear,
    restore_transmission,
    write_png,
)
from .synthesis import (
    Kernel2D,
    Manifest,
    SynthConfig,
    composite,
    double_reflection_kernel,
    gaussian_kernel,
    generate_dataset,
    load_manifest,
    pairs_manifest,
    synthesize_pair,
)
from .model import (
    ModelConfig,
    Network,
    build_network,
    load_checkpoint,
    make_identity_network,
    parameter_count,
    save_checkpoint,
)
from .loss import (
    ExtractorConfig,
    LossWeights,
    build_extractor,
    combined_loss,
    l2_loss,
    load_extractor_weights,
    perceptual_loss,
    save_extractor_weights,
)
from .trainer import (
    EvalReport,
    TrainConfig,
    evaluate,
    get_profile,
    resolve_profile,
    train,
)

__all__ = [
    "BaseCommand",
    "CommandRegistry",
    "RunContext",
    "flatten_config",
    "load_config_file",
    "parse_overrides",
    "register_command",
    "CheckpointError",
    "CheckpointShapeError",
    "CheckpointTruncatedError",
    "CheckpointVersionError",
    "ConfigError",
    "DataError",
    "ExtractorLoadError",
    "InvalidArgumentError",
    "InvalidInputError",
    "ManifestError",
    "NonFiniteLossError",
    "ToolkitError",
    "EncodedImage",
    "GammaParam",
    "LinearImage",
    "crop_random",
    "decode_gamma",
    "encode_gamma",
    "estimate_reflection",
    "psnr",
    "read_png",
    "resize_bilinear",
    "restore_transmission",
    "write_png",
    "Kernel2D",
    "Manifest",
    "SynthConfig",
    "composite",
    "double_reflection_kernel",
    "gaussian_kernel",
    "generate_dataset",
    "load_manifest",
    "pairs_manifest",
    "synthesize_pair",
    "ModelConfig",
    "Network",
    "build_network",
    "load_checkpoint",
    "make_identity_network",
    "parameter_count",
    "save_checkpoint",
    "ExtractorConfig",
    "LossWeights",
    "build_extractor",
    "combined_loss",
    "l2_loss",
    "load_extractor_weights",
    "perceptual_loss",
    "save_extractor_weights",
    "EvalReport",
    "TrainConfig",
    "evaluate",
    "get_profile",
    "resolve_profile",
    "train",
]
