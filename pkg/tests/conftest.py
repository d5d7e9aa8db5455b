from pathlib import Path

import numpy as np
import pytest

from src.core.imgcore import EncodedImage, resize_bilinear, write_png
from src.core.model import ModelConfig
from src.core.synthesis import SynthConfig, generate_dataset


def smooth_image(rng: np.random.Generator, height: int, width: int, cells: int = 6) -> EncodedImage:
    """Low-frequency random image: a coarse grid upsampled bilinearly."""
    coarse = EncodedImage(rng.uniform(0.05, 0.95, size=(cells, cells, 3)))
    return resize_bilinear(coarse, height, width)


def write_sources(directory: Path, count: int, size, seed: int) -> Path:
    rng = np.random.default_rng(seed)
    directory.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        write_png(smooth_image(rng, *size), directory / f"img{i:02d}.png")
    return directory


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def source_dirs(tmp_path):
    t_dir = write_sources(tmp_path / "T", 2, (40, 40), seed=1)
    r_dir = write_sources(tmp_path / "R", 3, (48, 44), seed=2)
    return t_dir, r_dir


@pytest.fixture
def tiny_synth_cfg():
    # 2 transmissions x 4 reflections, everything in the train split
    return SynthConfig(patch=32, reflections_per_transmission=4, split_ratio=1.0, seed=3)


@pytest.fixture
def tiny_dataset(tmp_path, source_dirs, tiny_synth_cfg):
    t_dir, r_dir = source_dirs
    return generate_dataset(t_dir, r_dir, tiny_synth_cfg, tmp_path / "dataset")


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(
        filters=4, inner_kernel=3, outer_kernel=3,
        stage1_convs=1, stage2_convs=1, stage2_deconvs=1, stage3_deconvs=1,
        seed=5,
    )
