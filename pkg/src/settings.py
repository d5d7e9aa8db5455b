# settings.py
from dataclasses import dataclass
from pathlib import Path
import os
from dotenv import load_dotenv

load_dotenv()

# Project root (one level above src/)
BASE_DIR = Path(__file__).resolve().parent.parent
OUT_DIR = Path(os.getenv("RR_OUT_DIR", BASE_DIR / "out"))
DATA_DIR = Path(os.getenv("RR_DATA_DIR", BASE_DIR / "data"))

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

@dataclass(frozen=True)
class Settings:
    out_dir: Path = OUT_DIR
    data_dir: Path = DATA_DIR

    # Logging
    log_level: str = os.getenv("RR_LOG_LEVEL", "INFO")

    # Image pipeline
    gamma: float = float(os.getenv("RR_GAMMA", "2.2"))

    # Perceptual loss: empty path -> seeded fallback extractor
    extractor_weights: str = os.getenv("RR_EXTRACTOR_WEIGHTS", "")

    # Dataset generation
    synth_workers: int = int(os.getenv("RR_SYNTH_WORKERS", "1"))

settings = Settings()
