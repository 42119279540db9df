from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()


@dataclass(frozen=True)
class Settings:
    RUNS_DIR: Path = Path(os.getenv("LAB_RUNS_DIR", "runs"))
    LOG_LEVEL: str = os.getenv("LAB_LOG_LEVEL", "INFO")
    PROGRESS: bool = os.getenv("LAB_PROGRESS", "1") == "1"
    WORKERS: int = int(os.getenv("LAB_WORKERS", "1"))
    DETERMINISTIC: bool = os.getenv("LAB_DETERMINISTIC", "1") == "1"
    VERSION: str = "0.1.0"
    PROJECT_DIR: Path = Path(__file__).resolve().parents[3]
    TEMPLATES_DIR: Path = PROJECT_DIR / "src" / "app" / "templates"

    @property
    def log_level(self) -> int:
        level = logging.getLevelName(self.LOG_LEVEL.upper())
        return level if isinstance(level, int) else logging.INFO


settings = Settings()

if settings.DETERMINISTIC:
    # BLAS в один поток; действует, только если numpy ещё не импортирован
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, "1")
