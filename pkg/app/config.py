"""Runtime configuration read from the environment."""

import logging
import os

from dotenv import load_dotenv

from app.utils import validate_timezone

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)

_LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


def _int_env(name: str, default: int) -> int:
    raw = os.getenv(name, str(default))
    try:
        return int(raw)
    except ValueError:
        logger.warning(f"{name}={raw!r} is not an integer, using {default}")
        return default


class Config:
    """Runtime configuration. Experiment parameters live in the YAML document (see app.experiment)."""

    LOG_LEVEL: str = os.getenv("XFER_LOG_LEVEL", "INFO").upper()
    TIMEZONE: str = os.getenv("XFER_TIMEZONE", "UTC")

    # Wall-clock fields break byte-identical reruns, so they are opt-in
    RECORD_WALL_TIME: bool = os.getenv("XFER_RECORD_WALL_TIME", "0") == "1"

    JOBS: int = _int_env("XFER_JOBS", 1)
    EVAL_BATCH: int = _int_env("XFER_EVAL_BATCH", 256)

    # Defaults
    DEFAULT_TIMEZONE: str = "UTC"
    LOG_FORMAT: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    LOG_FILENAME: str = "experiment.log"

    @classmethod
    def validate(cls) -> None:
        """Validate configuration, falling back to defaults on bad values."""
        if cls.LOG_LEVEL not in _LOG_LEVELS:
            logger.warning(f"Unknown XFER_LOG_LEVEL {cls.LOG_LEVEL!r}, falling back to INFO")
            cls.LOG_LEVEL = "INFO"

        if not validate_timezone(cls.TIMEZONE):
            logger.warning(f"Unknown XFER_TIMEZONE {cls.TIMEZONE!r}, falling back to {cls.DEFAULT_TIMEZONE}")
            cls.TIMEZONE = cls.DEFAULT_TIMEZONE

        if cls.JOBS < 1:
            logger.warning(f"XFER_JOBS must be >= 1, got {cls.JOBS}; using 1")
            cls.JOBS = 1

        if cls.EVAL_BATCH < 1:
            logger.warning(f"XFER_EVAL_BATCH must be >= 1, got {cls.EVAL_BATCH}; using 256")
            cls.EVAL_BATCH = 256


# Validate on import
Config.validate()
