"""
Centralized Configuration for rmflow-lab

Loads environment variables and provides directory and logging settings.
Run-level hyperparameters live in JSON run configs (see src/cli/schema.py).
"""

import os
import sys
from pathlib import Path

import torch
from dotenv import load_dotenv
from loguru import logger

from src.errors import ConfigurationError

# Load environment variables
load_dotenv()

# Base directories
BASE_DIR = Path(__file__).resolve().parent.parent
DATA_DIR = Path(os.getenv("RMFLOW_DATA_DIR", str(BASE_DIR / "data")))
RUNS_DIR = Path(os.getenv("RMFLOW_RUNS_DIR", str(BASE_DIR / "runs")))
LOG_DIR = Path(os.getenv("RMFLOW_LOG_DIR", str(BASE_DIR / "logs")))

# Numerics
# One intra-op thread keeps reductions in a fixed order, so seeded runs are bit-reproducible.
NUM_THREADS = int(os.getenv("RMFLOW_NUM_THREADS", "1"))
RUN_SLOW_TESTS = os.getenv("RMFLOW_RUN_SLOW", "0") == "1"

# Logging Configuration
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
LOG_FILE = os.getenv("LOG_FILE", str(LOG_DIR / "rmflow.log"))


def setup_logging(level: str = None, log_file: str = None):
    """Configure logging with loguru"""
    level = level or LOG_LEVEL
    log_file = log_file or LOG_FILE

    # Remove default logger
    logger.remove()

    # Add console logger with colors
    logger.add(
        sys.stderr,
        format="<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | <cyan>{name}</cyan>:<cyan>{function}</cyan> - <level>{message}</level>",
        level=level,
        colorize=True
    )

    # Add file logger
    Path(log_file).parent.mkdir(parents=True, exist_ok=True)
    logger.add(
        log_file,
        format="{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {name}:{function} - {message}",
        level=level,
        rotation="10 MB",
        retention="7 days",
        compression="zip"
    )

    logger.info("✅ Logging configured")


def configure_torch():
    """Pin torch to float64 CPU numerics with a fixed thread count"""
    torch.set_default_dtype(torch.float64)
    torch.set_num_threads(NUM_THREADS)


def validate_config():
    """Validate environment-level configuration"""
    errors = []

    if NUM_THREADS < 1:
        errors.append(f"RMFLOW_NUM_THREADS must be >= 1, got {NUM_THREADS}")

    for name, directory in (("RMFLOW_DATA_DIR", DATA_DIR), ("RMFLOW_RUNS_DIR", RUNS_DIR)):
        try:
            directory.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            errors.append(f"{name} ({directory}) is not writable: {e}")

    if NUM_THREADS > 1:
        logger.warning("⚠️ RMFLOW_NUM_THREADS > 1 - runs may not be bit-reproducible")

    if errors:
        logger.error("❌ Configuration errors:")
        for error in errors:
            logger.error(f"  - {error}")
        raise ConfigurationError("; ".join(errors))

    logger.success("✅ Configuration validated")


def print_config():
    """Print configuration summary"""
    logger.info("📋 rmflow-lab Configuration:")
    logger.info(f"  Data Directory: {DATA_DIR}")
    logger.info(f"  Runs Directory: {RUNS_DIR}")
    logger.info(f"  Torch threads: {NUM_THREADS}")
    logger.info(f"  Log File: {LOG_FILE}")
