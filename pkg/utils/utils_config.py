"""
utils_config.py - process-wide settings read from the environment.

Values come from the shell or a project .env file (loaded with
python-dotenv). Experiment knobs live in experiment files instead;
see harness/experiment.py.
"""

#####################################
# Import Modules
#####################################

# Import packages from Python Standard Library
import os
import pathlib

# Import external packages
from dotenv import load_dotenv

# Import functions from local modules
from utils.utils_logger import logger

#####################################
# Default Configurations
#####################################

load_dotenv()

PROJECT_ROOT = pathlib.Path(__file__).parent.parent

#####################################
# Getter Functions for .env Variables
#####################################


def get_output_root() -> pathlib.Path:
    """Fetch the folder that receives one subfolder per run."""
    root = pathlib.Path(os.getenv("SPANKEY_OUTPUT_ROOT", "runs"))
    logger.info(f"Output root: {root}")
    return root


def get_mnist_dir() -> pathlib.Path:
    """Fetch the folder holding the MNIST IDX files."""
    mnist_dir = pathlib.Path(os.getenv("SPANKEY_MNIST_DIR", str(PROJECT_ROOT.joinpath("data", "mnist"))))
    logger.info(f"MNIST folder: {mnist_dir}")
    return mnist_dir


def get_eval_workers() -> int:
    """Fetch the number of threads used for batched evaluation."""
    workers = int(os.getenv("SPANKEY_EVAL_WORKERS", 1))
    logger.info(f"Evaluation workers: {workers}")
    return workers


def get_monitor_interval() -> float:
    """Fetch how long the live monitor waits between file polls (seconds)."""
    interval = float(os.getenv("SPANKEY_MONITOR_INTERVAL_SECONDS", 0.5))
    logger.info(f"Monitor poll interval: {interval}")
    return interval


def env_overrides(prefix: str = "SPANKEY_") -> dict[str, str]:
    """Environment variables named SPANKEY_<KEY>, keyed by <KEY>."""
    return {name[len(prefix) :]: value for name, value in os.environ.items() if name.startswith(prefix)}
