"""
utils_checkpoint.py - read and write checkpoint records.

A checkpoint is one JSON document. Floats are written with repr
precision by the json module, so reloading is bit-exact.
"""

#####################################
# Import Modules
#####################################

# Import packages from Python Standard Library
import json
import pathlib
from typing import Any

# Import functions from local modules
from utils.utils_logger import logger

#####################################
# Default Configurations
#####################################

CHECKPOINT_FORMAT = "spankey-checkpoint"
CHECKPOINT_VERSION = 1

#####################################
# Helper Functions
#####################################


def save_checkpoint(record: dict[str, Any], path: pathlib.Path) -> pathlib.Path:
    """Write `record` with a format header; returns the path written."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, **record}
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(document, fh)
    tmp.replace(path)
    logger.info(f"Saved checkpoint to {path}")
    return path


def load_checkpoint(path: pathlib.Path) -> dict[str, Any]:
    """Read a checkpoint written by save_checkpoint."""
    path = pathlib.Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        document = json.load(fh)
    if document.get("format") != CHECKPOINT_FORMAT:
        msg = f"{path} is not a spankey checkpoint"
        logger.error(msg)
        raise ValueError(msg)
    if document.get("version") != CHECKPOINT_VERSION:
        msg = f"unsupported checkpoint version {document.get('version')} in {path}"
        logger.error(msg)
        raise ValueError(msg)
    logger.info(f"Loaded checkpoint from {path}")
    return document
