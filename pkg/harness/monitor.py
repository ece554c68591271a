"""
monitor.py - the producer side of the live training view.

Each finished epoch is appended as one JSON line to
<output>/<run_id>/metrics_live.jsonl. consumers/monitor_consumer_spankey.py
tails that file and redraws its charts.
"""

#####################################
# Import Modules
#####################################

# Import packages from Python Standard Library
import json
import pathlib
from datetime import datetime
from typing import Any, Mapping

# Import external packages
import pandas as pd

# Import functions from local modules
from utils.utils_logger import logger

#####################################
# Default Configurations
#####################################

LIVE_FILE_NAME = "metrics_live.jsonl"

#####################################
# Helper Functions
#####################################


def live_file(run_dir: pathlib.Path) -> pathlib.Path:
    return pathlib.Path(run_dir).joinpath(LIVE_FILE_NAME)


def reset_stream(path: pathlib.Path) -> None:
    """Start an empty live file (a rerun replaces the old stream)."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("", encoding="utf-8")


def stream_epoch(record: Mapping[str, Any], path: pathlib.Path) -> None:
    """Append one epoch record as a JSON line and flush it."""
    message = {"timestamp": datetime.now().strftime("%Y-%m-%d %H:%M:%S"), **record}
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(message) + "\n")
        fh.flush()
    logger.debug(f"Streamed epoch {record.get('epoch')} to {path}")


def read_stream(path: pathlib.Path) -> pd.DataFrame:
    """Every record written so far, one row per epoch."""
    path = pathlib.Path(path)
    if not path.exists():
        return pd.DataFrame()
    rows = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    return pd.DataFrame(rows)
