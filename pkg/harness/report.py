"""
report.py - CSV and JSON result files.

All tables go through pandas with a fixed float format, so the same run
always writes the same bytes.
"""

#####################################
# Import Modules
#####################################

# Import packages from Python Standard Library
import json
import pathlib
from dataclasses import asdict, is_dataclass
from typing import Any, Iterable, Optional, Sequence

# Import external packages
import pandas as pd

# Import functions from local modules
from utils.utils_logger import logger

#####################################
# Default Configurations
#####################################

FLOAT_FORMAT = "%.6f"
FLOAT_DECIMALS = 6

REPORT_COLUMNS = [
    "run_id",
    "split",
    "protocol",
    "top1",
    "semantic_acc",
    "reject_mass",
    "mean_entropy",
    "aux_reject_mean",
    "n",
    "seed",
    "config_hash",
]

#####################################
# Helper Functions
#####################################


def _as_row(item: Any) -> dict:
    if is_dataclass(item):
        return asdict(item)
    return dict(item)


def _round_value(value: Any) -> Any:
    if isinstance(value, float):
        return round(value, FLOAT_DECIMALS)
    return value


def write_table(frame: pd.DataFrame, path: pathlib.Path, columns: Optional[Sequence[str]] = None) -> pathlib.Path:
    """Write a DataFrame as CSV with six-decimal floats."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if columns is not None:
        frame = frame.reindex(columns=list(columns))
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path


def write_json(document: dict, path: pathlib.Path) -> pathlib.Path:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(document, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


#####################################
# Reports
#####################################


def report_frame(results: Iterable[Any], config_hash: str = "", columns: Sequence[str] = REPORT_COLUMNS) -> pd.DataFrame:
    """Rows from EvalReports (or dicts) in the stable column order."""
    rows = [_as_row(r) for r in results]
    for row in rows:
        row.setdefault("config_hash", config_hash)
        if not row["config_hash"]:
            row["config_hash"] = config_hash
    return pd.DataFrame(rows).reindex(columns=list(columns))


def emit_report(
    results: Iterable[Any],
    path: pathlib.Path,
    config_hash: str = "",
    columns: Sequence[str] = REPORT_COLUMNS,
    notes: Optional[Sequence[str]] = None,
) -> tuple[pathlib.Path, pathlib.Path]:
    """
    Write results to <path>.csv and <path>.json.

    The JSON holds the config hash, the column list, the rows (floats
    rounded to six decimals) and any notes. An empty result set gives a
    header-only CSV.
    """
    path = pathlib.Path(path)
    frame = report_frame(results, config_hash, columns)
    csv_path = write_table(frame, path.with_suffix(".csv"))
    rows = [{k: _round_value(v) for k, v in row.items()} for row in frame.astype(object).where(frame.notna(), None).to_dict("records")]
    document = {"config_hash": config_hash, "columns": list(columns), "rows": rows, "notes": list(notes or [])}
    json_path = write_json(document, path.with_suffix(".json"))
    return csv_path, json_path


def read_report(path: pathlib.Path) -> pd.DataFrame:
    """Read a CSV written by emit_report."""
    return pd.read_csv(
        pathlib.Path(path).with_suffix(".csv"),
        dtype={"run_id": str, "split": str, "protocol": str, "config_hash": str},
    )
