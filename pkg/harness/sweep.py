"""
sweep.py - single-factor ablations around an anchor config.

Each sweep value is an independent run (own run id, own seeds derived
from the anchor's RUN_SEED), so row order never changes a row.
"""

#####################################
# Import Modules
#####################################

# Import packages from Python Standard Library
import pathlib
from typing import Optional

# Import external packages
import pandas as pd

# Import functions from local modules
from harness.experiment import SweepSpec
from harness.report import write_table
from harness.training import run_training
from utils.utils_config import get_output_root
from utils.utils_logger import logger

#####################################
# Default Configurations
#####################################

SWEEP_COLUMNS = [
    "factor",
    "value",
    "run_id",
    "correct_semantic",
    "no_key_semantic",
    "wrong_semantic",
    "wrong_reject",
    "config_hash",
]

# values of the three canonical single-factor sweeps
DEFAULT_SWEEP_VALUES = {
    "m": (4, 8, 16, 32),
    "layers": ((0,), (1,), (2,), (0, 1), (0, 2), (0, 1, 2)),
    "gamma": (0.25, 0.5, 1.0, 2.0),
}

#####################################
# Sweep
#####################################


def format_value(value) -> str:
    if isinstance(value, tuple):
        return "+".join(str(v) for v in value)
    return str(value)


def run_sweep(spec: SweepSpec, output_root: Optional[pathlib.Path] = None) -> pd.DataFrame:
    """
    Train once per sweep value and collect test-split metrics.

    Returns:
        One row per value: correct-key and no-key semantic accuracy,
        wrong-key semantic accuracy and wrong-key reject mass.
    """
    root = pathlib.Path(output_root) if output_root is not None else get_output_root()
    logger.info(f"START sweep over {spec.factor} = {[format_value(v) for v in spec.values]}")
    rows = []
    for value, cfg in spec.configs():
        result = run_training(cfg, root)
        rows.append(
            {
                "factor": spec.factor,
                "value": format_value(value),
                "run_id": cfg.run_id,
                "correct_semantic": result.report("test", "correct").semantic_acc,
                "no_key_semantic": result.report("test", "no_key").semantic_acc,
                "wrong_semantic": result.report("test", "wrong").semantic_acc,
                "wrong_reject": result.report("test", "wrong").reject_mass,
                "config_hash": cfg.config_hash(),
            }
        )
    table = pd.DataFrame(rows, columns=SWEEP_COLUMNS)
    write_table(table, root.joinpath(f"sweep_{spec.factor}.csv"))
    logger.info(f"EXIT sweep over {spec.factor}: {len(table)} rows")
    return table
