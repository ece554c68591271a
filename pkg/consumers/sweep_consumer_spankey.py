"""
sweep_consumer_spankey.py

Draw the single-factor sweep figure from sweep_<factor>.csv files.

One row of panels per factor found:
    correct-key semantic | no-key semantic | wrong-key reject

Run with:
    python -m consumers.sweep_consumer_spankey runs
"""

#####################################
# Import Modules
#####################################

# Import packages from Python Standard Library
import pathlib
import sys

# Import external packages
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd
import seaborn as sns

# Import functions from local modules
from utils.utils_config import get_output_root
from utils.utils_logger import logger

#####################################
# Default Configurations
#####################################

PANELS = [
    ("correct_semantic", "Correct-key semantic"),
    ("no_key_semantic", "No-key semantic"),
    ("wrong_reject", "Wrong-key reject"),
]

#####################################
# Helper Functions
#####################################


def load_sweeps(folder: pathlib.Path) -> pd.DataFrame:
    """Concatenate every sweep_<factor>.csv in a folder."""
    files = sorted(pathlib.Path(folder).glob("sweep_*.csv"))
    if not files:
        return pd.DataFrame()
    return pd.concat([pd.read_csv(f, dtype={"value": str}) for f in files], ignore_index=True)


def plot_sweep(table: pd.DataFrame, path: pathlib.Path) -> pathlib.Path:
    """Bar panels per factor and metric, written as PNG."""
    factors = list(dict.fromkeys(table["factor"]))
    sns.set_theme(style="whitegrid")
    fig, axes = plt.subplots(len(factors), len(PANELS), figsize=(4 * len(PANELS), 3 * len(factors)), squeeze=False)
    for row, factor in enumerate(factors):
        part = table[table["factor"] == factor].astype({"value": str})
        for col, (metric, title) in enumerate(PANELS):
            ax = axes[row][col]
            sns.barplot(data=part, x="value", y=metric, ax=ax, color=sns.color_palette()[col])
            ax.set_ylim(0, 1.05)
            ax.set_xlabel(factor)
            ax.set_ylabel("")
            ax.set_title(title)
    fig.tight_layout()
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.info(f"Wrote sweep figure to {path}")
    return path


#####################################
# Main Function
#####################################


def main() -> None:
    logger.info("START sweep consumer.")
    folder = pathlib.Path(sys.argv[1]) if len(sys.argv) > 1 else get_output_root()
    table = load_sweeps(folder)
    if table.empty:
        logger.error(f"No sweep_*.csv files in {folder}. Run a sweep first.")
        sys.exit(1)
    plot_sweep(table, folder.joinpath("sweeps.png"))
    logger.info("Sweep consumer closed.")


#####################################
# Conditional Execution
#####################################

if __name__ == "__main__":
    main()
