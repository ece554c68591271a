"""
monitor_consumer_spankey.py

Read a run's metrics_live.jsonl as training writes it and keep a live chart.

Example JSON message (one per epoch):
{"timestamp": "2026-01-05 10:15:00", "run_id": "mnist-mode-b", "epoch": 3,
 "train_loss": 0.41, "test_correct_semantic": 0.95, "test_wrong_semantic": 0.01,
 "test_no_key_semantic": 0.93, "test_wrong_reject": 0.98, ...}

Run with:
    python -m consumers.monitor_consumer_spankey runs/<run_id>
"""

#####################################
# Import Modules
#####################################

# Import packages from Python Standard Library
import json
import os
import pathlib
import sys
import time
from collections import defaultdict

# IMPORTANT
# Import Matplotlib.pyplot for live plotting
import matplotlib.pyplot as plt

# Import functions from local modules
from harness.monitor import live_file
from utils.utils_config import get_monitor_interval, get_output_root
from utils.utils_logger import logger

#####################################
# Set up data structures
#####################################

PROTOCOL_SERIES = {
    "correct key": "test_correct_semantic",
    "no key": "test_no_key_semantic",
    "wrong key": "test_wrong_semantic",
}
REJECT_SERIES = "test_wrong_reject"

epochs: list[int] = []
losses: list[float] = []
series: dict[str, list[float]] = defaultdict(list)
last_run_id = None

#####################################
# Set up live visuals
#####################################
# Two subplots:
# - Top: training loss per epoch
# - Bottom: test semantic accuracy per protocol, wrong-key reject mass dashed
fig, (ax_loss, ax_acc) = plt.subplots(2, 1, figsize=(8, 6), sharex=True)
plt.ion()


#####################################
# Process Message Function
#####################################


def process_message(message: str | bytes) -> bool:
    """Store one epoch record; returns True when the chart needs a redraw."""
    global last_run_id
    try:
        if isinstance(message, bytes):
            message = message.decode("utf-8")
        record = json.loads(message)
        if not isinstance(record, dict):
            logger.error(f"Expected dict, got {type(record)}")
            return False
        epochs.append(int(record["epoch"]))
        losses.append(float(record.get("train_loss", float("nan"))))
        for label, key in PROTOCOL_SERIES.items():
            series[label].append(float(record.get(key, float("nan"))))
        series["wrong-key reject"].append(float(record.get(REJECT_SERIES, float("nan"))))
        last_run_id = record.get("run_id", last_run_id)
        return True
    except (ValueError, KeyError) as e:
        logger.error(f"Error processing message: {e}")
        return False


#####################################
# Update Chart
#####################################


def update_chart() -> None:
    # --- Top subplot: training loss ---
    ax_loss.clear()
    ax_loss.plot(epochs, losses, marker="o", color="black")
    ax_loss.set_ylabel("Train loss")
    ax_loss.set_title(f"Live training: {last_run_id or 'run'}")

    # --- Bottom subplot: protocols ---
    ax_acc.clear()
    for label in PROTOCOL_SERIES:
        ax_acc.plot(epochs, series[label], marker="o", label=label)
    ax_acc.plot(epochs, series["wrong-key reject"], linestyle="--", color="red", label="wrong-key reject")
    ax_acc.set_xlabel("Epoch")
    ax_acc.set_ylabel("Test fraction")
    ax_acc.set_ylim(0, 1.02)
    ax_acc.legend(loc="lower right")

    plt.tight_layout()
    plt.draw()
    plt.pause(0.01)


#####################################
# Main Function
#####################################


def resolve_live_file(argv: list[str]) -> pathlib.Path:
    """Run directory from the command line, else the newest run under the output root."""
    if len(argv) > 1:
        return live_file(pathlib.Path(argv[1]))
    candidates = sorted(get_output_root().glob("*/metrics_live.jsonl"), key=lambda p: p.stat().st_mtime)
    if not candidates:
        return live_file(get_output_root().joinpath("missing"))
    return candidates[-1]


def main() -> None:
    """
    Main entry point for the consumer.
    - Reads records already written, then follows the file for new epochs.
    """
    logger.info("START monitor consumer.")
    data_file = resolve_live_file(sys.argv)

    if not data_file.exists():
        logger.error(f"Live file {data_file} does not exist. Start a training run first.")
        sys.exit(1)

    delay_secs = get_monitor_interval()
    try:
        with open(data_file, "r", encoding="utf-8") as file:
            for line in file:
                if line.strip():
                    process_message(line)
            if epochs:
                update_chart()
            logger.info(f"Following {data_file} for new epochs...")

            while True:
                line = file.readline()
                if line.strip():
                    if process_message(line):
                        update_chart()
                else:
                    logger.debug("No new epochs. Waiting...")
                    time.sleep(delay_secs)
                    file.seek(0, os.SEEK_CUR)

    except KeyboardInterrupt:
        logger.info("Monitor interrupted by user.")
    except Exception as e:
        logger.error(f"Unexpected error: {e}")
    finally:
        plt.ioff()
        plt.show()
        logger.info("Monitor closed.")


#####################################
# Conditional Execution
#####################################

if __name__ == "__main__":
    main()
