"""
training.py - one training run from an ExperimentConfig.

Per run, under <output>/<run_id>/:
    config.env          resolved config snapshot
    metrics_live.jsonl  one JSON line per epoch (live monitor input)
    epochs.csv          per-epoch loss and three-protocol metrics
    final_eval.csv/json final EvalReports on train and test
    absorption.csv      sigma summaries at init and after training
    checkpoint.json     network, optimizer, RNG, config, key space, metrics
"""

#####################################
# Import Modules
#####################################

# Import packages from Python Standard Library
import pathlib
from dataclasses import dataclass, field
from typing import Optional

# Import external packages
import numpy as np
import pandas as pd

# Import functions from local modules
from harness.experiment import ExperimentConfig, config_from_mapping, write_config
from harness.monitor import live_file, reset_stream, stream_epoch
from harness.report import emit_report, write_table
from spankey.data import Dataset, gen_synthetic, load_mnist, load_synthetic
from spankey.deny import PROTOCOLS, EvalReport, evaluate, total_loss
from spankey.errors import ConfigError, TrainingDivergedError
from spankey.keyspace import KeySpace, build_keyspace
from spankey.nn_core import Network, OptimState, build_layer_dims, init_network, lr_at, sgd_step
from spankey.theory_lab import absorption_report
from utils.utils_checkpoint import load_checkpoint, save_checkpoint
from utils.utils_config import get_eval_workers, get_mnist_dir, get_output_root
from utils.utils_logger import logger

#####################################
# Default Configurations
#####################################

# named random streams derived from RUN_SEED
STREAM_INIT = 1
STREAM_BASIS = 2
STREAM_TRAIN = 3
STREAM_EVAL = 4
STREAM_ABSORPTION = 5
STREAM_ATTACK = 6

SPLITS = ("train", "test")


def derive_seed(seed: int, *stream: int) -> int:
    """A 32-bit seed for one named stream of a run."""
    return int(np.random.SeedSequence([int(seed), *stream]).generate_state(1)[0])


def eval_seed(seed: int, split: str, protocol: str) -> int:
    return derive_seed(seed, STREAM_EVAL, SPLITS.index(split), PROTOCOLS.index(protocol))


#####################################
# Building Blocks
#####################################


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Train and test splits named by the DATA_* keys."""
    if cfg["DATA_KIND"] == "mnist":
        directory = pathlib.Path(cfg["DATA_MNIST_DIR"]) if cfg["DATA_MNIST_DIR"] else get_mnist_dir()
        return load_mnist(directory)
    if cfg["DATA_FILE"]:
        return load_synthetic(pathlib.Path(cfg["DATA_FILE"]))
    return gen_synthetic(cfg["DATA_N"], cfg["DATA_DIM"], cfg["DATA_CLASSES"], cfg["DATA_SEPARATION"], cfg.data_seed)


def build_model(cfg: ExperimentConfig, input_dim: int, num_classes: int) -> tuple[Network, KeySpace]:
    """Seeded network initialization and the key space for its sites."""
    dims = build_layer_dims(input_dim, list(cfg["NET_HIDDEN"]), num_classes, cfg["NET_HEAD"])
    net = init_network(dims, cfg["NET_ACTIVATION"], cfg["NET_HEAD"], derive_seed(cfg.seed, STREAM_INIT))
    widths = {site: net.site_width(site) for site in cfg.plan.sites}
    keyspace = build_keyspace(widths, cfg["KEY_M"], derive_seed(cfg.seed, STREAM_BASIS), cfg.key_cfg)
    return net, keyspace


def evaluate_all(
    net: Network,
    keyspace: KeySpace,
    cfg: ExperimentConfig,
    datasets: dict[str, Dataset],
    workers: int = 1,
) -> list[EvalReport]:
    """Three protocols on every split, with seeds fixed per (split, protocol)."""
    reports = []
    for split, data in datasets.items():
        for protocol in PROTOCOLS:
            report = evaluate(
                net,
                cfg.plan,
                keyspace,
                data,
                protocol,
                eval_seed(cfg.seed, split, protocol),
                batch_size=cfg["RUN_EVAL_BATCH_SIZE"],
                max_batches=cfg["RUN_EVAL_BATCHES"],
                workers=workers,
            )
            report.run_id = cfg.run_id
            report.seed = cfg.seed
            report.split = split
            reports.append(report)
    return reports


def _metric_columns(reports: list[EvalReport]) -> dict[str, float]:
    row = {}
    for r in reports:
        prefix = f"{r.split}_{r.protocol}"
        row[f"{prefix}_semantic"] = r.semantic_acc
        row[f"{prefix}_top1"] = r.top1
        row[f"{prefix}_reject"] = r.reject_mass
    return row


#####################################
# Training
#####################################


@dataclass
class TrainingResult:
    cfg: ExperimentConfig
    net: Network
    opt: OptimState
    keyspace: KeySpace
    epochs: pd.DataFrame
    final: list[EvalReport]
    absorption: pd.DataFrame
    run_dir: pathlib.Path
    paths: dict[str, pathlib.Path] = field(default_factory=dict)

    def report(self, split: str, protocol: str) -> EvalReport:
        for r in self.final:
            if r.split == split and r.protocol == protocol:
                return r
        raise KeyError((split, protocol))


def train_epoch(
    net: Network,
    opt: OptimState,
    keyspace: KeySpace,
    cfg: ExperimentConfig,
    train: Dataset,
    epoch: int,
    rng: np.random.Generator,
) -> dict[str, float]:
    """One pass over a fresh permutation of the training split."""
    opt.epoch = epoch
    plan, deny = cfg.plan, cfg.deny
    order = rng.permutation(len(train))
    batch_size = cfg["RUN_BATCH_SIZE"]
    totals = {"loss": 0.0, "ce": 0.0, "deny": 0.0}
    steps = 0
    weight = 0.0
    for step, start in enumerate(range(0, len(order), batch_size)):
        idx = order[start : start + batch_size]
        batch = (train.inputs[idx], train.labels[idx])
        # Fresh correct and wrong keys are drawn inside total_loss
        breakdown, grads = total_loss(batch, net, plan, keyspace, deny, epoch, rng)
        if not np.isfinite(breakdown.total):
            err = TrainingDivergedError(epoch, step, breakdown.total)
            logger.error(str(err))
            raise err
        sgd_step(net, grads, opt)

        # Running sums for the epoch averages
        totals["loss"] += breakdown.total
        totals["ce"] += breakdown.ce
        totals["deny"] += breakdown.deny
        weight = breakdown.deny_weight
        steps += 1
    return {
        "train_loss": totals["loss"] / max(steps, 1),
        "train_ce": totals["ce"] / max(steps, 1),
        "train_deny": totals["deny"] / max(steps, 1),
        "deny_weight": weight,
    }


def run_training(cfg: ExperimentConfig, output_root: Optional[pathlib.Path] = None) -> TrainingResult:
    """
    Train, evaluate every epoch, and write the run's artefacts.

    Zero epochs saves the initialization as the checkpoint. A non-finite
    loss raises TrainingDivergedError with the epoch and step.
    """
    cfg.validate()
    root = pathlib.Path(output_root) if output_root is not None else (
        pathlib.Path(cfg["RUN_OUTPUT_DIR"]) if cfg["RUN_OUTPUT_DIR"] else get_output_root()
    )
    run_dir = root.joinpath(cfg.run_id)
    run_dir.mkdir(parents=True, exist_ok=True)
    paths = {"config": write_config(cfg, run_dir.joinpath("config.env"))}
    logger.info(f"START run {cfg.run_id} (config_hash={cfg.config_hash()[:12]})")

    # Data, model, optimizer and the training key stream
    train, test = load_datasets(cfg)
    datasets = {"train": train, "test": test}
    net, keyspace = build_model(cfg, train.dim, train.C)
    opt = OptimState.for_network(net, **cfg.optim_hyper)
    rng = np.random.default_rng(derive_seed(cfg.seed, STREAM_TRAIN))
    workers = get_eval_workers()

    # Sigma at init; the same seed is reused after training
    absorption_seed = derive_seed(cfg.seed, STREAM_ABSORPTION)
    sigma_init = absorption_report(net, cfg.plan, keyspace, test, cfg["RUN_ABSORPTION_INPUTS"], absorption_seed)

    # Start a fresh live stream for the monitor consumer
    paths["live"] = live_file(run_dir)
    reset_stream(paths["live"])
    rows = []
    for epoch in range(cfg["RUN_EPOCHS"]):
        losses = train_epoch(net, opt, keyspace, cfg, train, epoch, rng)
        reports = evaluate_all(net, keyspace, cfg, datasets, workers)
        row = {"epoch": epoch + 1, "lr": lr_at(opt, epoch), **losses, **_metric_columns(reports)}
        rows.append(row)
        # Send the epoch record to the live monitor
        stream_epoch({"run_id": cfg.run_id, **row}, paths["live"])
        logger.info(
            f"epoch {epoch + 1}/{cfg['RUN_EPOCHS']} loss={losses['train_loss']:.4f} "
            f"test correct={row['test_correct_semantic']:.4f} wrong={row['test_wrong_semantic']:.4f} "
            f"no_key={row['test_no_key_semantic']:.4f} wrong_reject={row['test_wrong_reject']:.4f}"
        )
    if cfg["RUN_EPOCHS"] > 0:
        opt.epoch = cfg["RUN_EPOCHS"]

    # Final evaluation and artefacts
    final = evaluate_all(net, keyspace, cfg, datasets, workers)
    sigma_final = absorption_report(net, cfg.plan, keyspace, test, cfg["RUN_ABSORPTION_INPUTS"], absorption_seed)
    absorption = pd.concat([sigma_init.assign(stage="init"), sigma_final.assign(stage="final")], ignore_index=True)

    epochs_frame = pd.DataFrame(rows)
    paths["epochs"] = write_table(epochs_frame, run_dir.joinpath("epochs.csv"))
    paths["final_eval"], _ = emit_report(final, run_dir.joinpath("final_eval"), cfg.config_hash())
    paths["absorption"] = write_table(absorption, run_dir.joinpath("absorption.csv"))
    paths["checkpoint"] = save_checkpoint(
        {
            "config": cfg.to_text(),
            "config_hash": cfg.config_hash(),
            "network": net.to_record(),
            "optimizer": opt.to_record(),
            "rng": rng.bit_generator.state,
            "keyspace": keyspace.to_record(),
            "metrics": [r.to_row() for r in final],
        },
        run_dir.joinpath("checkpoint.json"),
    )
    logger.info(f"EXIT run {cfg.run_id}: artefacts in {run_dir}")
    return TrainingResult(cfg, net, opt, keyspace, epochs_frame, final, absorption, run_dir, paths)


#####################################
# Checkpoints
#####################################


@dataclass
class LoadedRun:
    cfg: ExperimentConfig
    net: Network
    opt: OptimState
    keyspace: KeySpace
    metrics: list[dict]
    config_hash: str


def load_run(checkpoint_path: pathlib.Path) -> LoadedRun:
    """Rebuild a run from checkpoint.json."""
    record = load_checkpoint(checkpoint_path)
    cfg = config_from_mapping(record["config"])
    if cfg.config_hash() != record["config_hash"]:
        msg = f"config hash mismatch in {checkpoint_path}"
        logger.error(msg)
        raise ConfigError(msg)
    return LoadedRun(
        cfg,
        Network.from_record(record["network"]),
        OptimState.from_record(record["optimizer"]),
        KeySpace.from_record(record["keyspace"]),
        record["metrics"],
        record["config_hash"],
    )


def run_eval(checkpoint_path: pathlib.Path, output_path: Optional[pathlib.Path] = None) -> list[EvalReport]:
    """
    Re-evaluate a checkpoint with its stored seeds. Logs a warning if the
    metrics differ from the ones saved at the end of training.
    """
    run = load_run(checkpoint_path)
    train, test = load_datasets(run.cfg)
    reports = evaluate_all(run.net, run.keyspace, run.cfg, {"train": train, "test": test}, get_eval_workers())
    saved = {(m["split"], m["protocol"]): m for m in run.metrics}
    for r in reports:
        stored = saved.get((r.split, r.protocol))
        if stored is None or stored["semantic_acc"] != r.semantic_acc or stored["reject_mass"] != r.reject_mass:
            logger.warning(f"re-evaluation of {r.split}/{r.protocol} differs from the saved metrics")
    if output_path is not None:
        emit_report(reports, output_path, run.config_hash)
    return reports
