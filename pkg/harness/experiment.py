"""
experiment.py - experiment files, overrides and the resolved config.

An experiment file is flat KEY=VALUE text read with python-dotenv.
Sections are key prefixes:

    DATA_*    dataset
    NET_*     network
    INJECT_*  injection plan
    KEY_*     key sampling
    DENY_*    deny objective
    OPT_*     optimizer and schedule
    RUN_*     epochs, batches, seed, output

Precedence (lowest first): built-in defaults, the file, SPANKEY_<KEY>
environment variables, --set KEY=VALUE overrides.
"""

#####################################
# Import Modules
#####################################

# Import packages from Python Standard Library
import hashlib
import json
import pathlib
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Optional

# Import external packages
from dotenv import dotenv_values

# Import functions from local modules
from spankey.deny import DenyConfig, required_head
from spankey.errors import ConfigError
from spankey.injection import InjectionPlan
from spankey.keyspace import KeySamplerConfig
from spankey.nn_core import ACTIVATIONS, HEAD_KINDS
from utils.utils_config import env_overrides
from utils.utils_logger import logger

#####################################
# Value Parsers
#####################################


def _as_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _as_int_list(text: str) -> tuple[int, ...]:
    parts = [p for p in text.replace("+", ",").split(",") if p.strip()]
    return tuple(int(p) for p in parts)


def _as_str_list(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.replace("+", ",").split(",") if p.strip())


def _as_optional_int(text: str) -> Optional[int]:
    return None if text.strip() in ("", "all", "none") else int(text)


def _as_optional_str(text: str) -> Optional[str]:
    return text.strip() or None


def _format(value: Any, sep: str = ",") -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return sep.join(str(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class Knob:
    parse: Callable[[str], Any]
    default: Any
    sep: str = ","


KNOBS: dict[str, Knob] = {
    "DATA_KIND": Knob(str, "synthetic"),
    "DATA_N": Knob(int, 4000),
    "DATA_DIM": Knob(int, 32),
    "DATA_CLASSES": Knob(int, 5),
    "DATA_SEPARATION": Knob(float, 6.0),
    "DATA_SEED": Knob(_as_optional_int, None),
    "DATA_FILE": Knob(_as_optional_str, None),
    "DATA_MNIST_DIR": Knob(_as_optional_str, None),
    "NET_HIDDEN": Knob(_as_int_list, (64, 64)),
    "NET_ACTIVATION": Knob(str, "relu"),
    "NET_HEAD": Knob(str, "plain_C"),
    "INJECT_SITES": Knob(_as_int_list, (0,), "+"),
    "INJECT_KIND": Knob(str, "add"),
    "INJECT_GAMMA": Knob(float, 1.0),
    "INJECT_POINT": Knob(str, "post"),
    "KEY_M": Knob(int, 8),
    "KEY_ALPHA_STD": Knob(float, 1.0),
    "KEY_TARGET_STD": Knob(float, 1.0),
    "KEY_PER_LAYER_ALPHA": Knob(_as_bool, True),
    "KEY_PER_LAYER_BASIS": Knob(_as_bool, False),
    "DENY_MODE": Knob(str, "none"),
    "DENY_LAMBDA": Knob(float, 0.1),
    "DENY_ON": Knob(_as_str_list, ("wrong_key",)),
    "DENY_MARGIN": Knob(float, 1.0),
    "DENY_ENTROPY_GAP": Knob(float, 0.5),
    "DENY_WARMUP_EPOCHS": Knob(int, 0),
    "OPT_LR": Knob(float, 0.1),
    "OPT_MOMENTUM": Knob(float, 0.9),
    "OPT_WEIGHT_DECAY": Knob(float, 5e-4),
    "OPT_MILESTONES": Knob(_as_int_list, (50, 75)),
    "OPT_LR_DECAY": Knob(float, 0.1),
    "RUN_EPOCHS": Knob(int, 10),
    "RUN_BATCH_SIZE": Knob(int, 128),
    "RUN_EVAL_BATCH_SIZE": Knob(int, 128),
    "RUN_EVAL_BATCHES": Knob(_as_optional_int, None),
    "RUN_SEED": Knob(_as_optional_int, None),
    "RUN_ID": Knob(_as_optional_str, None),
    "RUN_OUTPUT_DIR": Knob(_as_optional_str, None),
    "RUN_ABSORPTION_INPUTS": Knob(int, 256),
}

# keys that name where results go rather than what is computed
PROVENANCE_EXCLUDED = ("RUN_ID", "RUN_OUTPUT_DIR", "DATA_MNIST_DIR")

SWEEP_FACTORS = {"m": "KEY_M", "layers": "INJECT_SITES", "gamma": "INJECT_GAMMA"}


#####################################
# Experiment Config
#####################################


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved, typed knob values plus views as module configs."""

    values: Mapping[str, Any] = field(default_factory=dict)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values["RUN_SEED"]

    @property
    def data_seed(self) -> int:
        seed = self.values["DATA_SEED"]
        return self.seed if seed is None else seed

    @property
    def plan(self) -> InjectionPlan:
        v = self.values
        return InjectionPlan(v["INJECT_SITES"], v["INJECT_KIND"], v["INJECT_GAMMA"], v["INJECT_POINT"])

    @property
    def key_cfg(self) -> KeySamplerConfig:
        v = self.values
        return KeySamplerConfig(v["KEY_ALPHA_STD"], v["KEY_TARGET_STD"], v["KEY_PER_LAYER_ALPHA"], v["KEY_PER_LAYER_BASIS"])

    @property
    def deny(self) -> DenyConfig:
        v = self.values
        return DenyConfig(
            v["DENY_MODE"], v["DENY_LAMBDA"], v["DENY_ON"], v["DENY_MARGIN"], v["DENY_ENTROPY_GAP"], v["DENY_WARMUP_EPOCHS"]
        )

    @property
    def optim_hyper(self) -> dict[str, Any]:
        v = self.values
        return {
            "base_lr": v["OPT_LR"],
            "momentum": v["OPT_MOMENTUM"],
            "weight_decay": v["OPT_WEIGHT_DECAY"],
            "milestones": tuple(v["OPT_MILESTONES"]),
            "lr_decay": v["OPT_LR_DECAY"],
        }

    def validate(self) -> "ExperimentConfig":
        """Check every section; raises ConfigError naming the first problem."""
        v = self.values
        try:
            if v["RUN_SEED"] is None:
                raise ConfigError("RUN_SEED is required")
            if v["DATA_KIND"] not in ("synthetic", "mnist"):
                raise ConfigError(f"DATA_KIND must be synthetic or mnist, got {v['DATA_KIND']!r}")
            if not v["NET_HIDDEN"] or any(w <= 0 for w in v["NET_HIDDEN"]):
                raise ConfigError(f"NET_HIDDEN needs positive widths, got {v['NET_HIDDEN']}")
            if v["NET_ACTIVATION"] not in ACTIVATIONS:
                raise ConfigError(f"NET_ACTIVATION must be one of {ACTIVATIONS}")
            if v["NET_HEAD"] not in HEAD_KINDS:
                raise ConfigError(f"NET_HEAD must be one of {HEAD_KINDS}")
            plan = self.plan
            if not plan.sites or plan.sites[-1] >= len(v["NET_HIDDEN"]):
                raise ConfigError(f"INJECT_SITES {plan.sites} outside hidden layers 0..{len(v['NET_HIDDEN']) - 1}")
            for site in plan.sites:
                if not 1 <= v["KEY_M"] < v["NET_HIDDEN"][site]:
                    raise ConfigError(f"KEY_M={v['KEY_M']} must satisfy 1 <= m < width of site {site}")
            self.key_cfg
            deny = self.deny
            deny.validate()
            needed = required_head(deny.mode)
            if needed is not None and v["NET_HEAD"] != needed:
                raise ConfigError(f"DENY_MODE={deny.mode} needs NET_HEAD={needed}")
            if v["RUN_EPOCHS"] < 0 or v["RUN_BATCH_SIZE"] < 1 or v["RUN_EVAL_BATCH_SIZE"] < 1:
                raise ConfigError("RUN_EPOCHS must be >= 0 and batch sizes >= 1")
            if v["OPT_LR"] <= 0:
                raise ConfigError("OPT_LR must be > 0")
        except ConfigError as e:
            logger.error(f"Invalid experiment config: {e}")
            raise
        return self

    def with_values(self, **changes: Any) -> "ExperimentConfig":
        unknown = set(changes) - set(KNOBS)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return ExperimentConfig({**self.values, **changes})

    def to_text(self) -> dict[str, str]:
        """Knob values formatted as they appear in an experiment file."""
        return {key: _format(self.values[key], KNOBS[key].sep) for key in KNOBS}

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON of every result-affecting knob."""
        text = {k: s for k, s in self.to_text().items() if k not in PROVENANCE_EXCLUDED}
        canonical = json.dumps(text, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @property
    def run_id(self) -> str:
        return self.values["RUN_ID"] or f"run-{self.config_hash()[:10]}"


#####################################
# Loading
#####################################


def _parse_items(items: Mapping[str, Optional[str]], source: str) -> dict[str, Any]:
    parsed = {}
    for key, text in items.items():
        if key not in KNOBS:
            msg = f"unknown config key {key!r} in {source}"
            logger.error(msg)
            raise ConfigError(msg)
        try:
            parsed[key] = KNOBS[key].parse("" if text is None else str(text))
        except ValueError as e:
            msg = f"bad value for {key} in {source}: {e}"
            logger.error(msg)
            raise ConfigError(msg) from e
    return parsed


def parse_overrides(pairs: Iterable[str]) -> dict[str, str]:
    """Split KEY=VALUE strings from the command line."""
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override must look like KEY=VALUE, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def config_from_mapping(items: Mapping[str, Any]) -> ExperimentConfig:
    """Defaults updated by already-formatted KEY -> text pairs (checkpoints)."""
    values = {key: knob.default for key, knob in KNOBS.items()}
    values.update(_parse_items({k: _format(v) if not isinstance(v, str) else v for k, v in items.items()}, "record"))
    return ExperimentConfig(values)


def load_config(
    path: Optional[pathlib.Path] = None,
    overrides: Iterable[str] = (),
    use_env: bool = True,
) -> ExperimentConfig:
    """
    Resolve an experiment config.

    Args:
        path: experiment file (KEY=VALUE lines); None for defaults only.
        overrides: KEY=VALUE strings, highest precedence.
        use_env: read SPANKEY_<KEY> variables for known keys.

    Returns:
        The validated ExperimentConfig.
    """
    values = {key: knob.default for key, knob in KNOBS.items()}
    if path is not None:
        path = pathlib.Path(path)
        if not path.exists():
            msg = f"experiment file {path} does not exist"
            logger.error(msg)
            raise ConfigError(msg)
        values.update(_parse_items(dotenv_values(path), str(path)))
        logger.info(f"Loaded experiment file {path}")
    if use_env:
        env = {k: v for k, v in env_overrides().items() if k in KNOBS}
        if env:
            logger.info(f"Environment overrides: {sorted(env)}")
        values.update(_parse_items(env, "environment"))
    values.update(_parse_items(parse_overrides(overrides), "--set"))
    return ExperimentConfig(values).validate()


def write_config(cfg: ExperimentConfig, path: pathlib.Path) -> pathlib.Path:
    """Snapshot a config as an experiment file load_config can read back."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# config_hash={cfg.config_hash()}"]
    lines += [f"{key}={text}" for key, text in cfg.to_text().items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


#####################################
# Sweeps
#####################################


@dataclass(frozen=True)
class SweepSpec:
    """One factor varied over `values`, everything else from `anchor`."""

    factor: str
    values: tuple
    anchor: ExperimentConfig

    def __post_init__(self):
        if self.factor not in SWEEP_FACTORS:
            raise ConfigError(f"sweep factor must be one of {sorted(SWEEP_FACTORS)}, got {self.factor!r}")
        if not self.values:
            raise ConfigError("a sweep needs at least one value")

    @property
    def key(self) -> str:
        return SWEEP_FACTORS[self.factor]

    def configs(self) -> list[tuple[Any, ExperimentConfig]]:
        """(value, config) per sweep value; run ids name the varied value."""
        out = []
        for value in self.values:
            label = _format(value, "+")
            cfg = self.anchor.with_values(**{self.key: value})
            base_id = self.anchor.values["RUN_ID"] or f"sweep-{self.anchor.config_hash()[:8]}"
            cfg = cfg.with_values(RUN_ID=f"{base_id}-{self.factor}-{label}").validate()
            out.append((value, cfg))
        return out


def parse_sweep_values(factor: str, text: str) -> tuple:
    """Values separated by ';' (layer sets use '+', e.g. 0;2;0+2)."""
    if factor not in SWEEP_FACTORS:
        raise ConfigError(f"sweep factor must be one of {sorted(SWEEP_FACTORS)}, got {factor!r}")
    parse = KNOBS[SWEEP_FACTORS[factor]].parse
    try:
        return tuple(parse(part) for part in text.split(";") if part.strip())
    except ValueError as e:
        raise ConfigError(f"bad sweep values {text!r}: {e}") from e
