"""Experiment configuration: per-dataset defaults, file loading, validation."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from fedrkg.model import HyperParams
from fedrkg.privacy import PrivacyConfig

DATA_DIR_ENV = "FEDRKG_DATA_DIR"

REGIMES = ("full_replacement", "local_only", "knowledge_guidance", "adaptive_guidance")
SWEEP_AXES = ("regime", "T_int", "beta", "eta_gate", "eta")

# name -> (raw format, default file name under the data dir, user threshold, beta, rounds)
DATASETS = {
    "amazon-video": ("amazon-video", "ratings_Amazon_Instant_Video.csv", 10, 0.99, 1000),
    "filmtrust": ("filmtrust", "ratings.txt", 10, 0.99, 1000),
    "lastfm-2k": ("lastfm-2k", "user_taggedartists-timestamps.dat", 10, 0.999, 3000),
    "ml-1m": ("ml-1m", "ratings.dat", 20, 0.99, 1000),
    "synthetic": ("synthetic", "", 10, 0.99, 1000),
}


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


@dataclass
class DatasetSpec:
    name: str = "amazon-video"
    path: str | None = None
    format: str | None = None
    min_interactions: int | None = None
    # synthetic generator knobs, ignored for real datasets
    synthetic_users: int = 200
    synthetic_items: int = 500
    synthetic_mean_interactions: int = 25

    def resolved_path(self) -> Path | None:
        if self.name == "synthetic" and self.path is None:
            return None
        if self.path:
            p = Path(self.path)
            if p.is_dir() and self.name in DATASETS:
                return p / DATASETS[self.name][1]
            return p
        base = Path(os.environ.get(DATA_DIR_ENV, "data"))
        if self.name in DATASETS:
            return base / self.name / DATASETS[self.name][1]
        return base / self.name


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    hp: HyperParams = field(default_factory=HyperParams)
    regime: str = "adaptive_guidance"
    privacy: PrivacyConfig = field(default_factory=PrivacyConfig)
    eval_interval: int = 10
    eval_ks: list[int] = field(default_factory=lambda: [5, 10])
    patience: int = 100
    probe_guidance: bool = True
    snapshot_interval: int = 0
    output_dir: str = "runs"
    run_id: str | None = None
    seed: int = 42
    workers: int = 1
    dtype: str = "float64"
    analysis: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        problems: list[str] = []
        cfg = _build(cls, data, "", problems)
        if problems:
            raise ConfigError(problems)
        return cfg

    def problems(self, check_paths: bool = True) -> list[str]:
        out = []
        if self.dataset.name not in DATASETS and not self.dataset.format:
            out.append(f"dataset.name {self.dataset.name!r} is not bundled; set dataset.format and dataset.path")
        if self.dataset.min_interactions is not None and self.dataset.min_interactions < 3:
            out.append(f"dataset.min_interactions must be >= 3, got {self.dataset.min_interactions}")
        if check_paths:
            path = self.dataset.resolved_path()
            if path is not None and not path.exists():
                out.append(f"dataset file not found: {path} (set --data-path or ${DATA_DIR_ENV})")
        out += [f"hp.{p}" for p in self.hp.problems()]
        if self.regime not in REGIMES:
            out.append(f"regime must be one of {REGIMES}, got {self.regime!r}")
        out += self.privacy.problems()
        if self.eval_interval < 1:
            out.append(f"eval_interval must be >= 1, got {self.eval_interval}")
        if not self.eval_ks or any(k < 1 for k in self.eval_ks):
            out.append(f"eval_ks must be a nonempty list of positive integers, got {self.eval_ks}")
        if self.patience < 1:
            out.append(f"patience must be >= 1, got {self.patience}")
        if self.snapshot_interval < 0:
            out.append(f"snapshot_interval must be >= 0, got {self.snapshot_interval}")
        if self.workers < 1:
            out.append(f"workers must be >= 1, got {self.workers}")
        if self.dtype not in ("float64", "float32"):
            out.append(f"dtype must be float64 or float32, got {self.dtype!r}")
        return out

    def validate(self, check_paths: bool = True) -> "ExperimentConfig":
        problems = self.problems(check_paths)
        if problems:
            raise ConfigError(problems)
        return self


def _build(cls, data: dict, prefix: str, problems: list[str]):
    if not isinstance(data, dict):
        problems.append(f"{prefix.rstrip('.') or 'config'} must be a mapping")
        return cls()
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            problems.append(f"unknown key {prefix}{key}")
            continue
        sub = _NESTED.get((cls.__name__, key))
        if sub:
            kwargs[key] = _build(sub, value, f"{prefix}{key}.", problems)
        else:
            try:
                kwargs[key] = _coerce(known[key].type, value)
            except (TypeError, ValueError):
                problems.append(f"{prefix}{key}: cannot read {value!r} as {known[key].type}")
    return cls(**kwargs)


_SCALARS = {"int": int, "float": float, "str": str}


def _coerce(type_name: str, value):
    optional = type_name.endswith("| None")
    base = type_name.replace("| None", "").strip()
    if value is None:
        if optional:
            return None
        raise ValueError("null not allowed")
    if base == "bool":
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ValueError(value)
    if base == "list[int]":
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        return [int(v) for v in value]
    if base in _SCALARS:
        if isinstance(value, bool):
            raise TypeError(value)
        if base == "int" and isinstance(value, float) and not value.is_integer():
            raise ValueError(value)
        return _SCALARS[base](value)
    return value


_NESTED = {
    ("ExperimentConfig", "dataset"): DatasetSpec,
    ("ExperimentConfig", "hp"): HyperParams,
    ("ExperimentConfig", "privacy"): PrivacyConfig,
}


def dataset_defaults(name: str) -> dict:
    """Per-dataset hyperparameters that differ from the global defaults."""
    if name not in DATASETS:
        return {}
    fmt, _file, threshold, beta, rounds = DATASETS[name]
    return {"format": fmt, "min_interactions": threshold, "beta": beta, "T": rounds}


def load_config_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"config file not found: {path}"])
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: not valid JSON ({exc})"]) from None


# flag name -> dotted config key
FLAG_KEYS = {
    "dataset": "dataset.name",
    "data_path": "dataset.path",
    "format": "dataset.format",
    "min_interactions": "dataset.min_interactions",
    "regime": "regime",
    "seed": "seed",
    "rounds": "hp.T",
    "t_int": "hp.T_int",
    "beta": "hp.beta",
    "eta": "hp.eta",
    "eta_gate": "hp.eta_gate",
    "epochs": "hp.E",
    "e_gate": "hp.E_gate",
    "dim": "hp.d",
    "clients_per_round": "hp.n_s",
    "batch_size": "hp.batch_size",
    "negative_pool": "hp.negative_pool",
    "privacy": "privacy.enabled",
    "clip": "privacy.clip",
    "sigma": "privacy.sigma",
    "eval_interval": "eval_interval",
    "eval_ks": "eval_ks",
    "patience": "patience",
    "output_dir": "output_dir",
    "run_id": "run_id",
    "workers": "workers",
    "snapshot_interval": "snapshot_interval",
    "dtype": "dtype",
    "analysis": "analysis",
}


def _set(tree: dict, dotted: str, value) -> None:
    *parents, leaf = dotted.split(".")
    node = tree
    for p in parents:
        node = node.setdefault(p, {})
    node[leaf] = value


def _get(tree: dict, dotted: str):
    node = tree
    for p in dotted.split("."):
        if not isinstance(node, dict) or p not in node:
            return None
        node = node[p]
    return node


def parse_config(
    overrides: dict | None = None, config_file: str | Path | None = None, check_paths: bool = True
) -> ExperimentConfig:
    """Merge dataset defaults, an optional JSON file and flag overrides.

    ``overrides`` maps flag names (see ``FLAG_KEYS``) or dotted keys to values;
    ``None`` values are ignored. Precedence: flags > file > dataset defaults.
    """
    tree: dict = load_config_file(config_file) if config_file else {}
    flat = {}
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        flat[FLAG_KEYS.get(key, key)] = value
    for dotted, value in flat.items():
        _set(tree, dotted, value)

    name = _get(tree, "dataset.name") or DatasetSpec.name
    defaults = dataset_defaults(name)
    for key, dotted in (
        ("format", "dataset.format"),
        ("min_interactions", "dataset.min_interactions"),
        ("beta", "hp.beta"),
        ("T", "hp.T"),
    ):
        if key in defaults and _get(tree, dotted) is None:
            _set(tree, dotted, defaults[key])
    cfg = ExperimentConfig.from_dict(tree)
    return cfg.validate(check_paths)
