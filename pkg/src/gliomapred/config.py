"""Run configuration: YAML file plus dotted command-line overrides.

Every key has a default (see :mod:`gliomapred.defaults`); unknown keys are
rejected with the closest valid spelling.
"""
from __future__ import annotations

import difflib
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from . import defaults


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSection:
    root: str | None = None
    clinical_csv: str | None = None
    pattern: str = "{pid}/{pid}_{mod}.nii.gz"
    slice_axis: int = defaults.SLICE_AXIS
    slice_positions_mm: list[float] = field(default_factory=lambda: list(defaults.SLICE_POSITIONS_MM))
    window_lo: float = defaults.WINDOW_LO
    window_hi: float = defaults.WINDOW_HI


@dataclass
class CohortSection:
    grouping: str = defaults.GROUPING
    train_frac: float = defaults.TRAIN_FRAC
    val_frac_of_train: float = defaults.VAL_FRAC_OF_TRAIN
    resection_encoding: str = defaults.RESECTION_ENCODING
    balance: bool = True


@dataclass
class ModelSection:
    backbone: str = defaults.BACKBONE
    weights: str = "auto"
    trainable: bool = False
    bn_layers: int = defaults.BN_LAYERS
    neurons_1: int = defaults.NEURONS_1
    neurons_2: int = defaults.NEURONS_2
    dropout_rate: float = defaults.DROPOUT
    activation: str = defaults.ACTIVATION


@dataclass
class TrainSection:
    learning_rate: float = defaults.LEARNING_RATE
    batch_size: int = defaults.BATCH_SIZE
    epochs: int = defaults.EPOCHS


@dataclass
class ExperimentSection:
    tasks: list[str] = field(default_factory=lambda: ["grade", "survival"])
    backbones: list[str] = field(default_factory=lambda: list(defaults.STUDY_BACKBONES))
    grid: dict = field(default_factory=lambda: {
        k: [list(x) if isinstance(x, tuple) else x for x in v] for k, v in defaults.SEARCH_GRID.items()})
    full_grid: bool = False
    fractions: list[float] = field(default_factory=lambda: list(defaults.SPLIT_FRACTIONS))
    n_iter: int = defaults.MONTE_CARLO_ITERATIONS
    workers: int = 1
    baselines: str | None = None


@dataclass
class SynthSection:
    n_hgg: int = defaults.BRATS_N_HGG
    n_lgg: int = defaults.BRATS_N_LGG
    dims: list[int] = field(default_factory=lambda: list(defaults.SYNTH_DIMS))
    signal_strength: float = 1.0
    mirror_missingness: bool = True
    lps_fraction: float = 0.5


@dataclass
class OutputSection:
    dir: str = "runs"


@dataclass
class RunConfig:
    seed: int = defaults.SEED
    dataset: DatasetSection = field(default_factory=DatasetSection)
    cohort: CohortSection = field(default_factory=CohortSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    synth: SynthSection = field(default_factory=SynthSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self, path) -> Path:
        path = Path(path)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path


def _leaf_keys(cls, prefix="") -> list[str]:
    out = []
    for f in fields(cls):
        hint = typing.get_type_hints(cls)[f.name]
        if is_dataclass(hint):
            out += _leaf_keys(hint, f"{prefix}{f.name}.")
        else:
            out.append(prefix + f.name)
    return out


def _suggest(key: str, candidates) -> str:
    close = difflib.get_close_matches(key, candidates, n=1, cutoff=0.6)
    if not close:
        tail = key.rsplit(".", 1)[-1]
        by_tail = {c.rsplit(".", 1)[-1]: c for c in candidates}
        hit = difflib.get_close_matches(tail, list(by_tail), n=1, cutoff=0.6)
        close = [by_tail[hit[0]]] if hit else []
    return f"; did you mean {close[0]!r}?" if close else ""


def _coerce(value, hint, key: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or type(hint).__name__ == "UnionType":
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], key)
    if hint is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected true/false, got {value!r}")
    if hint is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    if hint is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    if hint is str:
        if isinstance(value, str):
            return value
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return [_coerce(v, args[0], f"{key}[{i}]") for i, v in enumerate(value)] if args else list(value)
    if hint is dict or origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected a mapping, got {value!r}")
        return value
    return value


def _build(cls, data: dict, prefix: str, all_keys):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        full = prefix + str(key)
        if key not in names:
            raise ConfigError(f"unknown key {full!r}{_suggest(full, all_keys)}")
        hint = hints[key]
        if is_dataclass(hint):
            kwargs[key] = _build(hint, value, full + ".", all_keys)
        else:
            kwargs[key] = _coerce(value, hint, full)
    return cls(**kwargs)


def _set_dotted(doc: dict, key: str, value):
    parts = key.split(".")
    node = doc
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"cannot override {key!r}: {p!r} is not a section")
        node = nxt
    node[parts[-1]] = value


def _scalar(raw: str):
    value = yaml.safe_load(raw)
    if isinstance(value, str):
        # YAML 1.1 reads "1e-4" as a string
        try:
            return float(value)
        except ValueError:
            pass
    return value


def parse_overrides(args) -> dict:
    """``["--train.learning-rate=0.0005", "--model.backbone", "vgg16"]`` -> dotted dict.

    Dashes in key names become underscores; values are read as YAML scalars.
    """
    out, i = {}, 0
    args = list(args)
    while i < len(args):
        arg = args[i]
        if not arg.startswith("--") or "." not in arg.split("=", 1)[0]:
            raise ConfigError(f"unrecognized argument {arg!r}")
        if "=" in arg:
            key, raw = arg[2:].split("=", 1)
        else:
            if i + 1 >= len(args):
                raise ConfigError(f"override {arg!r} needs a value")
            key, raw = arg[2:], args[i + 1]
            i += 1
        out[key.replace("-", "_")] = _scalar(raw)
        i += 1
    return out


def _merge(low: dict, high: dict) -> dict:
    out = dict(low)
    for k, v in high.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, overrides: dict | None = None, base: dict | None = None) -> RunConfig:
    """``base`` document, then file values, then ``overrides`` (dotted keys) on top."""
    doc = {}
    if path is not None:
        doc = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    if base:
        doc = _merge(base, doc)
    for key, value in (overrides or {}).items():
        _set_dotted(doc, key, value)
    cfg = _build(RunConfig, doc, "", _leaf_keys(RunConfig))
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    from .modeling.backbones import REGISTRY

    if cfg.model.backbone not in REGISTRY:
        raise ConfigError(f"model.backbone: unknown backbone {cfg.model.backbone!r}"
                          f"{_suggest(cfg.model.backbone, list(REGISTRY))}")
    for bb in cfg.experiment.backbones:
        if bb not in REGISTRY:
            raise ConfigError(f"experiment.backbones: unknown backbone {bb!r}{_suggest(bb, list(REGISTRY))}")
    for t in cfg.experiment.tasks:
        if t not in ("grade", "survival"):
            raise ConfigError(f"experiment.tasks: unknown task {t!r}")
    if cfg.dataset.window_lo >= cfg.dataset.window_hi:
        raise ConfigError("dataset.window_lo must be below dataset.window_hi")
    if len(cfg.dataset.slice_positions_mm) != 3:
        raise ConfigError("dataset.slice_positions_mm needs exactly three positions")
    if len(cfg.synth.dims) != 3:
        raise ConfigError("synth.dims needs three values")
    if cfg.experiment.n_iter < 1 or cfg.experiment.workers < 1:
        raise ConfigError("experiment.n_iter and experiment.workers must be at least 1")
