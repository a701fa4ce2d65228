"""Studies over a prepared cohort: backbone sweep, one-at-a-time head search,
Monte Carlo split sweep and final evaluation.

Each trial is appended to a JSONL log the moment it finishes. Study tables are
pure functions of that log (:func:`report_from_log`), so every cell can be
recomputed after the fact.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import multiprocessing
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import cohort as co
from . import defaults
from .metrics import evaluate, render_confusion, write_report_csv, write_report_json
from .modeling import (
    BackboneSpec,
    FeatureCache,
    HeadConfig,
    TrainConfig,
    build_model,
    study_backbones,
    predict,
    save_checkpoint,
    train,
)
from .modeling.backbones import get_entry

log = logging.getLogger(__name__)

TASKS = ("grade", "survival")
TASK_CLASSES = {"grade": 2, "survival": 3}
CLASS_NAMES = {"grade": ["LGG", "HGG"], "survival": ["Short", "Mid", "Long"]}
AXES = ("bn_layers", "neurons", "dropout_rate", "activation", "learning_rate")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to run one trial on a given cohort."""

    task: str = "grade"
    backbone: str = defaults.BACKBONE
    # "auto": ImageNet weights for published backbones, random for tiny_test
    weights: str = "auto"
    trainable: bool = False
    head: HeadConfig = field(default_factory=HeadConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: co.SplitPlan = field(default_factory=co.SplitPlan)
    trial_id: str = ""

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.weights not in ("auto", "random", "pretrained_imagenet"):
            raise ValueError(f"unknown weights option {self.weights!r}")
        get_entry(self.backbone)

    @property
    def n_classes(self) -> int:
        return TASK_CLASSES[self.task]

    def resolved_weights(self) -> str:
        if self.weights != "auto":
            return self.weights
        return "pretrained_imagenet" if get_entry(self.backbone).in_study else "random"

    def backbone_spec(self) -> BackboneSpec:
        return BackboneSpec.of(self.backbone, self.resolved_weights(), self.trainable)

    def axis_value(self, axis: str):
        if axis == "neurons":
            return (self.head.neurons_1, self.head.neurons_2)
        if axis == "learning_rate":
            return self.train.learning_rate
        return getattr(self.head, axis)

    def with_axis(self, axis: str, value) -> "ExperimentConfig":
        if axis == "neurons":
            n1, n2 = value
            return replace(self, head=replace(self.head, neurons_1=int(n1), neurons_2=int(n2)))
        if axis == "learning_rate":
            return replace(self, train=replace(self.train, learning_rate=float(value)))
        if axis not in AXES:
            raise KeyError(f"unknown search axis {axis!r}")
        return replace(self, head=replace(self.head, **{axis: value}))

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "backbone": self.backbone,
            "weights": self.weights,
            "trainable": self.trainable,
            "head": asdict(self.head),
            "train": asdict(self.train),
            "split": asdict(self.split),
            "trial_id": self.trial_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(
            task=d["task"],
            backbone=d["backbone"],
            weights=d.get("weights", "auto"),
            trainable=d.get("trainable", False),
            head=HeadConfig(**d["head"]),
            train=TrainConfig(**d["train"]),
            split=co.SplitPlan(**d["split"]),
            trial_id=d.get("trial_id", ""),
        )


def diff_axes(cfg: ExperimentConfig, base: ExperimentConfig) -> list[str]:
    """Search axes on which ``cfg`` departs from ``base``."""
    return [a for a in AXES if cfg.axis_value(a) != base.axis_value(a)]


# --------------------------------------------------------------------------
# trial log


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


class TrialLog:
    """Append-only JSONL file; the owning process is the only writer."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: dict) -> None:
        line = json.dumps(record, sort_keys=True, default=_json_default)
        with open(self.path, "a") as fh:
            fh.write(line + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def read(self) -> list[dict]:
        if not self.path.exists():
            return []
        with open(self.path) as fh:
            return [json.loads(line) for line in fh if line.strip()]


# --------------------------------------------------------------------------
# trials


@dataclass
class TrialSpec:
    study: str
    index: int
    config: ExperimentConfig
    extra: dict = field(default_factory=dict)


def _canonical_samples(cohort):
    seen = {}
    for s in cohort.samples:
        seen.setdefault(s.slice_stack_ref, s)
    return [seen[k] for k in sorted(seen)]


def fit_and_score(cfg: ExperimentConfig, cohort, cache: FeatureCache | None = None):
    """Split, train and score one configuration.

    Returns ``(model, history, report, split)``.
    """
    split = co.make_split(cohort.samples, cfg.split, task=cfg.task)
    model = build_model(cfg.backbone_spec(), cfg.head, cfg.n_classes, cohort.tabular_width,
                        seed=cfg.train.seed)
    if model.frozen:
        cache = cache if cache is not None else FeatureCache()
        # features for the whole cohort in one fixed order, so batch
        # composition never depends on which trial ran first
        cache.features(model, _canonical_samples(cohort), cohort.stacks)
    else:
        cache = None
    model, history = train(model, split.train, split.val, cfg.train, cohort.stacks, cache)
    pred = predict(model, split.test, cohort.stacks, cache)
    y_true = [s.labels.for_task(cfg.task) for s in split.test]
    report = evaluate(
        y_true, pred.labels, cfg.n_classes, CLASS_NAMES[cfg.task],
        metadata={"task": cfg.task, "trial_id": cfg.trial_id, "split_seed": cfg.split.seed,
                  "train_frac": cfg.split.train_frac},
    )
    return model, history, report, split


def run_trial(spec: TrialSpec, cohort, cache: FeatureCache | None = None) -> dict:
    """One trial as a log record; failures become ``status: error`` records."""
    cfg = spec.config
    record = {
        "study": spec.study,
        "index": spec.index,
        "trial_id": cfg.trial_id,
        "task": cfg.task,
        "config": cfg.to_dict(),
        "seed": cfg.train.seed,
        "split_seed": cfg.split.seed,
        "cohort_digest": getattr(cohort, "digest", ""),
        **spec.extra,
        "status": "ok",
        "error": None,
        "metrics": None,
    }
    t0 = time.perf_counter()
    try:
        _, history, report, split = fit_and_score(cfg, cohort, cache)
        record["metrics"] = report.to_dict()
        record["history"] = history.to_dict()
        record["sizes"] = [len(split.train), len(split.val), len(split.test)]
    except Exception as exc:  # recorded, the study carries on
        log.warning("trial %s failed: %s", cfg.trial_id, exc)
        record["status"] = "error"
        record["error"] = f"{type(exc).__name__}: {exc}"
    record["elapsed_s"] = round(time.perf_counter() - t0, 3)
    return record


_WORKER: dict = {}


def _init_worker(cohort):
    import torch

    torch.set_num_threads(1)
    _WORKER["cohort"] = cohort
    _WORKER["cache"] = FeatureCache()


def _worker_run(spec: TrialSpec) -> dict:
    return run_trial(spec, _WORKER["cohort"], _WORKER["cache"])


def run_trials(specs, cohort, trial_log: TrialLog | None = None, workers: int = 1,
               cache: FeatureCache | None = None) -> list[dict]:
    """Run ``specs``; records are logged as they complete and returned in index order."""
    records = []
    if workers <= 1 or len(specs) <= 1:
        cache = cache if cache is not None else FeatureCache()
        for spec in specs:
            rec = run_trial(spec, cohort, cache)
            if trial_log is not None:
                trial_log.append(rec)
            records.append(rec)
    else:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(workers, mp_context=ctx, initializer=_init_worker,
                                 initargs=(cohort,)) as pool:
            futures = [pool.submit(_worker_run, s) for s in specs]
            for fut in as_completed(futures):
                rec = fut.result()
                if trial_log is not None:
                    trial_log.append(rec)
                records.append(rec)
    return sorted(records, key=lambda r: r["index"])


# --------------------------------------------------------------------------
# reports


@dataclass
class StudyReport:
    kind: str
    columns: list[str]
    rows: list[dict]
    best: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def n_failed(self) -> int:
        return int(sum(r.get("n_failed", 0) for r in self.rows))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "columns": self.columns, "rows": self.rows,
                "best": self.best, "extra": self.extra}

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            for row in self.rows:
                w.writerow([_cell(row.get(c)) for c in self.columns])
        return path

    def write_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True,
                                   default=_json_default) + "\n")
        return path

    def table(self, digits: int = 2) -> str:
        """Plain-text rendering, metrics rounded for display."""
        cells = [[_cell(r.get(c), digits) for c in self.columns] for r in self.rows]
        widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c)
                  for i, c in enumerate(self.columns)]
        lines = ["  ".join(c.ljust(w) for c, w in zip(self.columns, widths))]
        lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
        return "\n".join(lines)


def _cell(value, digits: int | None = None) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "*" if value else ""
    if isinstance(value, float):
        if math.isnan(value):
            return ""
        return f"{value:.{digits}f}" if digits is not None else repr(value)
    if isinstance(value, (list, tuple)):
        return "-".join(str(v) for v in value)
    return str(value)


def select_best(values, default_index: int | None = None) -> int | None:
    """Argmax over ``values`` (None/NaN skipped); ties go to ``default_index``,
    otherwise to the earliest entry."""
    scored = [(i, v) for i, v in enumerate(values) if v is not None and not math.isnan(v)]
    if not scored:
        return None
    top = max(v for _, v in scored)
    tied = [i for i, v in scored if v == top]
    if default_index in tied:
        return default_index
    return tied[0]


def most_balanced(pairs) -> int | None:
    """Row whose worse task score is highest; ties by mean, then first."""
    best, key = None, None
    for i, pair in enumerate(pairs):
        if any(v is None or math.isnan(v) for v in pair):
            continue
        k = (min(pair), sum(pair) / len(pair))
        if key is None or k > key:
            best, key = i, k
    return best


def _f1(rec):
    return rec["metrics"]["macro_f1"] if rec["status"] == "ok" else None


# -- backbone sweep ----------------------------------------------------------


def backbone_specs(base: ExperimentConfig, backbones=None, tasks=TASKS) -> list[TrialSpec]:
    backbones = list(backbones) if backbones is not None else study_backbones()
    specs = []
    for bi, bb in enumerate(backbones):
        for task in tasks:
            cfg = replace(base, task=task, backbone=bb, trial_id=f"backbones-{task}-{bb}")
            specs.append(TrialSpec("backbones", len(specs), cfg, {"backbone": bb}))
    return specs


def backbone_report(records) -> StudyReport:
    tasks = [t for t in TASKS if any(r["task"] == t for r in records)]
    order = list(dict.fromkeys(r["backbone"] for r in records))
    by = {(r["backbone"], r["task"]): r for r in records}
    rows = []
    for bb in order:
        row = {"backbone": bb, "n_failed": 0, "marker": ""}
        errors = []
        for t in tasks:
            rec = by.get((bb, t))
            row[f"{t}_f1_macro"] = _f1(rec) if rec else None
            if rec and rec["status"] != "ok":
                row["n_failed"] += 1
                errors.append(f"{t}: {rec['error']}")
        row["error"] = "; ".join(errors)
        rows.append(row)

    best, markers = {}, {i: [] for i in range(len(rows))}
    for t in tasks:
        i = select_best([r[f"{t}_f1_macro"] for r in rows])
        best[t] = rows[i]["backbone"] if i is not None else None
        if i is not None:
            markers[i].append(f"best {t}")
    if len(tasks) > 1:
        i = most_balanced([[r[f"{t}_f1_macro"] for t in tasks] for r in rows])
        best["most_balanced"] = rows[i]["backbone"] if i is not None else None
        if i is not None:
            markers[i].append("most balanced")
    for i, r in enumerate(rows):
        r["marker"] = "; ".join(markers[i])
    columns = ["backbone"] + [f"{t}_f1_macro" for t in tasks] + ["marker", "n_failed", "error"]
    return StudyReport("backbones", columns, rows, best)


def backbone_sweep(cohort, base: ExperimentConfig = ExperimentConfig(), backbones=None,
                   tasks=TASKS, trial_log: TrialLog | None = None, workers: int = 1,
                   cache: FeatureCache | None = None) -> StudyReport:
    """One grade and one survival model per backbone, same split and seed."""
    specs = backbone_specs(base, backbones, tasks)
    return backbone_report(run_trials(specs, cohort, trial_log, workers, cache))


# -- hyperparameter search ---------------------------------------------------


def _value_label(value) -> str:
    if isinstance(value, (list, tuple)):
        return "-".join(str(v) for v in value)
    return str(value)


def grid_specs(base: ExperimentConfig, grid=None, tasks=TASKS, full_grid: bool = False):
    grid = {a: list(v) for a, v in (grid or defaults.SEARCH_GRID).items()}
    unknown = set(grid) - set(AXES)
    if unknown:
        raise KeyError(f"unknown search axes {sorted(unknown)}")
    specs = []
    for task in tasks:
        tbase = replace(base, task=task)
        if full_grid:
            axes = [a for a in AXES if a in grid]
            for combo in itertools.product(*(grid[a] for a in axes)):
                cfg = tbase
                for a, v in zip(axes, combo):
                    cfg = cfg.with_axis(a, v)
                label = ",".join(f"{a}={_value_label(v)}" for a, v in zip(axes, combo))
                cfg = replace(cfg, trial_id=f"grid-{task}-{label}")
                specs.append(TrialSpec("grid", len(specs), cfg,
                                       {"axis": "grid", "value": label, "is_default": False}))
            continue
        for axis in AXES:
            for value in grid.get(axis, []):
                cfg = tbase.with_axis(axis, value)
                label = _value_label(value)
                cfg = replace(cfg, trial_id=f"grid-{task}-{axis}={label}")
                extra = {
                    "axis": axis,
                    "value": label,
                    "is_default": cfg.axis_value(axis) == tbase.axis_value(axis),
                    "differs_from_default": diff_axes(cfg, tbase),
                    "base_config": tbase.to_dict(),
                }
                specs.append(TrialSpec("grid", len(specs), cfg, extra))
    return specs


def grid_report(records) -> StudyReport:
    tasks = [t for t in TASKS if any(r["task"] == t for r in records)]
    rows, best, composite = [], {}, {}
    for t in tasks:
        recs = [r for r in records if r["task"] == t]
        task_rows = []
        for r in recs:
            task_rows.append({
                "task": t,
                "axis": r["axis"],
                "value": r["value"],
                "f1_macro": _f1(r),
                "accuracy": r["metrics"]["accuracy"] if r["status"] == "ok" else None,
                "best": False,
                "trial_id": r["trial_id"],
                "n_failed": int(r["status"] != "ok"),
                "error": r["error"] or "",
            })
        best[t] = {}
        winner_cfg = None
        for axis in dict.fromkeys(r["axis"] for r in recs):
            idx = [i for i, r in enumerate(recs) if r["axis"] == axis]
            defaults_at = [j for j, i in enumerate(idx) if recs[i].get("is_default")]
            j = select_best([_f1(recs[i]) for i in idx], defaults_at[0] if defaults_at else None)
            if j is None:
                continue
            win = recs[idx[j]]
            task_rows[idx[j]]["best"] = True
            best[t][axis] = win["value"]
            win_cfg = ExperimentConfig.from_dict(win["config"])
            if axis == "grid":
                winner_cfg = win_cfg
            else:
                winner_cfg = winner_cfg or ExperimentConfig.from_dict(win["base_config"])
                winner_cfg = winner_cfg.with_axis(axis, win_cfg.axis_value(axis))
        if winner_cfg is not None:
            composite[t] = replace(winner_cfg, trial_id=f"best-{t}").to_dict()
        rows.extend(task_rows)
    columns = ["task", "axis", "value", "f1_macro", "accuracy", "best", "trial_id",
               "n_failed", "error"]
    return StudyReport("grid", columns, rows, best, {"composite": composite})


def hyperparameter_search(cohort, base: ExperimentConfig = ExperimentConfig(), grid=None,
                          tasks=TASKS, full_grid: bool = False,
                          trial_log: TrialLog | None = None, workers: int = 1,
                          cache: FeatureCache | None = None) -> StudyReport:
    """Vary one axis at a time from ``base`` on one fixed split.

    With ``full_grid`` the Cartesian product of the axes is run instead.
    The winning composite per task is in ``report.extra["composite"]``.
    """
    specs = grid_specs(base, grid, tasks, full_grid)
    return grid_report(run_trials(specs, cohort, trial_log, workers, cache))


# -- split sweep -------------------------------------------------------------


def split_specs(configs: dict, fractions=defaults.SPLIT_FRACTIONS,
                n_iter: int = defaults.MONTE_CARLO_ITERATIONS):
    """``configs`` maps task -> ExperimentConfig (its split seed is the base seed)."""
    specs = []
    for frac in fractions:
        for task, cfg in configs.items():
            for it in range(n_iter):
                plan = replace(cfg.split, train_frac=float(frac), seed=cfg.split.seed + it)
                c = replace(cfg, task=task, split=plan,
                            trial_id=f"splits-{task}-{frac:g}-{it}")
                specs.append(TrialSpec("splits", len(specs), c,
                                       {"train_frac": float(frac), "iteration": it}))
    return specs


METRIC_KEYS = ("macro_precision", "macro_recall", "macro_f1", "accuracy")


def split_report(records, default_frac: float = defaults.TRAIN_FRAC) -> StudyReport:
    tasks = [t for t in TASKS if any(r["task"] == t for r in records)]
    fracs = list(dict.fromkeys(r["train_frac"] for r in records))
    rows, best = [], {}
    for frac in fracs:
        for t in tasks:
            recs = [r for r in records if r["train_frac"] == frac and r["task"] == t]
            ok = [r for r in recs if r["status"] == "ok"]
            row = {"train_frac": frac, "task": t, "n_iter": len(recs), "n_ok": len(ok),
                   "n_failed": len(recs) - len(ok), "best": False}
            for k in METRIC_KEYS:
                vals = [r["metrics"][k] for r in ok]
                row[k] = float(np.mean(vals)) if vals else None
            rows.append(row)
    for t in tasks:
        idx = [i for i, r in enumerate(rows) if r["task"] == t]
        dflt = [j for j, i in enumerate(idx) if rows[i]["train_frac"] == default_frac]
        j = select_best([rows[i]["macro_f1"] for i in idx], dflt[0] if dflt else None)
        if j is not None:
            rows[idx[j]]["best"] = True
            best[t] = rows[idx[j]]["train_frac"]
    columns = ["train_frac", "task", *METRIC_KEYS, "n_iter", "n_ok", "n_failed", "best"]
    return StudyReport("splits", columns, rows, best)


def split_sweep(cohort, configs: dict, fractions=defaults.SPLIT_FRACTIONS,
                n_iter: int = defaults.MONTE_CARLO_ITERATIONS,
                trial_log: TrialLog | None = None, workers: int = 1,
                cache: FeatureCache | None = None) -> StudyReport:
    """Monte Carlo average per (train fraction, task); split seeds seed+0 .. seed+n_iter-1."""
    specs = split_specs(configs, fractions, n_iter)
    return split_report(run_trials(specs, cohort, trial_log, workers, cache))


REPORT_BUILDERS = {"backbones": backbone_report, "grid": grid_report, "splits": split_report}


def report_from_log(records, study: str | None = None) -> StudyReport:
    """Rebuild a study table from logged trial records."""
    studies = sorted({r["study"] for r in records})
    if study is None:
        if len(studies) != 1:
            raise ValueError(f"log holds studies {studies}; pick one")
        study = studies[0]
    recs = sorted((r for r in records if r["study"] == study), key=lambda r: r["index"])
    if not recs:
        raise ValueError(f"no {study!r} trials in the log")
    return REPORT_BUILDERS[study](recs)


# --------------------------------------------------------------------------
# final evaluation and literature comparison


def load_baselines(path=None) -> dict:
    """Prior-work accuracies per task, from the bundled YAML unless ``path`` is given."""
    import yaml

    if path is None:
        path = Path(__file__).parent / "data" / "literature_baselines.yaml"
    doc = yaml.safe_load(Path(path).read_text())
    out = {}
    for task, entries in (doc.get("tasks") or {}).items():
        if task not in TASKS:
            raise ValueError(f"baseline file lists unknown task {task!r}")
        out[task] = [
            {"label": e["label"], "accuracy": float(e["accuracy"]),
             "citation": e.get("citation", ""), "note": e.get("note", "")}
            for e in entries
        ]
    return out


def comparison_chart(reports: dict, baselines: dict | None) -> dict:
    """Per task: literature bars followed by this run's test accuracy."""
    chart = {}
    for task, rep in reports.items():
        bars = [{**b, "source": "literature"} for b in (baselines or {}).get(task, [])]
        bars.append({"label": "this run", "accuracy": rep.accuracy, "citation": "",
                     "note": "", "source": "this run"})
        chart[task] = bars
    return chart


def render_comparison(chart: dict, path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    tasks = list(chart)
    fig, axes = plt.subplots(1, len(tasks), figsize=(5 * len(tasks), 4), squeeze=False)
    for ax, task in zip(axes[0], tasks):
        bars = chart[task]
        colors = ["tab:gray" if b["source"] == "literature" else "tab:blue" for b in bars]
        ax.bar(range(len(bars)), [b["accuracy"] for b in bars], color=colors)
        ax.set_xticks(range(len(bars)), [b["label"] for b in bars], rotation=30, ha="right")
        ax.set_ylim(0, 1)
        ax.set_ylabel("test accuracy")
        ax.set_title(task)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


@dataclass
class FinalResult:
    reports: dict
    chart: dict
    histories: dict = field(default_factory=dict)


def final_eval(cohort, configs: dict, out_dir=None, baselines: dict | None = None,
               cache: FeatureCache | None = None) -> FinalResult:
    """Train the final model per task on its configured split and report on the test set.

    With ``out_dir`` the per-class tables (CSV, JSON), confusion heatmaps,
    checkpoints and the comparison chart are written there.
    """
    cache = cache if cache is not None else FeatureCache()
    reports, histories = {}, {}
    out = Path(out_dir) if out_dir is not None else None
    for task, cfg in configs.items():
        cfg = replace(cfg, task=task, trial_id=cfg.trial_id or f"final-{task}")
        model, history, report, _ = fit_and_score(cfg, cohort, cache)
        reports[task], histories[task] = report, history
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            write_report_csv(report, out / f"final_{task}.csv")
            write_report_json(report, out / f"final_{task}.json")
            render_confusion(report, out / f"confusion_{task}.png", title=f"{task} (test)")
            (out / f"history_{task}.json").write_text(
                json.dumps(history.to_dict(), indent=2) + "\n")
            save_checkpoint(model, out / f"model_{task}.pt", cfg.train, cohort.normalizer,
                            extra={"config": cfg.to_dict(), "cohort_digest": cohort.digest})
    chart = comparison_chart(reports, baselines)
    if out is not None:
        (out / "comparison.json").write_text(json.dumps(chart, indent=2, sort_keys=True) + "\n")
        render_comparison(chart, out / "comparison.png")
    return FinalResult(reports, chart, histories)
