"""``gliomapred`` command line.

Commands share flags (``--config``, ``--out``, ``--seed``, ``--task``,
``--workers``, ``--from``) and accept dotted overrides such as
``--train.learning-rate=0.0005``. Each invocation writes into a fresh
timestamped run directory; later commands pick up earlier artifacts through
``--from``.

Exit status: 0 on success, 1 if any trial failed, 2 for configuration
errors, 3 for any other failure. Non-zero exits print a JSON error summary
on stderr and leave ``error.json`` in the run directory.
"""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import yaml

from . import __version__
from . import cohort as co
from . import experiments as ex
from .config import ConfigError, RunConfig, load_config, parse_overrides
from .intensity import IntensityWindow
from .modeling import HeadConfig, TrainConfig

log = logging.getLogger("gliomapred")

COMMANDS = {
    "synth": "generate a synthetic BraTS-shaped dataset",
    "prep": "preprocess volumes + clinical table into a prepared cohort",
    "train": "train and evaluate one model per task with the configured settings",
    "sweep-backbones": "compare backbones with default head settings",
    "grid-search": "one-at-a-time head / learning-rate search",
    "sweep-splits": "Monte Carlo evaluation of train fractions",
    "eval": "final models with the best configurations, plus literature comparison",
    "report": "rebuild and print study tables from earlier run directories",
}


class TrialsFailed(RuntimeError):
    def __init__(self, n_failed: int, failures: list):
        super().__init__(f"{n_failed} trial(s) failed")
        self.n_failed = n_failed
        self.failures = failures


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gliomapred", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--config", type=Path, help="YAML run configuration")
        sp.add_argument("--out", type=Path, help="parent directory for run directories")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--task", choices=ex.TASKS)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--from", dest="from_dirs", type=Path, action="append", default=[],
                        help="earlier run directory to take artifacts from (repeatable)")
        sp.add_argument("--run-name", help="fixed run directory name instead of a timestamp")
        sp.add_argument("-v", "--verbose", action="store_true")
    return parser


# --------------------------------------------------------------------------
# artifacts


def find_artifact(from_dirs, relpath: str) -> Path | None:
    """Last ``--from`` directory holding ``relpath`` wins."""
    for d in reversed(from_dirs):
        p = Path(d) / relpath
        if p.exists():
            return p
    return None


def make_run_dir(out: Path, command: str, name: str | None = None) -> Path:
    base = name or f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"
    run = out / base
    n = 1
    while run.exists():
        run = out / f"{base}-{n}"
        n += 1
    run.mkdir(parents=True)
    return run


def resolve_config(args, extra) -> RunConfig:
    overrides = parse_overrides(extra)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["experiment.workers"] = args.workers
    if args.out is not None:
        overrides["output.dir"] = str(args.out)
    base = {}
    fragment = find_artifact(args.from_dirs, "dataset.yaml")
    if fragment is not None:
        base = yaml.safe_load(fragment.read_text()) or {}
    return load_config(args.config, overrides, base=base)


def load_cohort(from_dirs):
    from .prepare import load_prepared

    info = find_artifact(from_dirs, "prepared/prep_info.json") or find_artifact(
        from_dirs, "prep_info.json")
    if info is None:
        raise ConfigError("no prepared cohort found; run `prep` and pass its run directory via --from")
    return load_prepared(info.parent)


def base_experiment(cfg: RunConfig, task: str) -> ex.ExperimentConfig:
    m = cfg.model
    try:
        return _experiment(cfg, m, task)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _experiment(cfg: RunConfig, m, task: str) -> ex.ExperimentConfig:
    return ex.ExperimentConfig(
        task=task,
        backbone=m.backbone,
        weights=m.weights,
        trainable=m.trainable,
        head=HeadConfig(m.bn_layers, m.neurons_1, m.neurons_2, m.dropout_rate, m.activation),
        train=TrainConfig(cfg.train.learning_rate, cfg.train.batch_size, cfg.train.epochs, cfg.seed),
        split=co.SplitPlan(cfg.cohort.train_frac, cfg.cohort.val_frac_of_train, cfg.seed,
                           cfg.cohort.grouping),
    )


def best_configs(cfg: RunConfig, tasks, from_dirs, provenance: dict) -> dict:
    """Searched configuration per task when a grid-search run is given, else the run config.

    Seeds and split fractions always come from the current run configuration.
    """
    out = {}
    for task in tasks:
        base = base_experiment(cfg, task)
        found = find_artifact(from_dirs, f"best_config_{task}.json")
        if found is None:
            out[task] = base
            provenance[task] = "run config"
            continue
        best = ex.ExperimentConfig.from_dict(json.loads(found.read_text()))
        out[task] = replace(best, task=task, train=replace(best.train, seed=cfg.seed),
                            split=base.split)
        provenance[task] = str(found)
    return out


def _tasks(args, cfg: RunConfig):
    return [args.task] if args.task else list(cfg.experiment.tasks)


def _finish_study(report: ex.StudyReport, run: Path, stem: str, trial_log: ex.TrialLog):
    report.write_csv(run / f"{stem}.csv")
    report.write_json(run / f"{stem}.json")
    print(report.table())
    failures = [{"trial_id": r["trial_id"], "error": r["error"]}
                for r in trial_log.read() if r["status"] != "ok"]
    return failures


# --------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg: RunConfig, run: Path, manifest: dict):
    from .synthdata import SynthSpec, generate_cohort

    s = cfg.synth
    spec = SynthSpec(n_hgg=s.n_hgg, n_lgg=s.n_lgg, dims=tuple(s.dims),
                     signal_strength=s.signal_strength, seed=cfg.seed,
                     mirror_missingness=s.mirror_missingness, lps_fraction=s.lps_fraction)
    ds = generate_cohort(spec, run)
    fragment = {"dataset": {"root": str(ds.root.resolve()),
                            "clinical_csv": str(ds.clinical_csv.resolve()),
                            "slice_positions_mm": [float(p) for p in spec.cut_positions]}}
    (run / "dataset.yaml").write_text(yaml.safe_dump(fragment, sort_keys=False))
    manifest["n_patients"] = len(ds.patient_ids)
    print(f"wrote {len(ds.patient_ids)} patients to {ds.root}")
    return []


def cmd_prep(args, cfg: RunConfig, run: Path, manifest: dict):
    from .prepare import load_prepared, prepare_dataset

    d = cfg.dataset
    if not d.root or not d.clinical_csv:
        raise ConfigError("prep needs dataset.root and dataset.clinical_csv "
                          "(set them in the config or pass a synth run via --from)")
    prep_dir = prepare_dataset(
        d.root, d.clinical_csv, run / "prepared",
        window=IntensityWindow(d.window_lo, d.window_hi),
        positions=tuple(d.slice_positions_mm), axis=d.slice_axis, seed=cfg.seed,
        resection_encoding=cfg.cohort.resection_encoding, pattern=d.pattern,
        balance=cfg.cohort.balance,
    )
    cohort = load_prepared(prep_dir)
    manifest["cohort_digest"] = cohort.digest
    print(f"prepared {len(cohort.records)} patients / {len(cohort.samples)} samples")
    return []


def cmd_train(args, cfg: RunConfig, run: Path, manifest: dict):
    cohort = load_cohort(args.from_dirs)
    manifest["cohort_digest"] = cohort.digest
    configs = {t: base_experiment(cfg, t) for t in _tasks(args, cfg)}
    result = ex.final_eval(cohort, configs, out_dir=run, baselines=None)
    for task, rep in result.reports.items():
        print(f"{task}: accuracy {rep.accuracy:.2f}, macro F1 {rep.macro_f1:.2f}")
    return []


def cmd_sweep_backbones(args, cfg: RunConfig, run: Path, manifest: dict):
    cohort = load_cohort(args.from_dirs)
    manifest["cohort_digest"] = cohort.digest
    trial_log = ex.TrialLog(run / "trials.jsonl")
    report = ex.backbone_sweep(cohort, base_experiment(cfg, "grade"), cfg.experiment.backbones,
                               _tasks(args, cfg), trial_log, cfg.experiment.workers)
    return _finish_study(report, run, "backbones", trial_log)


def cmd_grid_search(args, cfg: RunConfig, run: Path, manifest: dict):
    cohort = load_cohort(args.from_dirs)
    manifest["cohort_digest"] = cohort.digest
    trial_log = ex.TrialLog(run / "trials.jsonl")
    report = ex.hyperparameter_search(
        cohort, base_experiment(cfg, "grade"), cfg.experiment.grid, _tasks(args, cfg),
        cfg.experiment.full_grid, trial_log, cfg.experiment.workers)
    for task, cdict in report.extra.get("composite", {}).items():
        (run / f"best_config_{task}.json").write_text(json.dumps(cdict, indent=2, sort_keys=True) + "\n")
    return _finish_study(report, run, "grid_search", trial_log)


def cmd_sweep_splits(args, cfg: RunConfig, run: Path, manifest: dict):
    cohort = load_cohort(args.from_dirs)
    manifest["cohort_digest"] = cohort.digest
    provenance = manifest.setdefault("config_source", {})
    configs = best_configs(cfg, _tasks(args, cfg), args.from_dirs, provenance)
    trial_log = ex.TrialLog(run / "trials.jsonl")
    report = ex.split_sweep(cohort, configs, cfg.experiment.fractions, cfg.experiment.n_iter,
                            trial_log, cfg.experiment.workers)
    return _finish_study(report, run, "split_sweep", trial_log)


def cmd_eval(args, cfg: RunConfig, run: Path, manifest: dict):
    cohort = load_cohort(args.from_dirs)
    manifest["cohort_digest"] = cohort.digest
    provenance = manifest.setdefault("config_source", {})
    configs = best_configs(cfg, _tasks(args, cfg), args.from_dirs, provenance)
    sweep = find_artifact(args.from_dirs, "split_sweep.json")
    if sweep is not None:
        # train fraction chosen by the split study, when one is supplied
        best_frac = json.loads(sweep.read_text()).get("best", {})
        for task, c in configs.items():
            if task in best_frac:
                configs[task] = replace(c, split=replace(c.split, train_frac=float(best_frac[task])))
                provenance[f"{task}_train_frac"] = str(sweep)
    baselines = ex.load_baselines(cfg.experiment.baselines)
    result = ex.final_eval(cohort, configs, out_dir=run, baselines=baselines)
    for task, rep in result.reports.items():
        print(f"\n{task} (test set)")
        print(_eval_table(rep))
    return []


def _eval_table(rep) -> str:
    lines = ["{:<12}{:>10}{:>10}{:>10}{:>10}".format("", "precision", "recall", "f1", "accuracy")]
    for row in rep.rows(2):
        lines.append("{:<12}{:>10}{:>10}{:>10}{:>10}".format(*[str(c) for c in row]))
    return "\n".join(lines)


def cmd_report(args, cfg: RunConfig, run: Path, manifest: dict):
    if not args.from_dirs:
        raise ConfigError("report needs at least one --from run directory")
    for d in args.from_dirs:
        d = Path(d)
        trials = d / "trials.jsonl"
        if trials.exists():
            records = ex.TrialLog(trials).read()
            for study in sorted({r["study"] for r in records}):
                rep = ex.report_from_log(records, study)
                rep.write_csv(run / f"{d.name}_{study}.csv")
                print(f"\n[{d.name}] {study}")
                print(rep.table())
        for path in sorted(d.glob("final_*.json")):
            from .metrics import read_report_json

            rep = read_report_json(path)
            print(f"\n[{d.name}] {path.stem}")
            print(_eval_table(rep))
    return []


HANDLERS = {
    "synth": cmd_synth,
    "prep": cmd_prep,
    "train": cmd_train,
    "sweep-backbones": cmd_sweep_backbones,
    "grid-search": cmd_grid_search,
    "sweep-splits": cmd_sweep_splits,
    "eval": cmd_eval,
    "report": cmd_report,
}


# --------------------------------------------------------------------------
# entry point


def _error_summary(command, exc, run):
    summary = {
        "command": command,
        "status": "error",
        "error_type": type(exc).__name__,
        "message": str(exc),
        "run_dir": str(run) if run else None,
    }
    if isinstance(exc, TrialsFailed):
        summary["n_failed"] = exc.n_failed
        summary["failures"] = exc.failures
    return summary


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    run = None
    manifest = {
        "command": args.command,
        "argv": list(sys.argv[1:] if argv is None else argv),
        "version": __version__,
        "python": platform.python_version(),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "from": [str(d) for d in args.from_dirs],
    }
    try:
        cfg = resolve_config(args, extra)
        manifest["seed"] = cfg.seed
        run = make_run_dir(Path(cfg.output.dir), args.command, args.run_name)
        cfg.dump(run / "config.yaml")
        handler = logging.FileHandler(run / "run.log")
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        logging.getLogger().addHandler(handler)
        try:
            import torch

            manifest["torch"] = torch.__version__
            failures = HANDLERS[args.command](args, cfg, run, manifest)
        finally:
            logging.getLogger().removeHandler(handler)
            handler.close()
        manifest["n_failed"] = len(failures)
        if failures:
            raise TrialsFailed(len(failures), failures)
        status = 0
    except ConfigError as exc:
        status, err = 2, exc
    except TrialsFailed as exc:
        status, err = 1, exc
    except Exception as exc:  # reported as JSON, not a traceback
        log.debug("command failed", exc_info=True)
        status, err = 3, exc
    manifest["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    manifest["status"] = "ok" if status == 0 else "error"
    if run is not None:
        (run / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        print(f"run directory: {run}")
    if status:
        summary = _error_summary(args.command, err, run)
        text = json.dumps(summary, indent=2, sort_keys=True)
        print(text, file=sys.stderr)
        if run is not None:
            (run / "error.json").write_text(text + "\n")
    return status


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
