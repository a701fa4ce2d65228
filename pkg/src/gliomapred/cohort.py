"""Clinical table ingestion, imputation, label coding, balancing and splits."""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import networkx as nx
import numpy as np

from . import defaults

GRADES = ("LGG", "HGG")
RESECTIONS = ("NA", "STR", "GTR")

# canonical column -> accepted header spellings (lower-cased)
COLUMN_ALIASES = {
    "patient_id": ("patient_id", "brats20id", "brats_id", "id", "subject_id"),
    "grade": ("grade", "tumor_grade"),
    "age": ("age", "age_years"),
    "survival_days": ("survival_days", "survival", "overall_survival"),
    "resection": ("resection", "extent_of_resection", "eor"),
}


class CohortError(ValueError):
    pass


class DuplicatePatientError(CohortError):
    pass


class MissingGradeError(CohortError):
    pass


class MissingModalityError(CohortError):
    pass


class SplitError(CohortError):
    pass


@dataclass(frozen=True)
class ClinicalRecord:
    patient_id: str
    grade: str
    age_years: float | None = None
    survival_days: float | None = None
    resection: str | None = None
    modality_paths: dict = field(default_factory=dict, compare=False, hash=False)
    age_imputed: bool = False
    survival_imputed: bool = False
    resection_imputed: bool = False
    age_normalized: float | None = None

    def __post_init__(self):
        if self.grade not in GRADES:
            raise MissingGradeError(f"{self.patient_id}: grade must be LGG or HGG, got {self.grade!r}")
        if self.survival_days is not None and self.survival_days < 0:
            raise CohortError(f"{self.patient_id}: negative survival")


@dataclass(frozen=True)
class LabelCodes:
    grade_code: int
    survival_class: int

    def __post_init__(self):
        if self.grade_code not in (0, 1):
            raise ValueError(f"grade_code must be 0 or 1, got {self.grade_code}")
        if self.survival_class not in (0, 1, 2):
            raise ValueError(f"survival_class must be 0, 1 or 2, got {self.survival_class}")

    def for_task(self, task: str) -> int:
        if task == "grade":
            return self.grade_code
        if task == "survival":
            return self.survival_class
        raise ValueError(f"unknown task {task!r}")


@dataclass(frozen=True)
class Sample:
    slice_stack_ref: str
    tabular: tuple[float, ...]
    labels: LabelCodes
    patient_id: str
    modality: str

    def __post_init__(self):
        if not 0.0 <= self.tabular[0] <= 1.0:
            raise ValueError(f"age_normalized out of [0, 1]: {self.tabular[0]}")


@dataclass(frozen=True)
class SplitPlan:
    train_frac: float = defaults.TRAIN_FRAC
    val_frac_of_train: float = defaults.VAL_FRAC_OF_TRAIN
    seed: int = defaults.SEED
    grouping: str = defaults.GROUPING

    def __post_init__(self):
        if not 0.0 < self.train_frac < 1.0:
            raise SplitError(f"train_frac must lie in (0, 1), got {self.train_frac}")
        if not 0.0 <= self.val_frac_of_train < 1.0:
            raise SplitError(f"val_frac_of_train must lie in [0, 1), got {self.val_frac_of_train}")
        if self.grouping not in ("image_level", "patient_level"):
            raise SplitError(f"unknown grouping {self.grouping!r}")


class Split(NamedTuple):
    train: list
    val: list
    test: list


@dataclass(frozen=True)
class AgeNormalizer:
    """Min-max constants kept for inference-time reuse."""

    min_age: float
    max_age: float

    def __call__(self, age: float) -> float:
        return (age - self.min_age) / (self.max_age - self.min_age)


# --------------------------------------------------------------------------
# loading


def _parse_float(text):
    try:
        value = float(text)
    except (TypeError, ValueError):
        return None
    return value if math.isfinite(value) else None


def _parse_resection(text):
    text = (text or "").strip().upper()
    if text in ("NA", "NONE", "NO"):
        return "NA"
    if text in ("GTR", "STR"):
        return text
    return None


def _resolve_columns(header):
    lowered = {h.strip().lower(): h for h in header}
    columns = {}
    for canonical, aliases in COLUMN_ALIASES.items():
        for alias in aliases:
            if alias in lowered:
                columns[canonical] = lowered[alias]
                break
    missing = {"patient_id", "grade"} - set(columns)
    if missing:
        raise CohortError(f"clinical table lacks required column(s): {sorted(missing)}")
    return columns


def load_clinical_table(path) -> list[ClinicalRecord]:
    """Parse a per-patient clinical CSV.

    Unparseable or empty numeric cells become missing values. The literal
    ``NA`` in the resection column means "no resection"; an empty cell means
    the field is unknown.
    """
    records, seen = [], set()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, skipinitialspace=True)
        cols = _resolve_columns(reader.fieldnames or [])
        for line, row in enumerate(reader, start=2):
            pid = (row[cols["patient_id"]] or "").strip()
            if not pid:
                continue
            if pid in seen:
                raise DuplicatePatientError(f"duplicate patient id {pid!r} (line {line})")
            seen.add(pid)
            grade = (row[cols["grade"]] or "").strip().upper()
            if grade not in GRADES:
                raise MissingGradeError(f"{pid}: missing or invalid grade {grade!r} (line {line})")
            get = lambda key: row.get(cols[key]) if key in cols else None  # noqa: E731
            records.append(
                ClinicalRecord(
                    patient_id=pid,
                    grade=grade,
                    age_years=_parse_float(get("age")),
                    survival_days=_parse_float(get("survival_days")),
                    resection=_parse_resection(get("resection")),
                )
            )
    return records


def attach_modality_paths(records, root, pattern="{pid}/{pid}_{mod}.nii.gz", tokens=None):
    """Fill ``modality_paths`` from a dataset root laid out by ``pattern``.

    ``tokens`` maps modality tag -> filename token (BraTS: t1, t1ce, t2, flair).
    Missing files are left out; :func:`expand_modalities` reports them.
    """
    root = Path(root)
    tokens = tokens or {m: m.lower() for m in defaults.MODALITIES}
    out = []
    for rec in records:
        paths = {}
        for mod in defaults.MODALITIES:
            p = root / pattern.format(pid=rec.patient_id, mod=tokens[mod])
            if p.is_file():
                paths[mod] = str(p)
        out.append(replace(rec, modality_paths=paths))
    return out


# --------------------------------------------------------------------------
# imputation and coding


def cohort_rngs(seed: int) -> dict[str, np.random.Generator]:
    """Independent streams for every random cohort step, all from one seed."""
    names = ("impute_age", "impute_survival", "balance")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def age_imputation_bounds(records) -> tuple[float, float]:
    observed = np.array([r.age_years for r in records if r.age_years is not None], dtype=float)
    if observed.size < 2:
        raise CohortError("need at least two observed ages to impute")
    mu, sigma = observed.mean(), observed.std(ddof=1)
    return mu - sigma, mu + sigma


def impute_age(records, rng: np.random.Generator) -> list[ClinicalRecord]:
    """Fill missing ages with draws from Uniform[mean - sd, mean + sd] of observed ages."""
    if not any(r.age_years is None for r in records):
        return list(records)
    lo, hi = age_imputation_bounds(records)
    out = []
    for rec in records:
        if rec.age_years is None:
            rec = replace(rec, age_years=float(rng.uniform(lo, hi)), age_imputed=True)
        out.append(rec)
    return out


def draw_survival_days(rng: np.random.Generator, size=None):
    """Imputed survival: 4-5 years with p=0.24, otherwise 5-7 years (integer days)."""
    a_lo, a_hi = defaults.IMPUTE_SURVIVAL_BAND_A
    b_lo, b_hi = defaults.IMPUTE_SURVIVAL_BAND_B
    short = rng.random(size) < defaults.IMPUTE_SURVIVAL_P_SHORT_BAND
    days = np.where(short, rng.integers(a_lo, a_hi, size), rng.integers(b_lo, b_hi + 1, size))
    return days if size is not None else int(days)


def impute_survival(records, rng: np.random.Generator) -> list[ClinicalRecord]:
    if rng is None:
        raise ValueError("a random generator is required")
    out = []
    for rec in records:
        if rec.survival_days is None:
            rec = replace(rec, survival_days=float(draw_survival_days(rng)), survival_imputed=True)
        out.append(rec)
    return out


def impute_resection(records) -> list[ClinicalRecord]:
    """Unknown resection becomes NA (most LGG patients are not operated)."""
    return [
        replace(r, resection=defaults.IMPUTED_RESECTION, resection_imputed=True)
        if r.resection is None
        else r
        for r in records
    ]


def survival_class(days: float) -> int:
    if days < defaults.SURVIVAL_SHORT_MAX_DAYS:
        return 0
    if days <= defaults.SURVIVAL_MID_MAX_DAYS:
        return 1
    return 2


def encode_labels(record: ClinicalRecord) -> LabelCodes:
    if record.survival_days is None:
        raise CohortError(f"{record.patient_id}: survival missing; impute before encoding")
    return LabelCodes(GRADES.index(record.grade), survival_class(record.survival_days))


def normalize_age(records) -> tuple[list[ClinicalRecord], AgeNormalizer]:
    ages = [r.age_years for r in records]
    if any(a is None for a in ages):
        raise CohortError("all ages must be present before normalization")
    lo, hi = min(ages), max(ages)
    if hi == lo:
        raise CohortError("cannot normalize ages: every patient has the same age")
    norm = AgeNormalizer(lo, hi)
    return [replace(r, age_normalized=norm(r.age_years)) for r in records], norm


def encode_resection(resection: str, encoding: str = defaults.RESECTION_ENCODING):
    code = defaults.RESECTION_CODES[resection]
    if encoding == "ordinal":
        return (float(code),)
    if encoding == "onehot":
        return tuple(float(code == i) for i in range(len(RESECTIONS)))
    raise ValueError(f"unknown resection encoding {encoding!r}")


def tabular_width(encoding: str = defaults.RESECTION_ENCODING) -> int:
    return 1 + len(encode_resection("NA", encoding))


def balance_classes(records, rng: np.random.Generator) -> list[ClinicalRecord]:
    """Subsample the majority grade to the minority count; input order kept."""
    by_grade = {g: [i for i, r in enumerate(records) if r.grade == g] for g in GRADES}
    if any(len(v) == 0 for v in by_grade.values()):
        raise CohortError("both grades must have at least one patient")
    n = min(len(v) for v in by_grade.values())
    keep = set()
    for g in GRADES:
        idx = by_grade[g]
        if len(idx) > n:
            idx = rng.choice(idx, size=n, replace=False).tolist()
        keep.update(idx)
    return [r for i, r in enumerate(records) if i in keep]


def expand_modalities(records, resection_encoding=defaults.RESECTION_ENCODING, require_paths=True):
    """Four samples per patient, one per MRI sequence, sharing labels and tabular data."""
    samples = []
    for rec in records:
        if require_paths:
            missing = [m for m in defaults.MODALITIES if m not in rec.modality_paths]
            if missing:
                raise MissingModalityError(f"{rec.patient_id}: missing modalities {missing}")
        if rec.age_normalized is None:
            raise CohortError(f"{rec.patient_id}: age not normalized")
        labels = encode_labels(rec)
        tab = (float(rec.age_normalized),) + encode_resection(rec.resection, resection_encoding)
        for mod in defaults.MODALITIES:
            samples.append(Sample(f"{rec.patient_id}/{mod}", tab, labels, rec.patient_id, mod))
    return samples


def prepare_records(records, seed: int = defaults.SEED, balance: bool = True):
    """Impute, balance and normalize, in that order.

    Imputation uses the whole table's observed ages so the balancing draw
    does not change the imputation law.
    """
    rngs = cohort_rngs(seed)
    records = impute_age(records, rngs["impute_age"])
    records = impute_survival(records, rngs["impute_survival"])
    records = impute_resection(records)
    if balance:
        records = balance_classes(records, rngs["balance"])
    return normalize_age(records)


# --------------------------------------------------------------------------
# splitting


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def partition_sizes(n: int, plan: SplitPlan) -> tuple[int, int, int]:
    n_test = _round_half_up(n * (1.0 - plan.train_frac))
    n_val = _round_half_up((n - n_test) * plan.val_frac_of_train)
    return n - n_test - n_val, n_val, n_test


def _controlled_rounding(class_counts, part_sizes):
    """Integer class x partition table with the given margins.

    Every cell is the floor or ceiling of its proportional share
    ``n_c * m_p / N``; such a table always exists and is found as a flow.
    """
    total = sum(class_counts)
    exact = np.outer(class_counts, part_sizes) / total
    base = np.floor(exact + 1e-9).astype(int)
    row_need = np.asarray(class_counts) - base.sum(axis=1)
    col_need = np.asarray(part_sizes) - base.sum(axis=0)
    g = nx.DiGraph()
    for c, need in enumerate(row_need):
        g.add_edge("s", ("c", c), capacity=int(need))
    for p, need in enumerate(col_need):
        g.add_edge(("p", p), "t", capacity=int(need))
    for c in range(len(class_counts)):
        for p in range(len(part_sizes)):
            if exact[c, p] - base[c, p] > 1e-9:
                g.add_edge(("c", c), ("p", p), capacity=1)
    value, flow = nx.maximum_flow(g, "s", "t")
    if value != row_need.sum():
        raise SplitError("no stratified allocation exists")  # unreachable by theory
    table = base.copy()
    for c in range(len(class_counts)):
        for p in range(len(part_sizes)):
            table[c, p] += flow.get(("c", c), {}).get(("p", p), 0)
    return table


def make_split(samples: Sequence[Sample], plan: SplitPlan, task: str = "grade") -> Split:
    """Stratified train/val/test split.

    ``task`` picks the label used for stratification. Under
    ``patient_level`` grouping whole patients are allocated, so no patient
    straddles two partitions.
    """
    if not samples:
        raise SplitError("cannot split an empty sample list")
    rng = np.random.default_rng(plan.seed)

    if plan.grouping == "patient_level":
        units = {}
        for s in samples:
            units.setdefault(s.patient_id, []).append(s)
        groups = list(units.values())
    else:
        groups = [[s] for s in samples]

    labels = [g[0].labels.for_task(task) for g in groups]
    classes = sorted(set(labels))
    members = {c: [i for i, lab in enumerate(labels) if lab == c] for c in classes}
    sizes = partition_sizes(len(groups), plan)  # train, val, test
    table = _controlled_rounding([len(members[c]) for c in classes], sizes)
    for p, size in enumerate(sizes):
        if size > 0 and np.any(table[:, p] == 0):
            name = ("train", "val", "test")[p]
            raise SplitError(f"a class is absent from the {name} partition at these sizes")

    parts = ([], [], [])
    for ci, c in enumerate(classes):
        order = rng.permutation(members[c])
        start = 0
        for p in (2, 1, 0):  # test first, then val, the rest trains
            take = order[start : start + table[ci, p]]
            start += table[ci, p]
            parts[p].extend(int(i) for i in take)
    train, val, test = (
        [s for i in sorted(idx) for s in groups[i]] for idx in parts
    )
    return Split(train, val, test)


def monte_carlo_splits(samples, plan: SplitPlan, n_iter: int, task: str = "grade") -> list[Split]:
    if n_iter < 1:
        raise SplitError("n_iter must be at least 1")
    return [make_split(samples, replace(plan, seed=plan.seed + i), task) for i in range(n_iter)]


# --------------------------------------------------------------------------
# manifest

MANIFEST_FIELDS = [
    "patient_id",
    "grade",
    "age_years",
    "age_imputed",
    "age_normalized",
    "survival_days",
    "survival_imputed",
    "resection",
    "resection_imputed",
    "grade_code",
    "survival_class",
] + [f"path_{m}" for m in defaults.MODALITIES]


def write_cohort_manifest(records, path, normalizer: AgeNormalizer | None = None) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_FIELDS)
        for r in records:
            labels = encode_labels(r)
            w.writerow(
                [r.patient_id, r.grade, repr(r.age_years), int(r.age_imputed),
                 repr(r.age_normalized), repr(r.survival_days), int(r.survival_imputed),
                 r.resection, int(r.resection_imputed), labels.grade_code,
                 labels.survival_class]
                + [r.modality_paths.get(m, "") for m in defaults.MODALITIES]
            )
    if normalizer is not None:
        path.with_suffix(".age.csv").write_text(
            f"min_age,max_age\n{normalizer.min_age!r},{normalizer.max_age!r}\n"
        )
    return path


def read_cohort_manifest(path):
    """Records and age normalizer written by :func:`write_cohort_manifest`."""
    path = Path(path)
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(
                ClinicalRecord(
                    patient_id=row["patient_id"],
                    grade=row["grade"],
                    age_years=float(row["age_years"]),
                    survival_days=float(row["survival_days"]),
                    resection=row["resection"],
                    modality_paths={
                        m: row[f"path_{m}"] for m in defaults.MODALITIES if row[f"path_{m}"]
                    },
                    age_imputed=row["age_imputed"] == "1",
                    survival_imputed=row["survival_imputed"] == "1",
                    resection_imputed=row["resection_imputed"] == "1",
                    age_normalized=float(row["age_normalized"]),
                )
            )
    norm = None
    age_file = path.with_suffix(".age.csv")
    if age_file.exists():
        with open(age_file, newline="") as fh:
            row = next(csv.DictReader(fh))
        norm = AgeNormalizer(float(row["min_age"]), float(row["max_age"]))
    return records, norm


def file_digest(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()
