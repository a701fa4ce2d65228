"""Synthetic BraTS-shaped cohorts with a plantable grade signal.

Each patient gets four modality volumes: air outside an ellipsoidal head, a
bright skull shell (above the 800 HU window, so clipping matters), smooth
brain tissue and an ellipsoidal lesion around the middle cut. The lesion's
size and contrast move with grade in proportion to ``signal_strength``; at
zero both grades share one distribution. Half of the patients (by default)
are stored LPS so the reorientation step is exercised.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import defaults
from .intensity import scaled_positions
from .nifti_io import make_volume, save_nifti

MODALITY_TOKENS = {"T1": "t1", "T1ce": "t1ce", "T2": "t2", "FLAIR": "flair"}
TISSUE_BASE = {"T1": 100.0, "T1ce": 150.0, "T2": 250.0, "FLAIR": 200.0}
LESION_BASE = {"T1": 120.0, "T1ce": 200.0, "T2": 180.0, "FLAIR": 220.0}
SKULL_HU = 1200.0
AIR_HU = -1000.0
TISSUE_NOISE = 40.0

# HGG clinical distributions: age ~ N(56.5, 12) years, survival ~ lognormal
# around 330 days; resection probabilities for (GTR, STR, NA)
HGG_AGE = (56.5, 12.0)
HGG_SURVIVAL_MEDIAN_DAYS = 330.0
HGG_SURVIVAL_LOG_SD = 0.8
HGG_RESECTION_PROBS = (0.55, 0.10, 0.35)

CSV_FIELDS = ["patient_id", "grade", "age", "survival_days", "resection"]


@dataclass(frozen=True)
class SynthSpec:
    n_hgg: int = defaults.BRATS_N_HGG
    n_lgg: int = defaults.BRATS_N_LGG
    dims: tuple[int, int, int] = defaults.SYNTH_DIMS
    signal_strength: float = 1.0
    seed: int = defaults.SEED
    # every LGG row lacks age/survival/resection, as in BraTS 2020
    mirror_missingness: bool = True
    lps_fraction: float = 0.5
    resection_probs: tuple[float, float, float] = field(default=HGG_RESECTION_PROBS)

    def __post_init__(self):
        if self.n_hgg < 1 or self.n_lgg < 1:
            raise ValueError("both grades need at least one patient")
        if self.signal_strength < 0:
            raise ValueError("signal_strength must be non-negative")
        if len(self.dims) != 3 or min(self.dims) < 4:
            raise ValueError(f"dims too small: {self.dims}")
        cuts = scaled_positions(self.dims[2])
        if len(set(cuts)) < 3 or cuts[-1] >= self.dims[2]:
            raise ValueError(f"depth {self.dims[2]} cannot hold three distinct cuts")

    @property
    def cut_positions(self):
        return scaled_positions(self.dims[2])


@dataclass(frozen=True)
class SynthDataset:
    root: Path
    clinical_csv: Path
    patient_ids: tuple[str, ...]


def _ellipsoid(shape, centre, radii):
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    r2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, centre, radii))
    return r2


def patient_volumes(spec: SynthSpec, grade: str, rng: np.random.Generator):
    """Four RAS-ordered int16 arrays keyed by modality."""
    X, Y, Z = spec.dims
    sign = 1.0 if grade == "HGG" else -1.0
    s = spec.signal_strength

    head = _ellipsoid(spec.dims, ((X - 1) / 2, (Y - 1) / 2, (Z - 1) / 2),
                      (0.46 * X, 0.47 * Y, 0.49 * Z))
    brain = head <= 0.85
    skull = (head > 0.85) & (head <= 1.0)

    z_mid = spec.cut_positions[1]
    jitter = rng.uniform(-0.04, 0.04, size=2) * (X, Y)
    centre = ((X - 1) / 2 + jitter[0], (Y - 1) / 2 + jitter[1], z_mid)
    spread = spec.cut_positions[2] - spec.cut_positions[0]
    size = 0.15 * max(0.3, 1.0 + 0.35 * s * sign) * rng.uniform(0.85, 1.15)
    lesion = _ellipsoid(spec.dims, centre, (size * X, size * Y, 0.5 * spread + 0.12 * Z)) <= 1.0
    lesion &= brain
    contrast = 1.0 + 0.8 * s * sign

    vols = {}
    for mod in defaults.MODALITIES:
        noise = gaussian_filter(rng.standard_normal(spec.dims), sigma=2.0)
        noise *= TISSUE_NOISE / max(noise.std(), 1e-12)
        vol = np.full(spec.dims, AIR_HU)
        vol[skull] = SKULL_HU
        vol[brain] = TISSUE_BASE[mod] + noise[brain]
        lesion_hu = TISSUE_BASE[mod] + LESION_BASE[mod] * contrast + 0.5 * noise[lesion]
        # lesions stay inside the intensity window so clipping never touches them
        vol[lesion] = np.clip(lesion_hu, defaults.WINDOW_LO + 1, defaults.WINDOW_HI - 1)
        vols[mod] = np.rint(np.clip(vol, -1024, 1500)).astype(np.int16)
    return vols


def _clinical_row(rng: np.random.Generator, spec: SynthSpec):
    age = float(np.clip(rng.normal(*HGG_AGE), 19.0, 86.0))
    days = rng.lognormal(np.log(HGG_SURVIVAL_MEDIAN_DAYS), HGG_SURVIVAL_LOG_SD)
    days = int(np.clip(round(days), 5, 1900))
    resection = ("GTR", "STR", "NA")[rng.choice(3, p=np.asarray(spec.resection_probs))]
    return f"{age:.3f}", str(days), resection


def generate_cohort(spec: SynthSpec, out_dir, write_volumes: bool = True) -> SynthDataset:
    """Write ``<out>/data/<pid>/<pid>_<mod>.nii.gz`` and ``<out>/clinical.csv``."""
    out_dir = Path(out_dir)
    root = out_dir / "data"
    root.mkdir(parents=True, exist_ok=True)

    n = spec.n_hgg + spec.n_lgg
    ss_clin, ss_vol = np.random.SeedSequence(spec.seed).spawn(2)
    clin_rng = np.random.default_rng(ss_clin)
    grades = np.array(["HGG"] * spec.n_hgg + ["LGG"] * spec.n_lgg)
    grades = grades[clin_rng.permutation(n)]
    pids = tuple(f"SYN_{i + 1:04d}" for i in range(n))

    rows = []
    for pid, grade in zip(pids, grades):
        fields = _clinical_row(clin_rng, spec)
        if grade == "LGG" and spec.mirror_missingness:
            fields = ("", "", "")
        rows.append([pid, grade, *fields])
    clinical = out_dir / "clinical.csv"
    with open(clinical, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        w.writerows(rows)

    if write_volumes:
        X, Y, _ = spec.dims
        lps_affine = np.diag([-1.0, -1.0, 1.0, 1.0])
        lps_affine[0, 3], lps_affine[1, 3] = X - 1, Y - 1
        for pid, grade, child in zip(pids, grades, ss_vol.spawn(n)):
            rng = np.random.default_rng(child)
            lps = rng.random() < spec.lps_fraction
            for mod, data in patient_volumes(spec, grade, rng).items():
                affine = np.eye(4)
                if lps:
                    data = data[::-1, ::-1, :]
                    affine = lps_affine
                vol = make_volume(data, affine, datatype_code=4)
                save_nifti(vol, root / pid / f"{pid}_{MODALITY_TOKENS[mod]}.nii.gz", np.int16)
    return SynthDataset(root=root, clinical_csv=clinical, patient_ids=pids)
