"""Dataset directory + clinical CSV -> prepared cohort on disk, and back."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from . import cohort as co
from . import defaults
from .intensity import IntensityWindow, export_stacks, extract_slice_stack, load_stacks, window_volume
from .nifti_io import load_nifti, reorient_to_ras

log = logging.getLogger(__name__)


@dataclass
class PreparedCohort:
    records: list
    samples: list
    stacks: dict
    normalizer: co.AgeNormalizer | None
    digest: str
    info: dict = field(default_factory=dict)

    @property
    def tabular_width(self) -> int:
        return len(self.samples[0].tabular)

    @property
    def image_shape(self):
        return next(iter(self.stacks.values())).pixels.shape


def preprocess_volume(path, window: IntensityWindow, positions, axis, patient_id="", modality=""):
    vol = reorient_to_ras(load_nifti(path))
    vol = window_volume(vol, window)
    return extract_slice_stack(vol, positions, axis, patient_id=patient_id, modality=modality)


def prepare_dataset(
    root,
    clinical_csv,
    out_dir,
    *,
    window: IntensityWindow = IntensityWindow(),
    positions=defaults.SLICE_POSITIONS_MM,
    axis=defaults.SLICE_AXIS,
    seed: int = defaults.SEED,
    resection_encoding: str = defaults.RESECTION_ENCODING,
    pattern: str = "{pid}/{pid}_{mod}.nii.gz",
    balance: bool = True,
) -> Path:
    """Run the full preprocessing chain and write ``cohort.csv`` + ``stacks.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = co.load_clinical_table(clinical_csv)
    records = co.attach_modality_paths(records, root, pattern)
    records, normalizer = co.prepare_records(records, seed=seed, balance=balance)
    co.expand_modalities(records, resection_encoding)  # validates modality coverage

    stacks = []
    for rec in records:
        for mod in defaults.MODALITIES:
            stacks.append(
                preprocess_volume(rec.modality_paths[mod], window, positions, axis,
                                  rec.patient_id, mod)
            )
    labels = {}
    for rec in records:
        codes = co.encode_labels(rec)
        labels[rec.patient_id] = (codes.grade_code, codes.survival_class)
    co.write_cohort_manifest(records, out_dir / "cohort.csv", normalizer)
    export_stacks(stacks, out_dir, labels)
    info = {
        "seed": seed,
        "resection_encoding": resection_encoding,
        "window": [window.lo, window.hi],
        "positions_mm": list(positions),
        "axis": axis,
        "n_patients": len(records),
        "n_samples": len(stacks),
        "balanced": balance,
    }
    (out_dir / "prep_info.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    log.info("prepared %d patients / %d stacks in %s", len(records), len(stacks), out_dir)
    return out_dir


def load_prepared(prep_dir) -> PreparedCohort:
    prep_dir = Path(prep_dir)
    info = json.loads((prep_dir / "prep_info.json").read_text())
    records, normalizer = co.read_cohort_manifest(prep_dir / "cohort.csv")
    samples = co.expand_modalities(records, info["resection_encoding"], require_paths=False)
    stacks = load_stacks(prep_dir / "stacks.csv")
    missing = [s.slice_stack_ref for s in samples if s.slice_stack_ref not in stacks]
    if missing:
        raise co.CohortError(f"{len(missing)} samples lack slice stacks, e.g. {missing[0]}")
    digest = co.file_digest(prep_dir / "cohort.csv", prep_dir / "stacks.csv")
    return PreparedCohort(records, samples, stacks, normalizer, digest, info)
