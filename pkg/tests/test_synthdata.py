import csv
import hashlib

import numpy as np
import pytest

from gliomapred import defaults
from gliomapred.nifti_io import load_nifti, orientation_of
from gliomapred.synthdata import SynthSpec, generate_cohort, patient_volumes

SMALL = dict(n_hgg=3, n_lgg=2, dims=(24, 24, 20))


def rows(ds):
    with open(ds.clinical_csv) as fh:
        return list(csv.DictReader(fh))


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_counts_and_layout(tmp_path):
    ds = generate_cohort(SynthSpec(**SMALL, seed=1), tmp_path)
    table = rows(ds)
    assert sorted(r["grade"] for r in table) == ["HGG"] * 3 + ["LGG"] * 2
    for pid in ds.patient_ids:
        files = sorted(p.name for p in (ds.root / pid).iterdir())
        assert files == sorted(f"{pid}_{m}.nii.gz" for m in ("t1", "t1ce", "t2", "flair"))


def test_lgg_missingness_mirrored(tmp_path):
    ds = generate_cohort(SynthSpec(**SMALL), tmp_path / "a", write_volumes=False)
    for r in rows(ds):
        missing = r["age"] == "" and r["survival_days"] == "" and r["resection"] == ""
        assert missing == (r["grade"] == "LGG")
    ds = generate_cohort(SynthSpec(**SMALL, mirror_missingness=False), tmp_path / "b", write_volumes=False)
    assert all(r["age"] != "" for r in rows(ds))


def test_same_seed_byte_identical(tmp_path):
    a = generate_cohort(SynthSpec(**SMALL, seed=4), tmp_path / "a")
    b = generate_cohort(SynthSpec(**SMALL, seed=4), tmp_path / "b")
    c = generate_cohort(SynthSpec(**SMALL, seed=5), tmp_path / "c")
    assert tree_digest(a.root.parent) == tree_digest(b.root.parent)
    assert tree_digest(a.root.parent) != tree_digest(c.root.parent)


def test_volumes_load_with_expected_orientation(tmp_path):
    ds = generate_cohort(SynthSpec(**SMALL, lps_fraction=0.5, seed=2), tmp_path)
    codes = set()
    for pid in ds.patient_ids:
        vol = load_nifti(ds.root / pid / f"{pid}_t2.nii.gz")
        assert vol.header.dims == (24, 24, 20)
        codes.add(orientation_of(vol.header.affine))
    assert codes <= {("R", "A", "S"), ("L", "P", "S")}


def test_lesion_inside_window_and_skull_above():
    rng = np.random.default_rng(0)
    spec = SynthSpec(dims=(48, 48, 40), signal_strength=3.0)
    for grade in ("HGG", "LGG"):
        vols = patient_volumes(spec, grade, rng)
        for v in vols.values():
            assert v.dtype == np.int16
            assert v.min() == defaults.WINDOW_LO
            assert v.max() > defaults.WINDOW_HI


def test_signal_separates_lesion_contrast():
    spec = SynthSpec(dims=(48, 48, 40), signal_strength=2.0)
    z = int(spec.cut_positions[1])
    means = {}
    for grade in ("HGG", "LGG"):
        v = patient_volumes(spec, grade, np.random.default_rng(1))["T1ce"].astype(float)
        means[grade] = v[20:28, 20:28, z].mean()
    assert means["HGG"] > means["LGG"] + 100


def test_spec_guards():
    with pytest.raises(ValueError):
        SynthSpec(n_lgg=0)
    with pytest.raises(ValueError):
        SynthSpec(signal_strength=-1)
    with pytest.raises(ValueError):
        SynthSpec(dims=(8, 8, 3))
