"""Intensity windowing and three-cut slice stacks."""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import defaults
from .nifti_io import Volume, orientation_of

log = logging.getLogger(__name__)

MODALITIES = defaults.MODALITIES
AXIS_NAMES = {"x": 0, "y": 1, "z": 2, "sagittal": 0, "coronal": 1, "axial": 2}


class SliceClampWarning(UserWarning):
    """A requested cut position fell outside the volume and was clamped."""


class SliceExtractionError(ValueError):
    pass


@dataclass(frozen=True)
class IntensityWindow:
    lo: float = defaults.WINDOW_LO
    hi: float = defaults.WINDOW_HI

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"window lower bound {self.lo} must be below upper bound {self.hi}")

    @property
    def width(self) -> float:
        return self.hi - self.lo


@dataclass(frozen=True)
class SliceProvenance:
    patient_id: str
    modality: str
    axis: int
    indices: tuple[int, int, int]
    positions_mm: tuple[float, float, float]


@dataclass(frozen=True)
class SliceStack:
    pixels: np.ndarray
    provenance: SliceProvenance

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"slice stack must be HxWx3, got {self.pixels.shape}")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ValueError("slice stack pixels must lie in [0, 1]")
        idx = self.provenance.indices
        if not idx[0] < idx[1] < idx[2]:
            raise ValueError(f"slice indices must be strictly increasing, got {idx}")

    @property
    def key(self) -> str:
        return f"{self.provenance.patient_id}/{self.provenance.modality}"


def _check_window(window: IntensityWindow):
    # guards windows built with object.__setattr__ or copied from configs
    if not window.lo < window.hi:
        raise ValueError(f"invalid intensity window [{window.lo}, {window.hi}]")


def clip_intensity(volume: Volume, window: IntensityWindow = IntensityWindow()) -> Volume:
    _check_window(window)
    return volume.with_data(np.clip(volume.data, window.lo, window.hi))


def normalize_intensity(volume: Volume, window: IntensityWindow = IntensityWindow()) -> Volume:
    """Map ``[lo, hi]`` linearly onto ``[0, 1]``. Input must already be clipped."""
    _check_window(window)
    data = volume.data
    if data.size and (data.min() < window.lo or data.max() > window.hi):
        raise ValueError(
            f"voxels outside [{window.lo}, {window.hi}]; clip before normalizing"
        )
    out = (data - window.lo) / window.width
    # guard against 1 ulp overshoot at the window ends
    return volume.with_data(np.clip(out, 0.0, 1.0))


def window_volume(volume: Volume, window: IntensityWindow = IntensityWindow()) -> Volume:
    return normalize_intensity(clip_intensity(volume, window), window)


def resolve_axis(axis) -> int:
    if isinstance(axis, str):
        try:
            return AXIS_NAMES[axis.lower()]
        except KeyError:
            raise ValueError(f"unknown slice axis {axis!r}") from None
    axis = int(axis)
    if axis not in (0, 1, 2):
        raise ValueError(f"slice axis must be 0, 1 or 2, got {axis}")
    return axis


def _fractional_index(volume: Volume, axis: int, position: float) -> float:
    """Voxel coordinate along ``axis`` whose world coordinate on that axis is ``position``.

    The other two voxel coordinates are held at the volume centre.
    """
    affine = volume.affine
    centre = (np.asarray(volume.shape, dtype=np.float64) - 1) / 2
    rest = sum(affine[axis, j] * centre[j] for j in range(3) if j != axis)
    return (position - affine[axis, 3] - rest) / affine[axis, axis]


def _world_position(volume: Volume, axis: int, index: int) -> float:
    affine = volume.affine
    centre = (np.asarray(volume.shape, dtype=np.float64) - 1) / 2
    ijk = centre.copy()
    ijk[axis] = index
    return float(affine[axis, :3] @ ijk + affine[axis, 3])


def extract_slice_stack(
    volume: Volume,
    positions_mm=defaults.SLICE_POSITIONS_MM,
    axis=defaults.SLICE_AXIS,
    *,
    patient_id: str = "",
    modality: str = "",
) -> SliceStack:
    """Stack three 2D cuts at world positions ``positions_mm`` as channels.

    ``volume`` must be RAS-oriented and normalized to [0, 1]. Positions are
    snapped to the nearest voxel index and clamped into the volume (with a
    :class:`SliceClampWarning`).
    """
    axis = resolve_axis(axis)
    positions = tuple(float(p) for p in positions_mm)
    if len(positions) != 3:
        raise ValueError("exactly three cut positions are required")
    if not positions[0] < positions[1] < positions[2]:
        raise ValueError(f"cut positions must be strictly increasing, got {positions}")
    if orientation_of(volume.affine) != ("R", "A", "S"):
        raise SliceExtractionError("volume must be reoriented to RAS before slicing")

    n = volume.shape[axis]
    indices = []
    for pos in positions:
        idx = int(np.floor(_fractional_index(volume, axis, pos) + 0.5))
        if not 0 <= idx < n:
            clamped = min(max(idx, 0), n - 1)
            warnings.warn(
                f"cut at {pos} mm resolves to index {idx}, clamped to {clamped}",
                SliceClampWarning,
                stacklevel=2,
            )
            idx = clamped
        indices.append(idx)
    if len(set(indices)) < 3:
        raise SliceExtractionError(
            f"cuts {positions} resolve to {indices}: volume too thin along axis {axis}"
        )

    pixels = np.stack([np.take(volume.data, i, axis=axis) for i in indices], axis=-1)
    provenance = SliceProvenance(
        patient_id=patient_id,
        modality=modality,
        axis=axis,
        indices=tuple(indices),
        positions_mm=tuple(_world_position(volume, axis, i) for i in indices),
    )
    return SliceStack(pixels=pixels, provenance=provenance)


def resize_stack(stack: SliceStack, size: tuple[int, int]) -> SliceStack:
    """Bilinear resize for non-BraTS inputs (BraTS 240x240 is fed as-is)."""
    from scipy.ndimage import zoom

    h, w, _ = stack.pixels.shape
    factors = (size[0] / h, size[1] / w, 1.0)
    pixels = np.clip(zoom(stack.pixels, factors, order=1), 0.0, 1.0)
    return SliceStack(pixels=pixels, provenance=stack.provenance)


def scaled_positions(depth: int, reference_depth: int = 155, spacing: float = 1.0):
    """Default cut positions rescaled for a volume of ``depth`` slices."""
    scale = depth / reference_depth
    return tuple(float(round(p * scale)) * spacing for p in defaults.SLICE_POSITIONS_MM)


# --------------------------------------------------------------------------
# export

STACK_MANIFEST_FIELDS = [
    "patient_id",
    "modality",
    "file",
    "axis",
    "index_0",
    "index_1",
    "index_2",
    "position_0",
    "position_1",
    "position_2",
    "grade_code",
    "survival_class",
]


def export_stacks(stacks, out_dir, labels=None) -> Path:
    """Write each stack as ``.npy`` plus a ``stacks.csv`` manifest.

    ``labels`` optionally maps patient id -> (grade_code, survival_class).
    """
    out_dir = Path(out_dir)
    (out_dir / "stacks").mkdir(parents=True, exist_ok=True)
    labels = labels or {}
    rows = []
    for stack in stacks:
        p = stack.provenance
        rel = Path("stacks") / f"{p.patient_id}_{p.modality}.npy"
        np.save(out_dir / rel, stack.pixels.astype(np.float32))
        grade, surv = labels.get(p.patient_id, ("", ""))
        rows.append(
            [p.patient_id, p.modality, rel.as_posix(), p.axis, *p.indices,
             *(repr(x) for x in p.positions_mm), grade, surv]
        )
    manifest = out_dir / "stacks.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(STACK_MANIFEST_FIELDS)
        writer.writerows(rows)
    return manifest


def load_stacks(manifest) -> dict[str, SliceStack]:
    """Inverse of :func:`export_stacks`; keys are ``"<patient>/<modality>"``."""
    manifest = Path(manifest)
    stacks = {}
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            prov = SliceProvenance(
                patient_id=row["patient_id"],
                modality=row["modality"],
                axis=int(row["axis"]),
                indices=tuple(int(row[f"index_{i}"]) for i in range(3)),
                positions_mm=tuple(float(row[f"position_{i}"]) for i in range(3)),
            )
            pixels = np.load(manifest.parent / row["file"])
            stack = SliceStack(pixels=pixels, provenance=prov)
            stacks[stack.key] = stack
    return stacks
