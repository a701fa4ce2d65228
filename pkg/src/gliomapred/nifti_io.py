"""Minimal NIfTI-1 reader/writer and RAS reorientation.

Only single-file NIfTI-1 (``.nii`` / ``.nii.gz``) is supported. The affine is
resolved from the sform, then the qform, then a spacing-scaled identity.
"""
from __future__ import annotations

import gzip
import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
NIFTI2_HEADER_SIZE = 540
DEFAULT_VOX_OFFSET = 352

# NIfTI-1 datatype code -> numpy base type
DATATYPES: dict[int, np.dtype] = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
    256: np.dtype(np.int8),
    512: np.dtype(np.uint16),
    768: np.dtype(np.uint32),
    1024: np.dtype(np.int64),
    1280: np.dtype(np.uint64),
}
DTYPE_CODES = {dt: code for code, dt in DATATYPES.items()}

AXIS_LABELS = (("R", "L"), ("A", "P"), ("S", "I"))
RAS = ("R", "A", "S")


class NiftiError(Exception):
    """Base class for NIfTI loading failures."""


class NiftiFileNotFoundError(NiftiError, FileNotFoundError):
    pass


class BadMagicError(NiftiError):
    pass


class UnsupportedFormatError(NiftiError):
    """NIfTI-2, header/image pairs or non-3D payloads."""


class UnsupportedDatatypeError(NiftiError):
    pass


class HeaderDataMismatchError(NiftiError):
    pass


class NonFiniteDataError(NiftiError):
    pass


class SingularAffineError(ValueError):
    pass


@dataclass(frozen=True)
class VolumeHeader:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    datatype_code: int
    affine: np.ndarray = field(repr=False, compare=False)

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) < 1 for d in self.dims):
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        if len(self.spacing) != 3 or not all(s > 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive reals, got {self.spacing}")
        affine = np.asarray(self.affine, dtype=np.float64)
        if affine.shape != (4, 4):
            raise ValueError("affine must be 4x4")
        _check_nonsingular(affine)
        object.__setattr__(self, "affine", affine)
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    def __eq__(self, other):
        if not isinstance(other, VolumeHeader):
            return NotImplemented
        return (
            (self.dims, self.spacing, self.datatype_code)
            == (other.dims, other.spacing, other.datatype_code)
            and np.array_equal(self.affine, other.affine)
        )

    def __hash__(self):
        return hash((self.dims, self.spacing, self.datatype_code))


@dataclass(frozen=True)
class Volume:
    data: np.ndarray = field(repr=False)
    header: VolumeHeader

    def __post_init__(self):
        if tuple(self.data.shape) != self.header.dims:
            raise HeaderDataMismatchError(
                f"data shape {self.data.shape} != header dims {self.header.dims}"
            )
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteDataError("volume contains NaN or Inf values")

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return self.header == other.header and np.array_equal(self.data, other.data)

    __hash__ = None

    @property
    def affine(self) -> np.ndarray:
        return self.header.affine

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.header.dims

    def with_data(self, data: np.ndarray) -> "Volume":
        """Same geometry, new voxel values."""
        return Volume(data=data, header=self.header)


@dataclass(frozen=True)
class OrientationCode:
    axes: tuple[str, str, str]

    def __post_init__(self):
        groups = []
        for label in self.axes:
            for g, pair in enumerate(AXIS_LABELS):
                if label in pair:
                    groups.append(g)
                    break
            else:
                raise ValueError(f"unknown axis label {label!r}")
        if sorted(groups) != [0, 1, 2]:
            raise ValueError(f"axis labels must span three distinct axes: {self.axes}")

    def __str__(self):
        return "".join(self.axes)

    def __eq__(self, other):
        if isinstance(other, (tuple, str)):
            return tuple(self.axes) == tuple(other)
        if isinstance(other, OrientationCode):
            return self.axes == other.axes
        return NotImplemented

    def __hash__(self):
        return hash(self.axes)


def _check_nonsingular(affine: np.ndarray) -> None:
    linear = np.asarray(affine, dtype=np.float64)[:3, :3]
    if not np.all(np.isfinite(linear)):
        raise SingularAffineError("affine contains non-finite values")
    scale = max(np.abs(linear).max(), 1e-300)
    if abs(np.linalg.det(linear / scale)) < 1e-12:
        raise SingularAffineError("affine linear part is singular")


def make_header(
    dims, affine, datatype_code: int = 64
) -> VolumeHeader:
    """Build a header whose spacing is read off the affine column norms."""
    affine = np.asarray(affine, dtype=np.float64)
    spacing = tuple(float(s) for s in np.linalg.norm(affine[:3, :3], axis=0))
    return VolumeHeader(tuple(dims), spacing, datatype_code, affine)


def make_volume(data, affine=None, datatype_code: int | None = None) -> Volume:
    data = np.asarray(data)
    if datatype_code is None:
        datatype_code = DTYPE_CODES.get(data.dtype.newbyteorder("="), 64)
    if affine is None:
        affine = np.eye(4)
    header = make_header(data.shape, affine, datatype_code)
    return Volume(data.astype(np.float64), header)


# --------------------------------------------------------------------------
# reading


def _read_bytes(path: Path) -> bytes:
    with open(path, "rb") as fh:
        head = fh.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _endianness(raw: bytes) -> str:
    if len(raw) < HEADER_SIZE:
        raise BadMagicError(f"file too short for a NIfTI-1 header ({len(raw)} bytes)")
    for endian in ("<", ">"):
        (sizeof_hdr,) = struct.unpack(endian + "i", raw[:4])
        if sizeof_hdr == HEADER_SIZE:
            return endian
        if sizeof_hdr == NIFTI2_HEADER_SIZE:
            raise UnsupportedFormatError("NIfTI-2 files are not supported")
    raise BadMagicError("sizeof_hdr is not 348 in either byte order")


def quaternion_to_affine(b, c, d, qfac, pixdim, offset) -> np.ndarray:
    """qform (method 2) affine from quaternion parameters."""
    a2 = 1.0 - (b * b + c * c + d * d)
    # rounding can make the implied real part slightly negative
    a = np.sqrt(a2) if a2 > 1e-7 else 0.0
    if a == 0.0:
        norm = np.sqrt(b * b + c * c + d * d)
        b, c, d = b / norm, c / norm, d / norm
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ]
    )
    zooms = np.array(pixdim, dtype=np.float64)
    zooms[2] *= -1.0 if qfac < 0 else 1.0
    affine = np.eye(4)
    affine[:3, :3] = rot * zooms
    affine[:3, 3] = offset
    return affine


def affine_to_quaternion(affine: np.ndarray):
    """Inverse of :func:`quaternion_to_affine` for rotation-times-zoom affines.

    Returns ``(b, c, d, qfac, zooms)``.
    """
    linear = np.asarray(affine, dtype=np.float64)[:3, :3]
    zooms = np.linalg.norm(linear, axis=0)
    rot = linear / zooms
    qfac = 1.0
    if np.linalg.det(rot) < 0:
        qfac = -1.0
        rot[:, 2] *= -1
    # Shepperd's method
    trace = np.trace(rot)
    if trace > 0:
        s = 0.5 / np.sqrt(trace + 1.0)
        a = 0.25 / s
        b = (rot[2, 1] - rot[1, 2]) * s
        c = (rot[0, 2] - rot[2, 0]) * s
        d = (rot[1, 0] - rot[0, 1]) * s
    elif rot[0, 0] > rot[1, 1] and rot[0, 0] > rot[2, 2]:
        s = 2.0 * np.sqrt(1.0 + rot[0, 0] - rot[1, 1] - rot[2, 2])
        a = (rot[2, 1] - rot[1, 2]) / s
        b = 0.25 * s
        c = (rot[0, 1] + rot[1, 0]) / s
        d = (rot[0, 2] + rot[2, 0]) / s
    elif rot[1, 1] > rot[2, 2]:
        s = 2.0 * np.sqrt(1.0 + rot[1, 1] - rot[0, 0] - rot[2, 2])
        a = (rot[0, 2] - rot[2, 0]) / s
        b = (rot[0, 1] + rot[1, 0]) / s
        c = 0.25 * s
        d = (rot[1, 2] + rot[2, 1]) / s
    else:
        s = 2.0 * np.sqrt(1.0 + rot[2, 2] - rot[0, 0] - rot[1, 1])
        a = (rot[1, 0] - rot[0, 1]) / s
        b = (rot[0, 2] + rot[2, 0]) / s
        c = (rot[1, 2] + rot[2, 1]) / s
        d = 0.25 * s
    if a < 0:
        b, c, d = -b, -c, -d
    return b, c, d, qfac, zooms


def load_nifti(path) -> Volume:
    """Read a NIfTI-1 file into a float64 :class:`Volume`.

    Raises:
        NiftiFileNotFoundError: path does not exist.
        BadMagicError: not a NIfTI-1 header.
        UnsupportedFormatError: NIfTI-2, ``ni1`` pair files, or >3 non-singleton dims.
        UnsupportedDatatypeError: datatype code outside :data:`DATATYPES`.
        HeaderDataMismatchError: payload size or bitpix disagree with the header.
        NonFiniteDataError: NaN/Inf voxels.
    """
    path = Path(path)
    if not path.is_file():
        raise NiftiFileNotFoundError(f"no such NIfTI file: {path}")
    raw = _read_bytes(path)
    e = _endianness(raw)

    magic = raw[344:348]
    if magic == b"ni1\x00":
        raise UnsupportedFormatError("header/image pairs (.hdr/.img) are not supported")
    if magic != b"n+1\x00":
        raise BadMagicError(f"bad NIfTI-1 magic {magic!r}")

    dim = struct.unpack(e + "8h", raw[40:56])
    datatype, bitpix = struct.unpack(e + "2h", raw[70:74])
    pixdim = struct.unpack(e + "8f", raw[76:108])
    (vox_offset,) = struct.unpack(e + "f", raw[108:112])
    scl_slope, scl_inter = struct.unpack(e + "2f", raw[112:120])
    qform_code, sform_code = struct.unpack(e + "2h", raw[252:256])
    quatern = struct.unpack(e + "6f", raw[256:280])
    srow = np.array(struct.unpack(e + "12f", raw[280:328]), dtype=np.float64).reshape(3, 4)

    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise HeaderDataMismatchError(f"invalid dim[0] = {ndim}")
    shape = list(dim[1 : ndim + 1])
    if any(s < 1 for s in shape):
        raise HeaderDataMismatchError(f"non-positive dimension in {shape}")
    if len(shape) > 3:
        if any(s != 1 for s in shape[3:]):
            raise UnsupportedFormatError(f"only 3D volumes are supported, got shape {shape}")
        shape = shape[:3]
    shape = shape + [1] * (3 - len(shape))

    if datatype not in DATATYPES:
        raise UnsupportedDatatypeError(f"unsupported NIfTI datatype code {datatype}")
    dtype = DATATYPES[datatype].newbyteorder(e)
    if bitpix != dtype.itemsize * 8:
        raise HeaderDataMismatchError(
            f"bitpix {bitpix} inconsistent with datatype {datatype} ({dtype.itemsize * 8} bits)"
        )

    offset = int(vox_offset) if vox_offset >= HEADER_SIZE else DEFAULT_VOX_OFFSET
    count = int(np.prod(shape))
    nbytes = count * dtype.itemsize
    if len(raw) - offset < nbytes:
        raise HeaderDataMismatchError(
            f"payload has {len(raw) - offset} bytes, header implies {nbytes}"
        )
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = data.reshape(shape, order="F").astype(np.float64)
    if scl_slope != 0.0 and np.isfinite(scl_slope) and (scl_slope, scl_inter) != (1.0, 0.0):
        data = data * scl_slope + scl_inter

    spacing = [abs(p) if p != 0 else 1.0 for p in pixdim[1:4]]
    if sform_code > 0:
        affine = np.vstack([srow, [0, 0, 0, 1]])
    elif qform_code > 0:
        qfac = pixdim[0] if pixdim[0] != 0 else 1.0
        affine = quaternion_to_affine(*quatern[:3], qfac, spacing, quatern[3:])
    else:
        affine = np.diag(spacing + [1.0])
    header = VolumeHeader(tuple(shape), tuple(spacing), datatype, affine)
    return Volume(data, header)


# --------------------------------------------------------------------------
# writing


def save_nifti(
    volume: Volume,
    path,
    dtype=None,
    *,
    byteorder: str = "<",
    use_qform: bool = False,
) -> Path:
    """Write a single-file NIfTI-1; gzip is applied when the name ends in ``.gz``.

    ``dtype`` defaults to the header's datatype code. Values are cast without
    scaling, so integer targets must be able to hold the data exactly.
    """
    path = Path(path)
    target = np.dtype(dtype) if dtype is not None else DATATYPES[volume.header.datatype_code]
    code = DTYPE_CODES[target.newbyteorder("=")]
    e = byteorder
    affine = volume.affine

    hdr = bytearray(DEFAULT_VOX_OFFSET)
    struct.pack_into(e + "i", hdr, 0, HEADER_SIZE)
    struct.pack_into(e + "8h", hdr, 40, 3, *volume.shape, 1, 1, 1, 1)
    struct.pack_into(e + "2h", hdr, 70, code, target.itemsize * 8)
    struct.pack_into(e + "f", hdr, 108, float(DEFAULT_VOX_OFFSET))
    struct.pack_into(e + "2f", hdr, 112, 1.0, 0.0)
    hdr[123] = 2  # xyzt_units: mm
    if use_qform:
        b, c, d, qfac, zooms = affine_to_quaternion(affine)
        struct.pack_into(e + "8f", hdr, 76, qfac, *zooms, 0, 0, 0, 0)
        struct.pack_into(e + "2h", hdr, 252, 1, 0)
        struct.pack_into(e + "6f", hdr, 256, b, c, d, *affine[:3, 3])
    else:
        struct.pack_into(e + "8f", hdr, 76, 1.0, *volume.header.spacing, 0, 0, 0, 0)
        struct.pack_into(e + "2h", hdr, 252, 0, 2)
        struct.pack_into(e + "12f", hdr, 280, *affine[:3, :].ravel())
    hdr[344:348] = b"n+1\x00"

    payload = volume.data.astype(target.newbyteorder(e)).tobytes(order="F")
    blob = bytes(hdr) + payload
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.name.endswith(".gz"):
        # mtime=0 keeps gzip output byte-identical across runs
        with open(path, "wb") as raw_fh, gzip.GzipFile(
            filename="", mode="wb", fileobj=raw_fh, mtime=0
        ) as fh:
            fh.write(blob)
    else:
        path.write_bytes(blob)
    return path


# --------------------------------------------------------------------------
# orientation


def _axis_assignment(affine: np.ndarray):
    """World axis and sign for each voxel axis (best permutation by |cosine|)."""
    affine = np.asarray(affine, dtype=np.float64)
    _check_nonsingular(affine)
    linear = affine[:3, :3]
    cosines = linear / np.linalg.norm(linear, axis=0)
    best = max(
        itertools.permutations(range(3)),
        key=lambda perm: sum(abs(cosines[perm[j], j]) for j in range(3)),
    )
    signs = tuple(1 if cosines[best[j], j] >= 0 else -1 for j in range(3))
    return best, signs


def orientation_of(affine) -> OrientationCode:
    """Anatomical direction each voxel axis increases toward."""
    world, signs = _axis_assignment(affine)
    labels = tuple(AXIS_LABELS[w][0 if s > 0 else 1] for w, s in zip(world, signs))
    return OrientationCode(labels)


def reorient_to_ras(volume: Volume) -> Volume:
    """Permute and flip voxel axes so the volume is stored RAS+.

    No resampling: the voxel values are only rearranged, and the affine is
    updated so every voxel keeps its world coordinate.
    """
    world, signs = _axis_assignment(volume.affine)
    if world == (0, 1, 2) and signs == (1, 1, 1):
        return volume
    # output axis i comes from input axis perm[i]
    perm = [world.index(i) for i in range(3)]
    data = np.transpose(volume.data, perm)
    dims_in = volume.shape
    transform = np.zeros((4, 4))
    transform[3, 3] = 1.0
    for i, j in enumerate(perm):
        if signs[j] < 0:
            data = np.flip(data, axis=i)
            transform[j, i] = -1.0
            transform[j, 3] = dims_in[j] - 1
        else:
            transform[j, i] = 1.0
    affine = volume.affine @ transform
    spacing = tuple(volume.header.spacing[j] for j in perm)
    header = VolumeHeader(
        tuple(dims_in[j] for j in perm), spacing, volume.header.datatype_code, affine
    )
    return Volume(np.ascontiguousarray(data), header)
