"""NIfTI-1 volume I/O, intensity normalization and two-modality cases.

Only single-file (``n+1``) NIfTI-1 with three dimensions is supported, plain
or gzip-compressed. Orientation beyond per-axis voxel spacing is ignored.
"""
from __future__ import annotations

import gzip
import os
import struct
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

HEADER_SIZE = 348
VOX_OFFSET = 352

_DTYPES = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32, 64: np.float64}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}
_BITPIX = {2: 8, 4: 16, 8: 32, 16: 32, 64: 64}


class NiftiError(ValueError):
    """Base class for NIfTI read errors."""


class BadMagicError(NiftiError):
    pass


class UnsupportedFormatError(NiftiError):
    pass


class UnsupportedDatatypeError(NiftiError):
    pass


class DimensionError(NiftiError):
    pass


class TruncatedError(NiftiError):
    pass


class DegenerateInputError(ValueError):
    """Intensities have zero variance over the normalization region."""


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume data must be 3D with extents >= 1, got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def shape(self):
        return self.data.shape

    @property
    def voxel_volume(self):
        """Voxel volume in mm^3."""
        return float(np.prod(self.spacing))


@dataclass
class Case:
    id: str
    flair: Volume
    t1: Volume
    brain_mask: Volume
    lesion_mask: Volume | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        vols = {"flair": self.flair, "t1": self.t1, "brain_mask": self.brain_mask}
        if self.lesion_mask is not None:
            vols["lesion_mask"] = self.lesion_mask
        for name, vol in vols.items():
            if vol.shape != self.flair.shape:
                raise ValueError(f"case {self.id}: {name} shape {vol.shape} != flair shape {self.flair.shape}")
        if self.lesion_mask is not None and np.any(self.lesion_mask.data & ~self.brain_mask.data):
            raise ValueError(f"case {self.id}: lesion mask extends outside the brain mask")

    @property
    def shape(self):
        return self.flair.shape

    @property
    def lesion_voxels(self):
        return 0 if self.lesion_mask is None else int(self.lesion_mask.data.sum())

    def lesion_volume_ml(self):
        return self.lesion_voxels * self.flair.voxel_volume / 1000.0


def _open(path):
    with open(os.fspath(path), "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def load_nifti(path):
    """Read a single-file NIfTI-1 volume as float32, applying scl_slope/scl_inter."""
    raw = _open(path)
    if len(raw) < HEADER_SIZE:
        raise TruncatedError(f"{path}: file shorter than the {HEADER_SIZE}-byte header")
    endian = "<"
    if struct.unpack("<i", raw[:4])[0] != HEADER_SIZE:
        endian = ">"
        if struct.unpack(">i", raw[:4])[0] != HEADER_SIZE:
            raise BadMagicError(f"{path}: sizeof_hdr is not {HEADER_SIZE}")
    magic = raw[344:348]
    if magic == b"ni1\x00":
        raise UnsupportedFormatError(f"{path}: detached header/image pairs (magic 'ni1') are not supported")
    if magic != b"n+1\x00":
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    dim = struct.unpack(endian + "8h", raw[40:56])
    if dim[0] != 3 and not (dim[0] > 3 and all(d == 1 for d in dim[4:dim[0] + 1])):
        raise DimensionError(f"{path}: expected a 3D volume, got dim={dim[:dim[0] + 1]}")
    code = struct.unpack(endian + "h", raw[70:72])[0]
    if code not in _DTYPES:
        raise UnsupportedDatatypeError(f"{path}: unsupported datatype code {code}")
    pixdim = struct.unpack(endian + "8f", raw[76:108])
    vox_offset = int(struct.unpack(endian + "f", raw[108:112])[0])
    slope, inter = struct.unpack(endian + "2f", raw[112:120])
    if struct.unpack(endian + "h", raw[252:254])[0] > 0 or struct.unpack(endian + "h", raw[254:256])[0] > 0:
        srow = np.array(struct.unpack(endian + "12f", raw[280:328])).reshape(3, 4)[:, :3]
        if np.count_nonzero(srow - np.diag(np.diag(srow))):
            warnings.warn(f"{path}: non-diagonal orientation ignored", stacklevel=2)
    shape = tuple(int(d) for d in dim[1:4])
    dtype = np.dtype(_DTYPES[code]).newbyteorder(endian)
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if len(raw) < vox_offset + nbytes:
        raise TruncatedError(f"{path}: payload has {len(raw) - vox_offset} bytes, expected {nbytes}")
    data = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=vox_offset)
    # NIfTI stores the first index fastest.
    data = data.reshape(shape[::-1]).transpose(2, 1, 0).astype(np.float32)
    if slope != 0 and np.isfinite(slope):
        data = data * np.float32(slope) + np.float32(inter)
    origin = struct.unpack(endian + "3f", raw[268:280])
    return Volume(np.ascontiguousarray(data), tuple(abs(p) or 1.0 for p in pixdim[1:4]), origin)


def save_nifti(volume, path, datatype=np.float32):
    """Write ``volume`` as a single-file NIfTI-1 (gzip when the name ends in .gz)."""
    dtype = np.dtype(datatype)
    if dtype not in _CODES:
        raise UnsupportedDatatypeError(f"cannot write datatype {dtype}")
    code = _CODES[dtype]
    shape = volume.shape
    hdr = bytearray(VOX_OFFSET)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *shape, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, code, _BITPIX[code])
    struct.pack_into("<8f", hdr, 76, 1.0, *volume.spacing, 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    struct.pack_into("<B", hdr, 123, 2 | 8)  # xyzt_units: mm, s
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform unknown, sform scanner
    for row in range(3):
        values = [0.0] * 4
        values[row] = volume.spacing[row]
        values[3] = volume.origin[row]
        struct.pack_into("<4f", hdr, 280 + 16 * row, *values)
    struct.pack_into("<3f", hdr, 268, *volume.origin)
    hdr[344:348] = b"n+1\x00"
    data = volume.data
    if np.issubdtype(dtype, np.integer):
        data = np.rint(data)
    payload = np.ascontiguousarray(data.transpose(2, 1, 0), dtype=dtype.newbyteorder("<")).tobytes()
    blob = bytes(hdr) + payload
    path = os.fspath(path)
    if path.endswith(".gz"):
        blob = gzip.compress(blob, mtime=0)
    with open(path, "wb") as fh:
        fh.write(blob)


def save_mask(volume, path):
    binary = Volume((np.asarray(volume.data) > 0.5).astype(np.uint8), volume.spacing, volume.origin)
    save_nifti(binary, path, np.uint8)


def zscore_normalize(volume, brain_mask):
    """Zero-mean, unit-std intensities over the brain mask; zero outside it."""
    mask = np.asarray(brain_mask.data if isinstance(brain_mask, Volume) else brain_mask, dtype=bool)
    if not mask.any():
        raise DegenerateInputError("brain mask is empty")
    values = volume.data[mask].astype(np.float64)
    std = values.std()
    if std <= 1e-12 * max(1.0, abs(values.mean())):
        raise DegenerateInputError("intensities are constant inside the brain mask")
    out = np.zeros(volume.shape, dtype=np.float32)
    out[mask] = ((values - values.mean()) / std).astype(np.float32)
    return replace(volume, data=out)


def make_case(case_id, flair, t1, lesion_mask=None, brain_mask=None, normalize=True):
    """Bundle raw volumes into a normalized :class:`Case`.

    The brain mask defaults to the nonzero support of the raw FLAIR; the lesion
    mask is binarized at 0.5.
    """
    if brain_mask is None:
        brain = Volume(flair.data != 0, flair.spacing, flair.origin)
    else:
        brain = Volume(np.asarray(brain_mask.data) > 0.5, brain_mask.spacing, brain_mask.origin)
    lesion = None
    if lesion_mask is not None:
        lesion = Volume(np.asarray(lesion_mask.data) > 0.5, lesion_mask.spacing, lesion_mask.origin)
    if normalize:
        flair = zscore_normalize(flair, brain)
        t1 = zscore_normalize(t1, brain)
    return Case(case_id, flair, t1, brain, lesion)


def load_case(flair_path, t1_path, lesion_path=None, brain_mask_path=None, case_id=None):
    paths = {"flair": flair_path, "t1": t1_path, "lesion": lesion_path, "brain": brain_mask_path}
    vols = {k: load_nifti(p) for k, p in paths.items() if p is not None}
    ref = vols["flair"].shape
    for key, vol in vols.items():
        if vol.shape != ref:
            raise ValueError(f"shape mismatch: {paths[key]} has shape {vol.shape}, "
                             f"{flair_path} has shape {ref}")
    if case_id is None:
        case_id = os.path.basename(os.path.dirname(os.path.abspath(flair_path)))
    return make_case(case_id, vols["flair"], vols["t1"], vols.get("lesion"), vols.get("brain"))


CASE_FILES = {"flair": "flair.nii", "t1": "t1.nii", "lesion": "lesion.nii", "brain": "brain.nii"}


def save_case_dir(case, directory, raw=None):
    """Write ``case`` as ``<directory>/<case id>/{flair,t1,lesion,brain}.nii``.

    ``raw`` may hold un-normalized (flair, t1) volumes to store instead of the
    normalized ones.
    """
    d = os.path.join(os.fspath(directory), case.id)
    os.makedirs(d, exist_ok=True)
    flair, t1 = raw if raw is not None else (case.flair, case.t1)
    save_nifti(flair, os.path.join(d, CASE_FILES["flair"]))
    save_nifti(t1, os.path.join(d, CASE_FILES["t1"]))
    save_mask(case.brain_mask, os.path.join(d, CASE_FILES["brain"]))
    if case.lesion_mask is not None:
        save_mask(case.lesion_mask, os.path.join(d, CASE_FILES["lesion"]))
    return d


def load_case_dir(path):
    """Load one case directory written by :func:`save_case_dir`."""
    def opt(name):
        p = os.path.join(path, CASE_FILES[name])
        return p if os.path.exists(p) else None
    return load_case(os.path.join(path, CASE_FILES["flair"]), os.path.join(path, CASE_FILES["t1"]),
                     opt("lesion"), opt("brain"), case_id=os.path.basename(os.path.normpath(path)))


def load_case_set(directory):
    """All case directories under ``directory``, sorted by name."""
    names = sorted(n for n in os.listdir(directory)
                   if os.path.exists(os.path.join(directory, n, CASE_FILES["flair"])))
    return [load_case_dir(os.path.join(directory, n)) for n in names]
