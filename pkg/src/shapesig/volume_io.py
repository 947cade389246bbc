"""Volumes, label maps, the RVF file format and intensity preprocessing.

RVF layout (all multibyte fields little-endian, no padding)::

    offset  size  field
    0       4     magic b"RVF1"
    4       1     dtype (0 = u8 labels, 1 = f32 intensities)
    5       12    dims: depth, height, width as u32
    17      12    spacing: sz, sy, sx as f32
    29      ...   payload, row-major with width fastest
"""

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"RVF1"
HEADER = struct.Struct("<4sB3I3f")
DTYPE_LABEL = 0
DTYPE_F32 = 1
MAX_DIM = 4096


class RvfError(ValueError):
    """Base class for malformed RVF files."""


class BadMagicError(RvfError):
    pass


class TruncatedError(RvfError):
    pass


class UnknownDtypeError(RvfError):
    pass


class LabelDomainError(RvfError):
    """A label payload holds a value outside {0, 1}."""


def _spacing(spacing):
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or min(spacing) <= 0:
        raise ValueError(f"spacing must be three positive values, got {spacing}")
    return spacing


@dataclass(eq=False)
class Volume:
    """A 3D float32 scalar field, axes (depth, height, width)."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"Volume data must be 3-D, got shape {self.data.shape}")
        self.spacing = _spacing(self.spacing)

    @property
    def dims(self):
        return self.data.shape

    def __eq__(self, other):
        return (type(self) is type(other) and self.spacing == other.spacing
                and self.data.shape == other.data.shape
                and self.data.tobytes() == other.data.tobytes())


@dataclass(eq=False)
class LabelMap(Volume):
    """A binary 3D label map stored as uint8."""

    spacing: tuple = field(default=(1.0, 1.0, 1.0))

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.dtype == bool:
            arr = arr.astype(np.uint8)
        if arr.ndim != 3:
            raise ValueError(f"LabelMap data must be 3-D, got shape {arr.shape}")
        if not np.isin(arr, (0, 1)).all():
            raise LabelDomainError("label map values must be 0 or 1")
        self.data = np.ascontiguousarray(arr, dtype=np.uint8)
        self.spacing = _spacing(self.spacing)

    @property
    def count(self):
        return int(self.data.sum(dtype=np.int64))

    def is_empty(self):
        return not self.data.any()


def write_rvf(path, obj):
    if isinstance(obj, LabelMap):
        code, payload = DTYPE_LABEL, obj.data.astype("<u1")
    elif isinstance(obj, Volume):
        code, payload = DTYPE_F32, obj.data.astype("<f4")
    else:
        raise TypeError(f"cannot write {type(obj).__name__} as RVF")
    header = HEADER.pack(MAGIC, code, *obj.dims, *obj.spacing)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def read_rvf(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER.size:
        if raw[:4] != MAGIC[:len(raw[:4])]:
            raise BadMagicError(f"{path}: not an RVF file")
        raise TruncatedError(f"{path}: header is {len(raw)} bytes, need {HEADER.size}")
    magic, code, d, h, w, sz, sy, sx = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if code not in (DTYPE_LABEL, DTYPE_F32):
        raise UnknownDtypeError(f"{path}: unknown dtype code {code}")
    for n in (d, h, w):
        if not 1 <= n <= MAX_DIM:
            raise RvfError(f"{path}: dimension {n} outside [1, {MAX_DIM}]")
    itemsize = 1 if code == DTYPE_LABEL else 4
    expected = d * h * w * itemsize
    payload = raw[HEADER.size:]
    if len(payload) != expected:
        raise TruncatedError(f"{path}: payload is {len(payload)} bytes, header implies {expected}")
    spacing = (sz, sy, sx)
    if code == DTYPE_LABEL:
        arr = np.frombuffer(payload, dtype="<u1").reshape(d, h, w)
        if arr.max(initial=0) > 1:
            raise LabelDomainError(f"{path}: label payload has values outside {{0,1}}")
        return LabelMap(arr.copy(), spacing)
    arr = np.frombuffer(payload, dtype="<f4").reshape(d, h, w)
    return Volume(arr.astype(np.float32), spacing)


def normalize_intensity(v):
    """Shift and scale to zero mean and unit population standard deviation."""
    data = v.data.astype(np.float64)
    std = data.std()
    if std <= 1e-8:
        raise ValueError("cannot normalize a constant volume")
    out = (data - data.mean()) / std
    return Volume(out.astype(np.float32), v.spacing)


def binarize_and_crop(labels, target_label, region=None):
    """Select one integer label and crop to a fixed box.

    ``region`` is ``((z0, z1), (y0, y1), (x0, x1))`` with half-open bounds;
    ``None`` keeps the full extent. An absent label only warns and yields an
    empty map; the caller decides whether that is fatal.
    """
    data = np.asarray(labels.data if isinstance(labels, Volume) else labels)
    spacing = labels.spacing if isinstance(labels, Volume) else (1.0, 1.0, 1.0)
    if region is None:
        region = tuple((0, n) for n in data.shape)
    if len(region) != 3:
        raise ValueError("region needs one (start, stop) pair per axis")
    for (lo, hi), n in zip(region, data.shape):
        if not 0 <= lo < hi <= n:
            raise ValueError(f"region {region} is outside volume dims {data.shape}")
    box = tuple(slice(lo, hi) for lo, hi in region)
    mask = np.rint(data[box]).astype(np.int64) == int(target_label)
    if not mask.any():
        warnings.warn(f"label {target_label} does not occur in the cropped region", stacklevel=2)
    return LabelMap(mask.astype(np.uint8), spacing)
