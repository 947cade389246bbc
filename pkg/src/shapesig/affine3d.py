"""Affine transforms, pull resampling and affine-pair sampling.

Coordinates are continuous voxel indices in array axis order
(depth, height, width), measured from the volume center. A transform maps
*output* coordinates to *input* coordinates, so resampling pulls values and
never leaves holes.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume_io import LabelMap, Volume


class AffinePairError(RuntimeError):
    """The structure kept leaving the volume under the sampled transforms."""


class AffineTransform:
    __slots__ = ("m",)

    def __init__(self, m):
        m = np.array(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"affine matrix must be 4x4, got {m.shape}")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("last row of an affine matrix must be [0, 0, 0, 1]")
        if abs(np.linalg.det(m[:3, :3])) <= 1e-9:
            raise ValueError("affine transform is singular")
        self.m = m

    @classmethod
    def identity(cls):
        return cls(np.eye(4))

    @classmethod
    def translation(cls, t):
        m = np.eye(4)
        m[:3, 3] = t
        return cls(m)

    @classmethod
    def scaling(cls, s):
        m = np.eye(4)
        m[:3, :3] *= s
        return cls(m)

    @classmethod
    def rotation(cls, axis, angle_rad):
        m = np.eye(4)
        m[:3, :3] = rotation_matrix(axis, angle_rad)
        return cls(m)

    def inverse(self):
        return AffineTransform(np.linalg.inv(self.m))

    def is_identity(self):
        return np.array_equal(self.m, np.eye(4))

    def decompose(self):
        """Return (scale, rotation angle in degrees, translation) for a similarity."""
        a = self.m[:3, :3]
        s = np.cbrt(np.linalg.det(a))
        r = a / s
        cos = np.clip((np.trace(r) - 1) / 2, -1.0, 1.0)
        return float(s), float(np.degrees(np.arccos(cos))), self.m[:3, 3].copy()

    def __repr__(self):
        return f"AffineTransform({self.m.tolist()})"


def rotation_matrix(axis, angle):
    """Rodrigues rotation about a unit axis."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def compose(t1, t2):
    """Transform equivalent to resampling with ``t2`` first, then ``t1``."""
    return AffineTransform(t2.m @ t1.m)


@dataclass(frozen=True)
class AugmentationSpec:
    max_rotation_deg: float = 8.0
    scale_range: tuple = (0.85, 1.15)
    max_translation_frac: float = 0.10
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 <= self.max_rotation_deg < 90:
            raise ValueError("max_rotation_deg must lie in [0, 90)")
        if not 0 < lo <= hi:
            raise ValueError("scale_range must satisfy 0 < lo <= hi")
        if not 0 <= self.max_translation_frac < 0.5:
            raise ValueError("max_translation_frac must lie in [0, 0.5)")

    @classmethod
    def degenerate(cls, seed=0):
        return cls(0.0, (1.0, 1.0), 0.0, seed)


def augmentation_rng(seed, index):
    """Generator for sample ``index`` of the augmentation stream ``seed``."""
    return np.random.default_rng([int(seed), int(index)])


def sample_random_affine(spec, rng, dims):
    """Translation . Rotation . isotropic Scale about the volume center.

    The rotation axis is uniform on the sphere and the angle uniform in
    ``[0, max_rotation_deg]``; translation is uniform within
    ``±max_translation_frac`` of each extent of ``dims``.
    """
    axis = rng.standard_normal(3)
    while np.linalg.norm(axis) < 1e-12:
        axis = rng.standard_normal(3)
    angle = np.radians(rng.uniform(0.0, spec.max_rotation_deg))
    s = rng.uniform(*spec.scale_range)
    frac = rng.uniform(-spec.max_translation_frac, spec.max_translation_frac, size=3)
    m = np.eye(4)
    m[:3, :3] = rotation_matrix(axis, angle) * s
    m[:3, 3] = frac * np.asarray(dims, dtype=np.float64)
    return AffineTransform(m)


def apply_affine(v, t, interp=None):
    """Pull-resample ``v`` through ``t`` with zero fill outside the input.

    Label maps always use nearest-neighbour; volumes default to trilinear.
    """
    is_label = isinstance(v, LabelMap)
    if interp is None:
        interp = "nearest" if is_label else "trilinear"
    if interp not in ("nearest", "trilinear"):
        raise ValueError(f"unknown interpolation {interp!r}")
    if is_label and interp != "nearest":
        raise ValueError("label maps must be resampled with nearest-neighbour")
    if t.is_identity():
        return type(v)(v.data.copy(), v.spacing)
    a = t.m[:3, :3]
    c = (np.asarray(v.dims, dtype=np.float64) - 1) / 2
    # input = A (out - c) + t + c
    offset = t.m[:3, 3] + c - a @ c
    order = 0 if interp == "nearest" else 1
    src = v.data if is_label else v.data.astype(np.float64)
    out = ndimage.affine_transform(src, a, offset=offset, output_shape=v.dims,
                                   order=order, mode="constant", cval=0.0, prefilter=False)
    if is_label:
        return LabelMap(out.astype(np.uint8), v.spacing)
    return Volume(out.astype(np.float32), v.spacing)


def make_affine_pair(m, spec, rng, retries=5):
    """Two independently transformed copies of one label map."""
    if m.is_empty():
        raise ValueError("cannot build an affine pair from an empty label map")
    out = []
    for _ in range(2):
        for _attempt in range(retries + 1):
            moved = apply_affine(m, sample_random_affine(spec, rng, m.dims))
            if not moved.is_empty():
                out.append(moved)
                break
        else:
            raise AffinePairError(f"foreground lost after {retries} retries")
    return out[0], out[1]
