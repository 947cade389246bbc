"""Procedural "subjects": one binary structure per volume plus a rendered image.

Every subject of a dataset shares a shape family but draws its own radii,
taper and bend, so masks are similar without being identical. All randomness
flows from ``(master_seed, subject_id)``.
"""

import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volume_io import LabelMap, Volume, normalize_intensity, read_rvf, write_rvf

FAMILIES = ("ellipsoid_with_tail", "crescent", "lobed_blob")
REFERENCE_EXTENT = 48.0
MAX_FILL = 0.70


class ShapeBoundsError(ValueError):
    """The rasterized shape does not fit the volume."""


@dataclass
class SubjectSpec:
    subject_id: int
    base_shape: str = "ellipsoid_with_tail"
    deform_params: dict = field(default_factory=dict)
    noise_sigma: float = 0.1
    contrast: float = 1.0
    background: float = 0.3
    smoothing: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.base_shape not in FAMILIES:
            raise ValueError(f"unknown shape family {self.base_shape!r}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    @classmethod
    def sample(cls, master_seed, subject_id, base_shape="ellipsoid_with_tail", **render):
        rng = np.random.default_rng([int(master_seed), int(subject_id), 0])
        return cls(subject_id, base_shape, _sample_deform(base_shape, rng),
                   seed=int(master_seed), **render)


def _sample_deform(family, rng):
    u = rng.uniform
    if family == "ellipsoid_with_tail":
        return {
            "radii": [u(8.0, 11.0), u(5.0, 7.5), u(5.0, 7.0)],
            "center": [u(-2.0, 2.0), u(-2.0, 2.0), u(-2.0, 2.0)],
            "tail_length": u(9.0, 14.0),
            "tail_radius": u(2.5, 4.0),
            "tail_bend": u(-5.0, 5.0),
            "tail_sweep": u(-3.0, 3.0),
        }
    if family == "crescent":
        return {
            "major_radius": u(9.0, 10.5),
            "minor_radius": u(3.5, 4.5),
            "arc_deg": u(110.0, 140.0),
            "taper": u(0.3, 0.8),
            "center": [u(-1.0, 1.0), u(-1.0, 1.0), u(-1.0, 1.0)],
            "tilt": u(-0.15, 0.15),
        }
    return {
        "radius": u(8.0, 10.0),
        "lobe_amplitudes": [u(0.1, 0.25) for _ in range(3)],
        "lobe_orders": [int(rng.integers(2, 5)) for _ in range(3)],
        "lobe_phases": [u(0, 2 * np.pi) for _ in range(3)],
        "center": [u(-2.0, 2.0), u(-2.0, 2.0), u(-2.0, 2.0)],
    }


def _grid(dims, scale, center):
    # voxel-center coordinates relative to the volume center, in reference units
    axes = [(np.arange(n, dtype=np.float64) - (n - 1) / 2) / scale - c
            for n, c in zip(dims, center)]
    return np.meshgrid(*axes, indexing="ij")


def _ellipsoid_with_tail(z, y, x, p):
    rz, ry, rx = p["radii"]
    body = (z / rz) ** 2 + (y / ry) ** 2 + (x / rx) ** 2 <= 1.0
    length = p.get("tail_length", 0.0)
    if length <= 0:
        return body
    # tapered bent cone leaving the body downward (+z), radius -> 0 at the tip
    z0 = 0.6 * rz
    t = (z - z0) / length
    on = (t >= 0) & (t <= 1)
    yc = p["tail_bend"] * t ** 2
    xc = p["tail_sweep"] * t ** 2
    r = p["tail_radius"] * (1 - t)
    tail = on & ((y - yc) ** 2 + (x - xc) ** 2 <= r ** 2)
    return body | tail


def _crescent(z, y, x, p):
    tilt = p["tilt"]
    zr = z * np.cos(tilt) - x * np.sin(tilt)
    xr = z * np.sin(tilt) + x * np.cos(tilt)
    phi = np.arctan2(y, zr)
    half = np.radians(p["arc_deg"]) / 2
    rho = np.hypot(zr, y) - p["major_radius"]
    frac = np.clip(np.abs(phi) / half, 0, 1)
    r = p["minor_radius"] * (1 - (1 - p["taper"]) * frac ** 2)
    return (np.abs(phi) <= half) & (rho ** 2 + xr ** 2 <= r ** 2)


def _lobed_blob(z, y, x, p):
    rad = np.sqrt(z ** 2 + y ** 2 + x ** 2)
    theta = np.arccos(np.clip(z / np.maximum(rad, 1e-12), -1, 1))
    phi = np.arctan2(y, x)
    mod = 1.0
    for a, n, ph in zip(p["lobe_amplitudes"], p["lobe_orders"], p["lobe_phases"]):
        mod = mod + a * np.cos(n * phi + ph) * np.sin(theta)
    return rad <= p["radius"] * mod


_SHAPES = {
    "ellipsoid_with_tail": _ellipsoid_with_tail,
    "crescent": _crescent,
    "lobed_blob": _lobed_blob,
}


def rasterize(spec, dims):
    dims = tuple(int(n) for n in dims)
    if min(dims) < 16:
        raise ValueError(f"dims must each be >= 16, got {dims}")
    scale = min(dims) / REFERENCE_EXTENT
    z, y, x = _grid(dims, scale, spec.deform_params.get("center", (0, 0, 0)))
    mask = _SHAPES[spec.base_shape](z, y, x, spec.deform_params)
    if not mask.any():
        raise ShapeBoundsError(f"subject {spec.subject_id}: shape is empty")
    idx = np.argwhere(mask)
    span = idx.max(0) - idx.min(0) + 1
    border = (idx.min(0) == 0) | (idx.max(0) == np.asarray(dims) - 1)
    if (span > MAX_FILL * np.asarray(dims)).any() or border.any():
        raise ShapeBoundsError(
            f"subject {spec.subject_id}: shape spans {span.tolist()} in {dims}")
    return mask.astype(np.uint8)


def _background_field(dims, rng, amplitude):
    field_ = np.zeros(dims)
    grids = np.meshgrid(*[np.arange(n) / n for n in dims], indexing="ij")
    for _ in range(3):
        k = rng.integers(0, 3, size=3)
        if not k.any():
            k[rng.integers(0, 3)] = 1
        phase = rng.uniform(0, 2 * np.pi)
        field_ += np.cos(2 * np.pi * sum(ki * g for ki, g in zip(k, grids)) + phase)
    return amplitude * field_ / 3


def generate_subject(spec, dims):
    """Rasterize the subject's label and render its intensity image.

    image = contrast * smoothed(label) + N(0, noise_sigma) + background field
    """
    label = rasterize(spec, dims)
    rng = np.random.default_rng([spec.seed, spec.subject_id, 1])
    if spec.smoothing > 0:
        image = ndimage.gaussian_filter(label.astype(np.float64), spec.smoothing)
    else:
        image = label.astype(np.float64)
    image = spec.contrast * image
    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, size=label.shape)
    if spec.background > 0:
        image = image + _background_field(label.shape, rng, spec.background)
    return Volume(image.astype(np.float32)), LabelMap(label)


@dataclass
class Case:
    image: Volume
    label: LabelMap
    subject_id: int


@dataclass
class Dataset:
    cases: list
    train: list
    test: list
    family: str = "ellipsoid_with_tail"

    def __post_init__(self):
        if set(self.train) & set(self.test):
            raise ValueError("train and test splits overlap")
        for c in self.cases:
            if c.label.is_empty():
                raise ValueError(f"subject {c.subject_id} has an empty label")

    @property
    def dims(self):
        return self.cases[0].label.dims

    def train_cases(self):
        return [self.cases[i] for i in self.train]

    def test_cases(self):
        return [self.cases[i] for i in self.test]


def generate_dataset(n_subjects, dims, master_seed, split_frac=0.8,
                     family="ellipsoid_with_tail", **render):
    """Deterministic dataset of ``n_subjects`` intensity-normalized cases.

    The first ``round(split_frac * n)`` subjects form the training split.
    """
    if n_subjects < 4:
        raise ValueError("need at least 4 subjects")
    if not 0 < split_frac < 1:
        raise ValueError("split_frac must lie in (0, 1)")
    if np.isscalar(dims):
        dims = (int(dims),) * 3
    cases = []
    for sid in range(n_subjects):
        spec = SubjectSpec.sample(master_seed, sid, family, **render)
        image, label = generate_subject(spec, dims)
        cases.append(Case(normalize_intensity(image), label, sid))
    n_train = min(max(int(round(split_frac * n_subjects)), 1), n_subjects - 1)
    return Dataset(cases, list(range(n_train)), list(range(n_train, n_subjects)), family)


MANIFEST = "manifest.txt"


def save_dataset(ds, directory):
    """Write RVF files and a manifest: ``subject_id image label split`` per line."""
    os.makedirs(directory, exist_ok=True)
    split = {i: "train" for i in ds.train} | {i: "test" for i in ds.test}
    lines = [f"# family {ds.family}"]
    for i, c in enumerate(ds.cases):
        img = f"subject_{c.subject_id:03d}_image.rvf"
        lab = f"subject_{c.subject_id:03d}_label.rvf"
        write_rvf(os.path.join(directory, img), c.image)
        write_rvf(os.path.join(directory, lab), c.label)
        lines.append(f"{c.subject_id} {img} {lab} {split[i]}")
    with open(os.path.join(directory, MANIFEST), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(directory):
    cases, train, test = [], [], []
    family = "ellipsoid_with_tail"
    with open(os.path.join(directory, MANIFEST)) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 2 and parts[0] == "family":
                    family = parts[1]
                continue
            sid, img, lab, split = line.split()
            image = read_rvf(os.path.join(directory, img))
            label = read_rvf(os.path.join(directory, lab))
            if not isinstance(label, LabelMap):
                raise ValueError(f"{lab} is not a label file")
            (train if split == "train" else test).append(len(cases))
            cases.append(Case(image, label, int(sid)))
    return Dataset(cases, train, test, family)
