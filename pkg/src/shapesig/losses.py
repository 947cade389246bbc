"""Training losses and evaluation metrics."""

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .autodiff import (Tensor, add, clamp_max, div, mul, no_tape, scale, sqrt,
                       square, sub, sum_all)
from .volume_io import LabelMap

DICE_EPS = 1e-6


def dice_loss(m, m_pred, eps=DICE_EPS):
    """1 - (2 sum(m * p) + eps) / (sum(m) + sum(p) + eps)."""
    if m.shape != m_pred.shape:
        raise ValueError(f"dice_loss: shape mismatch {m.shape} vs {m_pred.shape}")
    inter = sum_all(mul(m, m_pred))
    denom = add(add(sum_all(m), sum_all(m_pred)), eps)
    ratio = div(add(scale(inter, 2.0), eps), denom)
    return sub(1.0, ratio)


def signature_distance(s1, s2):
    """Euclidean norm of the difference of two signatures (gradient 0 at equality)."""
    if s1.shape != s2.shape:
        raise ValueError(f"signature shapes differ: {s1.shape} vs {s2.shape}")
    return sqrt(sum_all(square(sub(s1, s2))))


def shape_loss(g, m1, m2):
    """||g(m1) - g(m2)||_2 for a shape learner ``g``."""
    if m1.shape != m2.shape:
        raise ValueError(f"shape_loss: shape mismatch {m1.shape} vs {m2.shape}")
    return signature_distance(g(m1), g(m2))


@dataclass
class LossValue:
    value: Tensor
    components: dict = field(default_factory=dict)

    @property
    def total(self):
        return self.value.item()


def total_loss(m, m_pred, g=None, alpha=0.1, cap=1.0):
    """dice + alpha * min(shape, cap).

    With ``alpha == 0`` the value is the Dice loss tensor itself, so the graph
    (and every gradient) is exactly that of Dice-only training; the shape
    term is still evaluated, off-tape, for logging when ``g`` is given.
    """
    dice = dice_loss(m, m_pred)
    comps = {"dice": dice.item(), "shape_raw": float("nan"), "shape_capped": float("nan")}
    if alpha == 0:
        if g is not None:
            with no_tape():
                raw = shape_loss(g, Tensor(m.data), Tensor(m_pred.data)).item()
            comps.update(shape_raw=raw, shape_capped=min(raw, cap))
        comps["total"] = comps["dice"]
        return LossValue(dice, comps)
    if g is None:
        raise ValueError("a shape learner is required when alpha > 0")
    # the ground-truth signature is a constant: compute it off-tape
    with no_tape():
        target = g(Tensor(m.data))
    raw = signature_distance(g(m_pred), target)
    capped = clamp_max(raw, cap)
    value = add(dice, scale(capped, alpha))
    comps.update(shape_raw=raw.item(), shape_capped=capped.item(), total=value.item())
    return LossValue(value, comps)


# --- metrics ---------------------------------------------------------------

def _mask(a):
    return np.asarray(a.data if isinstance(a, LabelMap) else a).astype(bool)


def dice_coefficient(a, b):
    """2|A n B| / (|A| + |B|); two empty maps count as a perfect match."""
    a, b = _mask(a), _mask(b)
    if a.shape != b.shape:
        raise ValueError(f"dice_coefficient: dims differ {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def _directed_hd(a, b, spacing):
    # distance from every voxel to the nearest foreground voxel of b
    dist = ndimage.distance_transform_edt(~b, sampling=spacing)
    return float(dist[a].max())


def hausdorff(a, b, spacing=None):
    """Symmetric Hausdorff distance between foreground voxel centers.

    Exact (Euclidean distance transform); ``spacing`` defaults to the label
    map's own spacing, or 1 voxel.
    """
    if spacing is None:
        spacing = a.spacing if isinstance(a, LabelMap) else (1.0, 1.0, 1.0)
    a, b = _mask(a), _mask(b)
    if a.shape != b.shape:
        raise ValueError(f"hausdorff: dims differ {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise ValueError("hausdorff is undefined for an empty set")
    return max(_directed_hd(a, b, spacing), _directed_hd(b, a, spacing))


def volume_diagonal(dims, spacing=(1.0, 1.0, 1.0)):
    """Largest possible distance between two voxel centers."""
    return float(np.sqrt(sum(((n - 1) * s) ** 2 for n, s in zip(dims, spacing))))


@dataclass
class MetricsRecord:
    case_id: str
    dice_coefficient: float
    hausdorff: float
    shape_loss: float


def summarize(records):
    n = len(records)
    if n == 0:
        raise ValueError("no records to summarize")
    return MetricsRecord(
        "mean",
        sum(r.dice_coefficient for r in records) / n,
        sum(r.hausdorff for r in records) / n,
        sum(r.shape_loss for r in records) / n,
    )


def write_metrics_csv(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case_id", "dice", "hausdorff", "shape_loss"])
        for r in list(records) + [summarize(records)]:
            w.writerow([r.case_id, repr(float(r.dice_coefficient)),
                        repr(float(r.hausdorff)), repr(float(r.shape_loss))])


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [MetricsRecord(r["case_id"], float(r["dice"]), float(r["hausdorff"]),
                          float(r["shape_loss"])) for r in rows]
