"""Adam, the two training procedures and the evaluation protocols.

Every random choice made at iteration ``i`` comes from a generator seeded by
``(seed, stream, i)``, so runs are reproducible and can be resumed or forked
at any iteration without changing what later iterations see.
"""

import copy
import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .affine3d import AugmentationSpec, apply_affine, make_affine_pair, sample_random_affine
from .autodiff import NonFiniteError, Tape, no_tape
from .losses import (MetricsRecord, dice_coefficient, hausdorff, shape_loss,
                     total_loss, volume_diagonal, write_metrics_csv)
from .nets import (SegNet, SegNetConfig, ShapeLearner, ShapeNetConfig, as_input,
                   load_checkpoint, save_checkpoint)
from .volume_io import LabelMap

__all__ = [
    "AdamState", "adam_step", "ShapeTrainConfig", "SegTrainConfig", "TrainLog",
    "SegTrainState", "TrainingError", "train_shape_learner",
    "evaluate_affine_invariance", "run_phase1", "train_segmenter",
    "evaluate_segmenter", "save_checkpoint", "load_checkpoint",
]

log = logging.getLogger(__name__)

STREAM_SHAPE, STREAM_SEG, STREAM_EVAL_SHAPE = 0, 1, 2
COLLAPSE_EVERY = 10
COLLAPSE_THRESHOLD = 10 * float(np.finfo(np.float32).eps)


class TrainingError(RuntimeError):
    """Training diverged or violated a contract."""


def iteration_rng(seed, stream, index):
    return np.random.default_rng([int(seed), int(stream), int(index)])


# --- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state):
    """One bias-corrected Adam update from each parameter's ``.grad``.

    Gradients are left in place; the caller zeroes them.
    """
    for p in params:
        if p.grad is None:
            raise TrainingError(f"parameter {p.name!r} has no gradient")
        if p.grad.shape != p.shape:
            raise TrainingError(f"gradient of {p.name!r} has shape {p.grad.shape}, expected {p.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for p in params:
        g = p.grad
        m = state.m.setdefault(p.name, np.zeros_like(p.data))
        v = state.v.setdefault(p.name, np.zeros_like(p.data))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# --- logs ----------------------------------------------------------------------

LOG_FIELDS = ("iteration", "dice", "shape_raw", "shape_capped", "total", "ms")


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    checkpoint: str = None
    collapse: list = field(default_factory=list)

    def add(self, iteration, ms, **comps):
        rec = {"iteration": iteration, "ms": ms}
        for k in LOG_FIELDS[1:-1]:
            rec[k] = float(comps.get(k, float("nan")))
        self.records.append(rec)

    def values(self, key):
        return [r[key] for r in self.records]

    def deterministic_view(self):
        """Records without wall-clock times, for reproducibility checks."""
        return [{k: v for k, v in r.items() if k != "ms"} for r in self.records]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_FIELDS)
            for r in self.records:
                w.writerow([r["iteration"]] + [repr(r[k]) for k in LOG_FIELDS[1:-1]]
                           + [f"{r['ms']:.1f}"])


def _guard(value, iteration, comps):
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss at iteration {iteration}: {comps}")


# --- shape learner -------------------------------------------------------------

@dataclass
class ShapeTrainConfig:
    iterations: int = 200
    batch_size: int = 1
    lr: float = 1e-4
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)
    net: ShapeNetConfig = field(default_factory=ShapeNetConfig)
    seed: int = 0

    def __post_init__(self):
        if self.batch_size != 1:
            raise ValueError("only batch size 1 is supported")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


def _label_tensor(label):
    return as_input(label.data)


def _collapse_probe(g, labels):
    # mean signature distance between consecutive distinct subjects, untransformed
    with no_tape():
        sigs = [g(_label_tensor(m)).data for m in labels]
    d = [float(np.sqrt(((a - b) ** 2).sum(dtype=np.float64))) for a, b in zip(sigs, sigs[1:])]
    return float(np.mean(d)) if d else float("nan")


def train_shape_learner(dataset, cfg=None):
    """Fit a shape learner so that affine pairs of one subject share a signature.

    Each iteration samples one training subject uniformly, builds an affine
    pair of its label map, and takes an Adam step on the signature distance.
    """
    cfg = cfg or ShapeTrainConfig()
    train = dataset.train_cases()
    if not train:
        raise ValueError("dataset has no training cases")
    if any(n % 2 ** cfg.net.levels for n in dataset.dims):
        raise ValueError(f"dims {dataset.dims} not divisible by 2^{cfg.net.levels}")
    g = ShapeLearner(cfg.net, seed=cfg.seed)
    state = AdamState(lr=cfg.lr)
    tlog = TrainLog()
    probe = [c.label for c in train[:5]]
    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        rng = iteration_rng(cfg.seed, STREAM_SHAPE, it)
        case = train[int(rng.integers(len(train)))]
        m1, m2 = make_affine_pair(case.label, cfg.augmentation, rng)
        try:
            with Tape() as tape:
                loss = shape_loss(g, _label_tensor(m1), _label_tensor(m2))
                value = loss.item()
                _guard(value, it, {"shape": value})
                tape.backward(loss)
        except NonFiniteError as exc:
            raise TrainingError(f"non-finite value at iteration {it}: {exc}") from exc
        for p in g.params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        adam_step(g.params, state)
        g.zero_grad()
        tlog.add(it, (time.perf_counter() - t0) * 1e3, shape_raw=value, total=value)
        if (it + 1) % COLLAPSE_EVERY == 0:
            spread = _collapse_probe(g, probe)
            collapsed = spread < COLLAPSE_THRESHOLD
            tlog.collapse.append((it + 1, spread, collapsed))
            if collapsed:
                log.warning("shape learner may have collapsed at iteration %d "
                            "(different-subject distance %.3g)", it + 1, spread)
    g.set_trainable(False)
    return g, tlog


def evaluate_affine_invariance(g, dataset, n_pairs=50, seed=0, spec=None, split="test"):
    """Mean signature distance of same-subject vs different-subject affine pairs."""
    cases = dataset.test_cases() if split == "test" else dataset.train_cases()
    if len(cases) < 2:
        raise ValueError("need at least 2 subjects")
    spec = spec or AugmentationSpec()
    same, diff = [], []
    with no_tape():
        for i in range(n_pairs):
            rng = iteration_rng(seed, STREAM_EVAL_SHAPE, i)
            a = int(rng.integers(len(cases)))
            m1, m2 = make_affine_pair(cases[a].label, spec, rng)
            same.append(shape_loss(g, _label_tensor(m1), _label_tensor(m2)).item())
            b = (a + 1 + int(rng.integers(len(cases) - 1))) % len(cases)
            x1, _ = make_affine_pair(cases[a].label, spec, rng)
            x2, _ = make_affine_pair(cases[b].label, spec, rng)
            diff.append(shape_loss(g, _label_tensor(x1), _label_tensor(x2)).item())
    return float(np.mean(same)), float(np.mean(diff))


# --- segmenter -----------------------------------------------------------------

@dataclass
class SegTrainConfig:
    phase1_iters: int = 800
    phase2_iters: int = 400
    alpha: float = 0.1
    cap: float = 1.0
    lr: float = 1e-4
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)
    net: SegNetConfig = field(default_factory=SegNetConfig)
    seed: int = 0

    def __post_init__(self):
        if self.phase1_iters < 0 or self.phase2_iters < 0:
            raise ValueError("phase lengths must be >= 0")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")


@dataclass
class SegTrainState:
    net: SegNet
    adam: AdamState
    iteration: int = 0
    log: TrainLog = field(default_factory=TrainLog)

    def fork(self):
        return copy.deepcopy(self)


def augmented_sample(case, spec, rng):
    """Apply one sampled transform to image (trilinear) and label (nearest)."""
    t = sample_random_affine(spec, rng, case.label.dims)
    return apply_affine(case.image, t, "trilinear"), apply_affine(case.label, t, "nearest")


def _seg_iterations(state, dataset, g, cfg, stop, alpha):
    train = dataset.train_cases()
    net = state.net
    while state.iteration < stop:
        it = state.iteration
        t0 = time.perf_counter()
        rng = iteration_rng(cfg.seed, STREAM_SEG, it)
        case = train[int(rng.integers(len(train)))]
        image, label = augmented_sample(case, cfg.augmentation, rng)
        try:
            with Tape() as tape:
                pred = net(as_input(image.data))
                lv = total_loss(_label_tensor(label), pred, g, alpha, cfg.cap)
                _guard(lv.total, it, lv.components)
                tape.backward(lv.value)
        except NonFiniteError as exc:
            raise TrainingError(f"non-finite value at iteration {it}: {exc}") from exc
        adam_step(net.params, state.adam)
        net.zero_grad()
        state.log.add(it, (time.perf_counter() - t0) * 1e3, **lv.components)
        state.iteration += 1
    return state


def _check_ready(dataset, g, cfg):
    if not dataset.train:
        raise ValueError("dataset has no training cases")
    factor = 2 ** cfg.net.depth
    if g is not None:
        factor = max(factor, g.factor)
    if any(n % factor for n in dataset.dims):
        raise ValueError(f"dims {dataset.dims} not divisible by {factor}")


def run_phase1(dataset, cfg, g=None):
    """Dice-only training for ``cfg.phase1_iters`` iterations.

    ``g`` is optional and only used to log the (untrained-on) shape loss.
    """
    _check_ready(dataset, g, cfg)
    net = SegNet(cfg.net, seed=cfg.seed)
    state = SegTrainState(net, AdamState(lr=cfg.lr))
    with _frozen(g):
        return _seg_iterations(state, dataset, g, cfg, cfg.phase1_iters, 0.0)


class _frozen:
    """Exclude a shape learner from training and verify it is left untouched."""

    def __init__(self, g):
        self.g = g

    def __enter__(self):
        if self.g is not None:
            self.flags = [p.requires_grad for p in self.g.params]
            self.before = [p.data.tobytes() for p in self.g.params]
            self.g.set_trainable(False)
        return self.g

    def __exit__(self, *exc):
        if self.g is None:
            return False
        for p, flag in zip(self.g.params, self.flags):
            p.requires_grad = flag
        if exc[0] is None and any(p.data.tobytes() != b for p, b in zip(self.g.params, self.before)):
            raise TrainingError("shape learner parameters changed during segmenter training")
        return False


def train_segmenter(dataset, g_frozen, cfg=None, phase1=None):
    """Two-phase training: Dice only, then Dice plus capped shape loss.

    ``phase1`` may be a state returned by :func:`run_phase1` with the same
    config; it is forked, so one phase-1 run can seed several phase-2 runs.
    Optimizer state carries over between phases.
    """
    cfg = cfg or SegTrainConfig()
    if cfg.alpha > 0 and g_frozen is None:
        raise ValueError("a trained shape learner is required when alpha > 0")
    _check_ready(dataset, g_frozen, cfg)
    if phase1 is None:
        state = run_phase1(dataset, cfg, g_frozen)
    else:
        if phase1.iteration != cfg.phase1_iters:
            raise ValueError(f"phase-1 state is at iteration {phase1.iteration}, "
                             f"config expects {cfg.phase1_iters}")
        state = phase1.fork()
    with _frozen(g_frozen):
        _seg_iterations(state, dataset, g_frozen, cfg,
                        cfg.phase1_iters + cfg.phase2_iters, cfg.alpha)
    return state.net, state.log


def predict(net, image):
    with no_tape():
        return net(as_input(image.data)).data[0, 0]


def evaluate_segmenter(net, dataset, g, predictions=None, csv_path=None, split="test"):
    """Per-case Dice, Hausdorff and shape loss on thresholded predictions.

    ``predictions`` optionally maps subject_id to a soft (or binary) prediction
    array, replacing the network's output. An empty thresholded prediction
    gets the volume diagonal as its Hausdorff distance.
    """
    cases = dataset.test_cases() if split == "test" else dataset.train_cases()
    if not cases:
        raise ValueError("no cases to evaluate")
    records = []
    for case in cases:
        if predictions is not None:
            soft = np.asarray(predictions[case.subject_id], dtype=np.float32)
        else:
            soft = predict(net, case.image)
        binary = LabelMap((soft >= 0.5).astype(np.uint8), case.label.spacing)
        dice = dice_coefficient(case.label, binary)
        if binary.is_empty():
            hd = volume_diagonal(case.label.dims, case.label.spacing)
        else:
            hd = hausdorff(case.label, binary)
        sl = float("nan")
        if g is not None:
            with no_tape():
                sl = shape_loss(g, _label_tensor(case.label), as_input(soft)).item()
        records.append(MetricsRecord(f"subject_{case.subject_id:03d}", dice, hd, sl))
    if csv_path is not None:
        write_metrics_csv(csv_path, records)
    return records
