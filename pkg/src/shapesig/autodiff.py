"""Dense tensors with a reverse-mode differentiation tape.

Operations are recorded only while a :class:`Tape` is active and at least one
operand requires a gradient. Outside a tape every op is a plain numpy
computation, which is how frozen networks and evaluation code run.

Example
-------
>>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
>>> with Tape() as tape:
...     loss = sum_all(square(x))
...     tape.backward(loss)
>>> x.grad
array([2., 4., 6.], dtype=float32)
"""

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import _conv

__all__ = [
    "Tensor", "Parameter", "Tape", "GradCheckReport",
    "NonFiniteError", "TapeError", "NonDeterministicError",
    "apply_op", "backward", "no_tape", "finite_difference_check",
    "conv3d", "conv_transpose3d", "concat_channels",
    "relu", "sigmoid", "add", "sub", "mul", "div", "square", "sqrt", "scale",
    "clamp_max", "sum_all", "mean_all",
]


class NonFiniteError(FloatingPointError):
    """A forward value became NaN or infinite."""


class TapeError(RuntimeError):
    pass


class NonDeterministicError(RuntimeError):
    pass


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(np.float32)


class Tensor:
    """An n-dimensional float array that can take part in a tape.

    ``data`` keeps its dtype (float32 for training, float64 inside the
    gradient checker); everything else is cast to float32.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class Parameter(Tensor):
    """A named trainable tensor."""

    __slots__ = ("name",)

    def __init__(self, name, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass
class _Record:
    parents: tuple
    backward: object


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; tapes nest and the innermost one records.
    A tape supports exactly one backward traversal.
    """

    _stack = []

    def __init__(self):
        self.records = []
        self.consumed = False

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.remove(self)
        return False

    @classmethod
    def active(cls):
        return cls._stack[-1] if cls._stack else None

    def backward(self, loss):
        if loss.node is None or loss.node[0] is not self:
            raise TapeError("loss was not produced on this tape")
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise TapeError("backward already ran on this tape; run a new forward pass")
        self.consumed = True
        grads = {loss.node[1]: np.ones_like(loss.data)}
        for idx in range(loss.node[1], -1, -1):
            g = grads.pop(idx, None)
            if g is None:
                continue
            rec = self.records[idx]
            parent_grads = rec.backward(g)
            for parent, pg in zip(rec.parents, parent_grads):
                if pg is None or not isinstance(parent, Tensor):
                    continue
                pg = flush_subnormal(pg)
                if parent.node is not None and parent.node[0] is self:
                    pidx = parent.node[1]
                    grads[pidx] = grads[pidx] + pg if pidx in grads else pg
                elif parent.requires_grad:
                    _accumulate(parent, pg)


def flush_subnormal(g):
    """Zero out subnormal floats, as hardware flush-to-zero modes do.

    Saturated sigmoids emit gradients below the smallest normal float32;
    carried into the convolutions they slow matrix products down severalfold.
    """
    g = np.asarray(g)
    if g.dtype.kind != "f" or g.ndim == 0:
        return g
    tiny = np.finfo(g.dtype).tiny
    sub = np.abs(g) < tiny
    if sub.any():
        g = np.where(sub, 0, g).astype(g.dtype, copy=False)
    return g


def _accumulate(t, g):
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


@contextmanager
def no_tape():
    """Suspend recording; ops inside run as plain numpy computations."""
    saved = Tape._stack[:]
    Tape._stack.clear()
    try:
        yield
    finally:
        Tape._stack[:] = saved


def backward(loss):
    """Backpropagate ``loss`` through the tape that produced it."""
    if loss.node is None:
        raise TapeError("loss is not attached to a tape (was a Tape active?)")
    loss.node[0].backward(loss)


def _check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced a non-finite value")


def apply_op(data, parents, backward_fn, name="op"):
    """Wrap ``data`` as the output of an op and record it if needed.

    ``backward_fn(grad_out)`` must return one gradient (or None) per parent.
    """
    data = np.asarray(data)
    _check_finite(data, name)
    out = Tensor(data)
    tape = Tape.active()
    if tape is not None and any(
        isinstance(p, Tensor) and (p.requires_grad or p.node is not None) for p in parents
    ):
        tape.records.append(_Record(tuple(parents), backward_fn))
        out.node = (tape, len(tape.records) - 1)
    return out


def _tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _broadcast_pair(a, b, op):
    if a.shape == b.shape or a.data.size == 1 or b.data.size == 1:
        return
    raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} (only scalar broadcast is supported)")


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# --- elementwise ---------------------------------------------------------

def add(a, b):
    a, b = _tensor(a, b if isinstance(b, Tensor) else None), _tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_pair(a, b, "add")
    sa, sb = a.shape, b.shape
    return apply_op(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)), "add")


def sub(a, b):
    a, b = _tensor(a, b if isinstance(b, Tensor) else None), _tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_pair(a, b, "sub")
    sa, sb = a.shape, b.shape
    return apply_op(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)), "sub")


def mul(a, b):
    a, b = _tensor(a, b if isinstance(b, Tensor) else None), _tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_pair(a, b, "mul")
    ad, bd = a.data, b.data
    return apply_op(
        ad * bd, (a, b),
        lambda g: (_reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)),
        "mul",
    )


def div(a, b):
    a, b = _tensor(a, b if isinstance(b, Tensor) else None), _tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_pair(a, b, "div")
    ad, bd = a.data, b.data
    return apply_op(
        ad / bd, (a, b),
        lambda g: (_reduce_to(g / bd, ad.shape), _reduce_to(-g * ad / (bd * bd), bd.shape)),
        "div",
    )


def scale(x, c):
    c = float(c)
    return apply_op(x.data * x.data.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),), "scale")


def square(x):
    xd = x.data
    return apply_op(xd * xd, (x,), lambda g: (2 * g * xd,), "square")


def sqrt(x):
    """Elementwise square root. The gradient at exactly 0 is taken as 0."""
    xd = x.data
    if (xd < 0).any():
        raise ValueError("sqrt of a negative value")
    out = np.sqrt(xd)

    def bw(g):
        safe = np.where(out > 0, out, 1)
        return (np.where(out > 0, g / (2 * safe), 0).astype(g.dtype, copy=False),)

    return apply_op(out, (x,), bw, "sqrt")


def relu(x):
    xd = x.data
    mask = xd > 0
    return apply_op(np.where(mask, xd, 0).astype(xd.dtype, copy=False), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x):
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1 / (1 + e), e / (1 + e)).astype(xd.dtype, copy=False)
    return apply_op(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def clamp_max(x, c):
    """min(x, c) with gradient 1 below ``c`` and exactly 0 at or above it."""
    xd = x.data
    below = xd < c
    out = np.where(below, xd, xd.dtype.type(c))
    return apply_op(out, (x,), lambda g: (g * below,), "clamp_max")


# --- reductions ----------------------------------------------------------

def sum_all(x):
    shape = x.shape
    return apply_op(np.asarray(x.data.sum(dtype=x.dtype)), (x,),
                    lambda g: (np.broadcast_to(g, shape),), "sum_all")


def mean_all(x):
    shape, n = x.shape, x.data.size
    return apply_op(np.asarray(x.data.mean(dtype=x.dtype)), (x,),
                    lambda g: (np.broadcast_to(g / n, shape),), "mean_all")


# --- structure -----------------------------------------------------------

def concat_channels(a, b):
    if a.data.ndim != b.data.ndim or a.shape[:1] + a.shape[2:] != b.shape[:1] + b.shape[2:]:
        raise ValueError(f"concat_channels: non-channel extents differ {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return apply_op(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]), "concat_channels")


def _conv_checks(x, w, b, stride, out_channels_axis, in_channels_axis, op):
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ValueError(f"{op}: expected 5-D input and weight, got {x.shape} and {w.shape}")
    k = w.shape[2]
    if w.shape[2:] != (k, k, k) or k < 1:
        raise ValueError(f"{op}: kernel must be cubic, got {w.shape[2:]}")
    if x.shape[1] != w.shape[in_channels_axis]:
        raise ValueError(f"{op}: input has {x.shape[1]} channels, weight expects {w.shape[in_channels_axis]}")
    if b is not None and b.shape != (w.shape[out_channels_axis],):
        raise ValueError(f"{op}: bias shape {b.shape} does not match {w.shape[out_channels_axis]} output channels")
    if stride < 1:
        raise ValueError(f"{op}: stride must be >= 1")
    return k


def _add_bias(out, b):
    if b is not None:
        out += b.data.reshape(1, -1, 1, 1, 1).astype(out.dtype, copy=False)
    return out


def conv3d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation over the three spatial axes of a (B, C, D, H, W) tensor."""
    k = _conv_checks(x, w, b, stride, 0, 1, "conv3d")
    spatial = x.shape[2:]
    ext = [_conv.out_extent(n, k, stride, padding) for n in spatial]
    if min(ext) < 1:
        raise ValueError(f"conv3d: non-positive output extent {ext}")
    xd, wd = x.data, w.data
    out = _add_bias(_conv.conv3d_forward(xd, wd, stride, padding), b)

    def bw(g):
        gx = _conv.conv3d_input_grad(g, wd, stride, padding, spatial)
        gw = _conv.conv3d_weight_grad(xd, g, k, stride, padding)
        gb = g.sum(axis=(0, 2, 3, 4)) if b is not None else None
        return gx, gw, gb

    return apply_op(out, (x, w, b), bw, "conv3d")


def conv_transpose3d(x, w, b=None, stride=1, padding=0):
    """Transposed convolution; weight is laid out (C_in, C_out, k, k, k).

    Its forward pass is exactly the input-gradient of :func:`conv3d` run with
    the same weight, stride and padding.
    """
    k = _conv_checks(x, w, b, stride, 1, 0, "conv_transpose3d")
    ext = tuple(_conv.transpose_extent(n, k, stride, padding) for n in x.shape[2:])
    if min(ext) < 1:
        raise ValueError(f"conv_transpose3d: non-positive output extent {ext}")
    xd, wd = x.data, w.data
    out = _add_bias(_conv.conv3d_input_grad(xd, wd, stride, padding, ext), b)

    def bw(g):
        gx = _conv.conv3d_forward(g, wd, stride, padding)
        # the weight acts on g the way a conv3d weight acts on its input
        gw = _conv.conv3d_weight_grad(g, xd, k, stride, padding)
        gb = g.sum(axis=(0, 2, 3, 4)) if b is not None else None
        return gx, gw, gb

    return apply_op(out, (x, w, b), bw, "conv_transpose3d")


# --- gradient checking ---------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    n_checked: int
    per_param: dict = field(default_factory=dict)
    n_excluded: int = 0

    @property
    def passed(self):
        return self.max_rel_error <= self.tol


def finite_difference_check(f, params, eps=1e-4, tol=1e-3, dtype=np.float32,
                            max_elements=None, seed=0, floor_frac=1e-3, kink_guard=False):
    """Compare tape gradients of ``f`` against central differences.

    ``f`` takes no arguments and returns a scalar Tensor built from
    ``params``. The analytic gradient is taken with the parameters cast to
    ``dtype``; the finite-difference reference is always evaluated in float64.

    The relative error of element i is ``|a - n| / max(|a|, |n|, floor)``
    where ``floor = floor_frac * max|n|`` over the parameter, so elements with
    negligible gradient do not dominate through f32 rounding alone.
    ``max_elements`` caps the number of probed elements per parameter
    (chosen with ``seed``); ``None`` probes all of them.

    With ``kink_guard`` each element is also differenced at ``2 * eps``. If
    the two central estimates disagree by more than ``tol``, or the
    forward/backward asymmetry fails to double with the step, the function is
    not differentiable at that resolution (a ReLU or clamp switched inside
    the probe interval), so the element is excluded and counted in
    ``n_excluded`` instead of compared. A wrong backward rule cannot make two
    numeric estimates disagree, so it is still detected.
    """
    if not 1e-5 <= eps <= 1e-2:
        raise ValueError("eps must lie in [1e-5, 1e-2]")
    params = list(params)
    saved = [p.data for p in params]
    saved_grads = [p.grad for p in params]
    rng = np.random.default_rng(seed)
    report = GradCheckReport(max_rel_error=0.0, tol=tol, n_checked=0)
    try:
        for p, d in zip(params, saved):
            p.data = d.astype(dtype)
            p.grad = None
        with Tape() as tape:
            loss = f()
            tape.backward(loss)
        analytic = [np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in params]

        for p, d in zip(params, saved):
            p.data = d.astype(np.float64)

        def evaluate():
            return float(np.asarray(f().data, dtype=np.float64).reshape(()))

        f0 = evaluate()
        if f0 != evaluate():
            raise NonDeterministicError("two forward passes at the same point disagree")

        for i, p in enumerate(params):
            flat = p.data.reshape(-1)
            n = flat.size
            idx = np.arange(n)
            if max_elements is not None and n > max_elements:
                idx = np.sort(rng.choice(n, size=max_elements, replace=False))
            steps = (eps, 2 * eps) if kink_guard else (eps,)
            numeric = np.empty((len(steps), idx.size))
            asym = np.empty((len(steps), idx.size))
            for j, e in enumerate(idx):
                orig = flat[e]
                for r, h in enumerate(steps):
                    flat[e] = orig + h
                    fp = evaluate()
                    flat[e] = orig - h
                    fm = evaluate()
                    numeric[r, j] = (fp - fm) / (2 * h)
                    # forward minus backward difference: ~ h * f'' when smooth
                    asym[r, j] = (fp - 2 * f0 + fm) / h
                flat[e] = orig
            a = analytic[i].reshape(-1)[idx]
            floor = max(floor_frac * np.abs(numeric[0]).max(initial=0.0), 1e-12)

            def rel_err(x, y):
                return np.abs(x - y) / np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)

            rel = rel_err(a, numeric[0])
            if kink_guard:
                # smooth: central differences agree and the asymmetry doubles with h;
                # a kink near x breaks one or the other
                scale_ = np.maximum(np.abs(numeric[0]), floor)
                kinked = (rel_err(numeric[0], numeric[1]) > tol) | \
                    (np.abs(asym[1] - 2 * asym[0]) / scale_ > tol)
                report.n_excluded += int(kinked.sum())
                rel = rel[~kinked]
            worst = float(rel.max(initial=0.0))
            name = getattr(p, "name", f"param{i}")
            report.per_param[name] = worst
            report.max_rel_error = max(report.max_rel_error, worst)
            report.n_checked += idx.size
    finally:
        for p, d, g in zip(params, saved, saved_grads):
            p.data = d
            p.grad = g
    return report
