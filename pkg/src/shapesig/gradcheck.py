"""Finite-difference checks for every differentiable op and both loss pipelines."""

from dataclasses import dataclass

import numpy as np

from .autodiff import (Parameter, Tensor, add, clamp_max, concat_channels, conv3d,
                       conv_transpose3d, div, finite_difference_check, mean_all, mul,
                       relu, scale, sigmoid, sqrt, square, sub, sum_all)
from .losses import dice_loss, total_loss
from .nets import SegNet, SegNetConfig, ShapeLearner, ShapeNetConfig

TOLERANCES = {np.float32: 1e-3, np.float64: 1e-5}


def _rand(rng, *shape):
    return rng.standard_normal(shape).astype(np.float32)


def op_cases(rng):
    """name -> (loss builder, params) for every differentiable op kind."""
    a = Parameter("a", _rand(rng, 2, 3, 4))
    b = Parameter("b", _rand(rng, 2, 3, 4))
    pos = Parameter("pos", (np.abs(_rand(rng, 2, 3, 4)) + 0.5).astype(np.float32))
    s = Parameter("s", np.array(0.7, np.float32))
    wts = Tensor(_rand(rng, 2, 3, 4))
    # keep values away from the relu / clamp kinks so differences are smooth
    kinky = _rand(rng, 2, 3, 4)
    kinky = np.where(np.abs(kinky) < 0.05, 0.3, kinky).astype(np.float32)
    k = Parameter("k", kinky)
    x5 = Parameter("x5", _rand(rng, 1, 2, 5, 5, 5))
    w5 = Parameter("w5", _rand(rng, 3, 2, 3, 3, 3))
    b5 = Parameter("b5", _rand(rng, 3))
    wt = Parameter("wt", _rand(rng, 2, 3, 2, 2, 2))
    c1 = Parameter("c1", _rand(rng, 1, 2, 3, 3, 3))
    c2 = Parameter("c2", _rand(rng, 1, 1, 3, 3, 3))
    cw = Tensor(_rand(rng, 1, 3, 3, 3, 3))

    def weighted(t):
        return sum_all(mul(t, Tensor(_rand(np.random.default_rng(99), *t.shape))))

    return {
        "add": (lambda: weighted(add(a, b)), [a, b]),
        "sub": (lambda: weighted(sub(a, b)), [a, b]),
        "mul": (lambda: weighted(mul(a, b)), [a, b]),
        "div": (lambda: weighted(div(a, pos)), [a, pos]),
        "scalar_mul": (lambda: weighted(mul(a, s)), [a, s]),
        "square": (lambda: sum_all(mul(square(a), wts)), [a]),
        "sqrt": (lambda: sum_all(mul(sqrt(pos), wts)), [pos]),
        "scale": (lambda: sum_all(mul(scale(a, -2.5), wts)), [a]),
        "relu": (lambda: sum_all(mul(relu(k), wts)), [k]),
        "sigmoid": (lambda: sum_all(mul(sigmoid(a), wts)), [a]),
        "clamp_max": (lambda: sum_all(mul(clamp_max(k, 0.0), wts)), [k]),
        "sum_all": (lambda: square(sum_all(a)), [a]),
        "mean_all": (lambda: square(mean_all(a)), [a]),
        "conv3d_s1": (lambda: weighted(conv3d(x5, w5, b5, 1, 1)), [x5, w5, b5]),
        "conv3d_s2": (lambda: weighted(conv3d(x5, w5, b5, 2, 1)), [x5, w5, b5]),
        "conv_transpose3d": (lambda: weighted(conv_transpose3d(x5, wt, None, 2, 0)), [x5, wt]),
        "concat_channels": (lambda: sum_all(mul(concat_channels(c1, c2), cw)), [c1, c2]),
    }


def pipeline_cases(rng, n=16):
    """Full L_dice and L_total graphs on an ``n``-cubed volume w.r.t. segmenter weights."""
    f = SegNet(SegNetConfig(), seed=int(rng.integers(2 ** 31)))
    g = ShapeLearner(ShapeNetConfig(), seed=int(rng.integers(2 ** 31)))
    g.set_trainable(False)
    # zero biases leave dead units exactly on their relu kink; probe a generic point
    for p in f.params + g.params:
        if p.name.endswith(".b"):
            p.data = (0.05 * rng.standard_normal(p.shape)).astype(np.float32)
    zz, yy, xx = np.indices((n, n, n))
    c = (n - 1) / 2
    label = ((zz - c) ** 2 / 25 + (yy - c) ** 2 / 16 + (xx - c) ** 2 / 9 <= 1).astype(np.float32)
    image = (label + 0.3 * rng.standard_normal(label.shape)).astype(np.float32)

    def inputs():
        # follow the parameters' dtype so the f64 reference is f64 end to end
        dt = f.params[0].data.dtype
        return Tensor(image.reshape((1, 1) + image.shape).astype(dt)), \
            Tensor(label.reshape((1, 1) + label.shape).astype(dt))

    def l_dice():
        x, m = inputs()
        return dice_loss(m, f(x))

    def l_total():
        x, m = inputs()
        return total_loss(m, f(x), g, alpha=0.1, cap=1.0).value

    return {"L_dice": (l_dice, f.params), "L_total": (l_total, f.params)}


@dataclass
class CheckResult:
    name: str
    dtype: str
    max_rel_error: float
    tol: float
    n_checked: int = 0
    n_excluded: int = 0

    @property
    def passed(self):
        return self.max_rel_error <= self.tol


def run_suite(dtypes=(np.float32, np.float64), pipelines=True, seed=0, max_elements=6):
    """Run every check; pipeline checks probe ``max_elements`` entries per weight tensor."""
    results = []
    for dt in dtypes:
        tol = TOLERANCES[dt]
        for name, (fn, params) in op_cases(np.random.default_rng(seed + 10)).items():
            rep = finite_difference_check(fn, params, eps=1e-4, tol=tol, dtype=dt)
            results.append(CheckResult(name, np.dtype(dt).name, rep.max_rel_error, tol,
                                       rep.n_checked))
        if not pipelines:
            continue
        for name, (fn, params) in pipeline_cases(np.random.default_rng(seed + 20)).items():
            # thousands of relu units: a few probes inevitably straddle a kink
            rep = finite_difference_check(fn, params, eps=1e-5, tol=tol, dtype=dt,
                                          max_elements=max_elements, seed=seed,
                                          kink_guard=True)
            results.append(CheckResult(name, np.dtype(dt).name, rep.max_rel_error, tol,
                                       rep.n_checked, rep.n_excluded))
    return results


def format_table(results):
    lines = [f"{'check':<18} {'dtype':<8} {'max rel err':>12} {'tol':>8} {'probed':>7} "
             f"{'kinked':>7}  status"]
    for r in results:
        lines.append(f"{r.name:<18} {r.dtype:<8} {r.max_rel_error:12.3e} {r.tol:8.0e} "
                     f"{r.n_checked:7d} {r.n_excluded:7d}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
