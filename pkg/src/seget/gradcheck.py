"""Finite-difference gradient checking.

The harness perturbs every input coordinate with central differences at
double precision and compares against the analytic gradients an op
reports. It is the independent oracle for every hand-written backward
pass in this package; a failure is a report outcome, not an exception.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import ConvSpec, Parameter, Tensor

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4

# fn(*arrays) -> (scalar value, grads aligned with arrays)
CheckedFn = Callable[..., tuple[float, Sequence[np.ndarray]]]


@dataclass
class GradCheckReport:
    name: str
    max_rel_err: float
    tolerance: float
    passed: bool

    def line(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"{status}  {self.name}  max_rel_err={self.max_rel_err:.3e}  tol={self.tolerance:.1e}"


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max over coordinates of |a-n| / max(|a|, |n|, 1e-8)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def gradcheck(
    fn: CheckedFn,
    args: Sequence[np.ndarray],
    *,
    tolerance: float = DEFAULT_TOLERANCE,
    step: float = DEFAULT_STEP,
    name: str = "op",
) -> GradCheckReport:
    """Check fn's analytic gradients against central finite differences.

    All arrays must be float64; fn must be pure in its args (it may not
    keep state between calls).
    """
    args = [np.asarray(a, dtype=np.float64) for a in args]
    _, analytic = fn(*args)
    if len(analytic) != len(args):
        raise ValueError("fn must return one gradient per argument")
    worst = 0.0
    for k, arg in enumerate(args):
        numeric = np.zeros_like(arg)
        flat = arg.ravel()
        nflat = numeric.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            plus, _ = fn(*args)
            flat[i] = orig - step
            minus, _ = fn(*args)
            flat[i] = orig
            nflat[i] = (plus - minus) / (2.0 * step)
        worst = max(worst, relative_error(analytic[k], numeric))
    return GradCheckReport(name, worst, tolerance, worst <= tolerance)


# ---------------------------------------------------------------------------
# operator suite: every differentiable op, checked under a fixed random
# projection so the backward is exercised with a general upstream gradient
# ---------------------------------------------------------------------------

def _projected(y: Tensor, proj: np.ndarray) -> float:
    return float(np.sum(y.data * proj))


def _check_conv(rng: np.random.Generator, spec: ConvSpec, shape, name: str,
                tolerance: float) -> GradCheckReport:
    x0 = rng.standard_normal(shape)
    kshape = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
    k0 = rng.standard_normal(kshape)
    b0 = rng.standard_normal(spec.out_channels)
    oh, ow = spec.out_spatial(shape[2], shape[3])
    proj = rng.standard_normal((shape[0], spec.out_channels, oh, ow))

    def fn(x, k, b):
        kernel = Parameter(k.copy(), "conv-kernel", regularized=True)
        bias = Parameter(b.copy(), "conv-bias")
        y, cache = ops.conv2d_forward(Tensor(x), spec, kernel, bias)
        gx = ops.conv2d_backward(Tensor(proj), cache, spec, kernel, bias)
        return _projected(y, proj), (gx.data, kernel.grad, bias.grad)

    return gradcheck(fn, [x0, k0, b0], tolerance=tolerance, name=name)


def _check_batchnorm(rng: np.random.Generator, tolerance: float) -> GradCheckReport:
    shape = (2, 3, 4, 4)
    x0 = rng.standard_normal(shape)
    g0 = rng.standard_normal(3) * 0.5 + 1.0
    b0 = rng.standard_normal(3) * 0.1
    proj = rng.standard_normal(shape)

    def fn(x, g, b):
        gamma = Parameter(g.copy(), "bn-gamma")
        beta = Parameter(b.copy(), "bn-beta")
        state = ops.BatchNormState.create(3, dtype=np.float64)
        y, cache = ops.batchnorm_forward(Tensor(x), gamma, beta, state, "train")
        gx = ops.batchnorm_backward(Tensor(proj), cache, gamma, beta)
        return _projected(y, proj), (gx.data, gamma.grad, beta.grad)

    return gradcheck(fn, [x0, g0, b0], tolerance=tolerance, name="batchnorm(train)")


def _check_relu(rng: np.random.Generator, tolerance: float) -> GradCheckReport:
    shape = (2, 3, 5, 5)
    # keep values away from the kink at 0 so finite differences are valid
    x0 = rng.standard_normal(shape)
    x0[np.abs(x0) < 1e-3] += 0.1
    proj = rng.standard_normal(shape)

    def fn(x):
        y, cache = ops.relu_forward(Tensor(x))
        gx = ops.relu_backward(Tensor(proj), cache)
        return _projected(y, proj), (gx.data,)

    return gradcheck(fn, [x0], tolerance=tolerance, name="relu")


def _check_sigmoid(rng: np.random.Generator, tolerance: float) -> GradCheckReport:
    shape = (2, 2, 4, 4)
    x0 = rng.standard_normal(shape) * 2.0
    proj = rng.standard_normal(shape)

    def fn(x):
        y, cache = ops.sigmoid_forward(Tensor(x))
        gx = ops.sigmoid_backward(Tensor(proj), cache)
        return _projected(y, proj), (gx.data,)

    return gradcheck(fn, [x0], tolerance=tolerance, name="sigmoid")


def _check_upsample(rng: np.random.Generator, tolerance: float, mode: str) -> GradCheckReport:
    shape = (2, 2, 3, 4)
    x0 = rng.standard_normal(shape)
    proj = rng.standard_normal((2, 2, 6, 8))

    def fn(x):
        y, cache = ops.bilinear_upsample_2x_forward(Tensor(x), mode)
        gx = ops.bilinear_upsample_2x_backward(Tensor(proj), cache)
        return _projected(y, proj), (gx.data,)

    return gradcheck(fn, [x0], tolerance=tolerance, name=f"bilinear_upsample_2x({mode})")


def _check_concat(rng: np.random.Generator, tolerance: float) -> GradCheckReport:
    a0 = rng.standard_normal((2, 2, 4, 4))
    b0 = rng.standard_normal((2, 3, 4, 4))
    proj = rng.standard_normal((2, 5, 4, 4))

    def fn(a, b):
        y, cache = ops.concat_channels_forward([Tensor(a), Tensor(b)])
        ga, gb = ops.concat_channels_backward(Tensor(proj), cache)
        return _projected(y, proj), (ga.data, gb.data)

    return gradcheck(fn, [a0, b0], tolerance=tolerance, name="concat_channels")


def run_network_suite(
    seed: int = 0, tolerance: float = 1e-3, step: float = DEFAULT_STEP
) -> list[GradCheckReport]:
    """Whole-network check on a tiny configuration (base 2, depth 1,
    rates (1, 2), input 1x1x8x8): every parameter's analytic gradient of
    the sum-of-logits against central finite differences.

    Train-mode BN uses batch statistics only, so the perturbed forward
    is a smooth function of the parameters even though running stats
    keep updating.
    """
    from .model import NetworkConfig, build

    cfg = NetworkConfig(base_filters=2, depth=1, dilation_rates=(1, 2), dtype="float64")
    net = build(cfg, seed=seed)
    x = Tensor(np.random.default_rng(seed + 1).standard_normal((1, 1, 8, 8)))

    def loss() -> float:
        return float(net.forward(x, mode="train").data.sum())

    loss()
    net.zero_grads()
    net.backward(Tensor(np.ones((1, 1, 8, 8))))

    reports = []
    for name, p in net.parameters.items():
        analytic = p.grad.copy()
        numeric = np.zeros_like(p.value)
        flat = p.value.ravel()
        nflat = numeric.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            plus = loss()
            flat[i] = orig - step
            minus = loss()
            flat[i] = orig
            nflat[i] = (plus - minus) / (2.0 * step)
        err = relative_error(analytic, numeric)
        reports.append(GradCheckReport(f"net:{name}", err, tolerance, err <= tolerance))
    return reports


def run_operator_suite(
    seeds: Sequence[int] = range(10), tolerance: float = DEFAULT_TOLERANCE
) -> list[GradCheckReport]:
    """Finite-difference checks for every differentiable operator.

    Conv variants cover stride 2, dilation, and 1x1 kernels; every check
    runs once per seed on fresh random inputs.
    """
    conv_variants = [
        ("conv2d(3x3,s1,d1)", ConvSpec(3, 4, kernel=3, stride=1, dilation=1), (2, 3, 6, 6)),
        ("conv2d(3x3,s2,d1)", ConvSpec(2, 3, kernel=3, stride=2, dilation=1), (2, 2, 6, 6)),
        ("conv2d(3x3,s1,d2)", ConvSpec(2, 2, kernel=3, stride=1, dilation=2), (1, 2, 7, 7)),
        ("conv2d(3x3,s1,d4)", ConvSpec(1, 2, kernel=3, stride=1, dilation=4), (1, 1, 9, 9)),
        ("conv2d(1x1,s1,d1)", ConvSpec(3, 2, kernel=1, stride=1, dilation=1), (2, 3, 5, 5)),
    ]
    reports: list[GradCheckReport] = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, spec, shape in conv_variants:
            reports.append(_check_conv(rng, spec, shape, f"{name}[seed={seed}]", tolerance))
        reports.append(_check_batchnorm(rng, tolerance))
        reports.append(_check_relu(rng, tolerance))
        reports.append(_check_sigmoid(rng, tolerance))
        reports.append(_check_upsample(rng, tolerance, "half_pixel"))
        reports.append(_check_upsample(rng, tolerance, "align_corners"))
        reports.append(_check_concat(rng, tolerance))
    return reports
