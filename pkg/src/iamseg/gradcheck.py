"""Central-difference gradient checking for every registered op."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    max_elements: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must be a deterministic scalar-valued function of `x` (float64).
    Error per element is |analytic - numeric| / max(1, |analytic|, |numeric|).
    `max_elements` caps how many coordinates are perturbed (seeded subsample)
    so whole-model checks stay affordable.
    """
    if x.dtype != np.float64:
        raise T.TensorError("finite_difference_check requires a float64 tensor")
    x.zero_grad()
    with T.tape():
        out = f(x)
        T.backward(out)
    if x.grad is None:
        analytic = np.zeros_like(x.data)
    else:
        analytic = x.grad.copy()

    flat = x.data.reshape(-1)
    n = flat.size
    if max_elements is not None and max_elements < n:
        picks = np.random.default_rng(seed).choice(n, size=max_elements, replace=False)
    else:
        picks = np.arange(n)

    worst = 0.0
    analytic_flat = analytic.reshape(-1)
    for i in picks:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x).item()
        flat[i] = orig - h
        fm = f(x).item()
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * h)
        a = analytic_flat[i]
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        worst = max(worst, err)
    return worst


def op_gradcheck_cases(rng: np.random.Generator):
    """(name, f, x) triples covering every op with a backward rule.

    Inputs are float64 and kept away from kinks (relu at 0, pool ties,
    clamp floors) so central differences are meaningful.
    """
    f64 = np.float64

    def t(shape, lo=-1.0, hi=1.0):
        return Tensor(rng.uniform(lo, hi, shape).astype(f64), requires_grad=True)

    def readout(y: Tensor) -> Tensor:
        # weighted sum so the check sees non-uniform output gradients
        w = Tensor(np.linspace(0.5, 1.5, y.size, dtype=f64).reshape(y.shape))
        return T.tensor_sum(T.mul(y, w))

    cases: list[tuple[str, Callable[[Tensor], Tensor], Tensor]] = []

    x = t((2, 5, 5))
    w331 = Tensor(rng.uniform(-1, 1, (3, 2, 3, 3)).astype(f64))
    b3 = Tensor(rng.uniform(-1, 1, 3).astype(f64))
    cases.append(("conv2d", lambda v: readout(T.conv2d(v, w331, b3)), x))
    cases.append(
        ("conv2d_weight", lambda v: readout(T.conv2d(x, v, b3)), Tensor(w331.data.copy(), requires_grad=True))
    )
    cases.append(
        ("conv2d_bias", lambda v: readout(T.conv2d(x, w331, v)), Tensor(b3.data.copy(), requires_grad=True))
    )
    xs = t((2, 5, 5))
    cases.append(("conv2d_stride2", lambda v: readout(T.conv2d(v, w331, b3, stride=2)), xs))
    xg = t((4, 6, 6))
    wg = Tensor(rng.uniform(-1, 1, (4, 2, 3, 3)).astype(f64))
    bg = Tensor(rng.uniform(-1, 1, 4).astype(f64))
    cases.append(("conv2d_groups2", lambda v: readout(T.conv2d(v, wg, bg, groups=2)), xg))

    cases.append(("bilinear_upsample2", lambda v: readout(T.bilinear_upsample(v, 2)), t((2, 3, 4))))
    cases.append(("bilinear_resize_3to4", lambda v: readout(T.bilinear_resize(v, 4, 4)), t((2, 3, 3))))
    cases.append(("max_pool2x2", lambda v: readout(T.max_pool2x2(v)), t((2, 4, 6))))
    cases.append(("adaptive_avg_pool", lambda v: readout(T.adaptive_avg_pool(v, 3)), t((2, 7, 5))))

    cases.append(("sigmoid", lambda v: readout(T.sigmoid(v)), t((3, 4))))
    cases.append(("relu", lambda v: readout(T.relu(v)), t((3, 4), lo=0.1, hi=1.0)))
    cases.append(("softmax", lambda v: readout(T.softmax(v, axis=1)), t((3, 4))))
    cases.append(("log", lambda v: readout(T.log(v)), t((3, 4), lo=0.2, hi=2.0)))
    cases.append(("sqrt", lambda v: readout(T.sqrt(v)), t((3, 4), lo=0.2, hi=2.0)))
    cases.append(("power_2", lambda v: readout(T.power(v, 2.0)), t((3, 4))))
    cases.append(("power_half", lambda v: readout(T.power(v, 0.5)), t((3, 4), lo=0.2, hi=2.0)))
    cases.append(("power_neg1", lambda v: readout(T.power(v, -1.0)), t((3, 4), lo=0.5, hi=2.0)))
    cases.append(("neg", lambda v: readout(T.neg(v)), t((3, 4))))

    other = Tensor(rng.uniform(-1, 1, (3, 4)).astype(f64))
    wide = Tensor(rng.uniform(-1, 1, (3, 4)).astype(f64))
    cases.append(("add", lambda v: readout(T.add(v, other)), t((3, 4))))
    cases.append(("add_broadcast", lambda v: readout(T.add(wide, v)), t((4,))))
    cases.append(("sub", lambda v: readout(T.sub(v, other)), t((3, 4))))
    cases.append(("mul", lambda v: readout(T.mul(v, other)), t((3, 4))))
    cases.append(("mul_broadcast", lambda v: readout(T.mul(wide, v)), t((3, 1))))

    m = Tensor(rng.uniform(-1, 1, (4, 3)).astype(f64))
    mleft = Tensor(rng.uniform(-1, 1, (2, 4)).astype(f64))
    cases.append(("matmul_left", lambda v: readout(T.matmul(v, m)), t((2, 4))))
    cases.append(("matmul_right", lambda v: readout(T.matmul(mleft, v)), t((4, 3))))
    lw = Tensor(rng.uniform(-1, 1, (3, 4)).astype(f64))
    lb = Tensor(rng.uniform(-1, 1, 3).astype(f64))
    cases.append(("linear", lambda v: readout(T.linear(v, lw, lb)), t((2, 4))))
    cases.append(
        ("linear_weight", lambda v: readout(T.linear(mleft, v, lb)), Tensor(lw.data.copy(), requires_grad=True))
    )

    cases.append(("transpose", lambda v: readout(T.transpose(v)), t((3, 4))))
    cases.append(("reshape", lambda v: readout(T.reshape(v, (4, 3))), t((3, 4))))
    cases.append(("sum_all", lambda v: T.tensor_sum(v), t((3, 4))))
    cases.append(("sum_axis", lambda v: readout(T.tensor_sum(v, axis=1)), t((3, 4))))
    cases.append(("sum_keepdims", lambda v: readout(T.tensor_sum(v, axis=1, keepdims=True)), t((3, 4))))
    cases.append(("mean", lambda v: readout(T.mean(v, axis=0)), t((3, 4))))

    rest = Tensor(rng.uniform(-1, 1, (2, 4)).astype(f64))
    cases.append(("concat", lambda v: readout(T.concat([v, rest], axis=0)), t((3, 4))))
    cases.append(("gather_rows", lambda v: readout(T.gather_rows(v, [0, 2, 2])), t((4, 3))))

    return cases
