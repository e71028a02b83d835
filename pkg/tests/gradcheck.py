"""Central finite-difference gradient checks in float64."""

import numpy as np

from fogdesk.tensor import Tensor


def numeric_grad(f, arrays, i, eps=1e-6):
    x = arrays[i]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        fp = f(*arrays)
        x[idx] = old - eps
        fm = f(*arrays)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


def rel_error(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def check_op(op, *arrays, weights=None, tol=1e-3):
    """Compare autograd against finite differences for ``sum(w * op(*inputs))``.

    Returns the worst relative error over all inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out0 = op(*[Tensor(a) for a in arrays]).data
    if weights is None:
        weights = np.random.default_rng(7).normal(size=out0.shape)

    def scalar(*arrs):
        return float(np.sum(op(*[Tensor(a) for a in arrs]).data * weights))

    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*ts)
    (out * Tensor(weights)).sum().backward()
    worst = 0.0
    for i, t in enumerate(ts):
        num = numeric_grad(scalar, arrays, i)
        worst = max(worst, rel_error(t.grad, num))
    assert worst <= tol, f"gradient mismatch {worst:.2e}"
    return worst
