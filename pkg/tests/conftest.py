import numpy as np
import pytest

from hpt import tensor as T
from hpt.tensor import Tensor


def numeric_grad(f, arrays, i, eps=1e-5):
    """Central differences of scalar ``f(*arrays)`` with respect to ``arrays[i]`` (f64)."""
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


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-8)))


def gradcheck(op, *arrays, eps=1e-5, weights=None):
    """Max relative error between analytic and numeric grads of ``sum(w * op(*xs))``."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out0 = op(*[Tensor(a) for a in arrays]).data
    w = weights if weights is not None else np.random.default_rng(0).normal(size=out0.shape)

    def f(*xs):
        with T.no_grad():
            return float((op(*[Tensor(x) for x in xs]).data * w).sum())

    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*ts)
    T.backward(T.sum_(T.mul(out, Tensor(np.asarray(w, dtype=np.float64)))))
    return max(rel_err(t.grad, numeric_grad(f, arrays, i, eps)) for i, t in enumerate(ts))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def perturb_registry(reg, scale=0.05, seed=0):
    """Add noise to every tensor so zero-initialised paths carry gradient."""
    g = np.random.default_rng(seed)
    for _, t in reg.items():
        t.data = t.data + g.normal(scale=scale, size=t.shape).astype(t.dtype)


def registry_gradcheck(reg, loss_fn, per_tensor=6, seed=0, eps=1e-5, floor=1e-4):
    """Finite-difference check of every registered tensor.

    Each tensor is probed at its largest-gradient entry plus random entries,
    and one random direction spanning all parameters at once is checked too.
    Relative error is ``|a - n| / max(|a| + |n|, floor)``.
    Returns ``(worst_rel_err, worst_name)``.
    """
    g = np.random.default_rng(seed)
    reg.zero_grad()
    T.backward(loss_fn())
    grads = {n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for n, t in reg.items()}

    def f():
        with T.no_grad():
            return float(loss_fn().data)

    worst, where = 0.0, None
    for name, t in reg.items():
        flat = t.data.reshape(-1)
        gflat = grads[name].reshape(-1)
        picks = {int(np.argmax(np.abs(gflat)))}
        picks.update(int(i) for i in g.integers(0, flat.size, size=min(per_tensor - 1, flat.size)))
        for i in picks:
            old = flat[i]
            flat[i] = old + eps
            fp = f()
            flat[i] = old - eps
            fm = f()
            flat[i] = old
            num = (fp - fm) / (2 * eps)
            err = abs(gflat[i] - num) / max(abs(gflat[i]) + abs(num), floor)
            if err > worst:
                worst, where = err, f"{name}[{i}]"
    dirs = {n: g.normal(size=t.shape) for n, t in reg.items()}
    analytic = sum(float((grads[n] * dirs[n]).sum()) for n in dirs)
    orig = {n: t.data.copy() for n, t in reg.items()}
    vals = []
    for sgn in (1, -1):
        for n, t in reg.items():
            t.data = orig[n] + sgn * eps * dirs[n]
        vals.append(f())
    for n, t in reg.items():
        t.data = orig[n]
    num = (vals[0] - vals[1]) / (2 * eps)
    err = abs(analytic - num) / max(abs(analytic) + abs(num), floor)
    if err > worst:
        worst, where = err, "<all-parameter direction>"
    reg.zero_grad()
    return worst, where
