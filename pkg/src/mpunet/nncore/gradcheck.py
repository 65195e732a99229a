"""Central finite-difference checks for graph gradients (use float64 graphs)."""

from __future__ import annotations

import numpy as np


def relative_error(analytic, numeric, floor=1e-6):
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_grad(f, array, step=1e-5, indices=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``array`` (mutated, then restored)."""
    flat = array.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(flat.size)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * step)
    return out.reshape(array.shape)


def check_graph(g, x, target, l2=0.0, step=1e-5, max_entries=None, rng=None):
    """Compare :func:`backward` with finite differences for every parameter of ``g``.

    Returns ``{param_name: max relative error}``. ``max_entries`` subsamples
    large arrays.
    """
    from .graph import backward, forward, loss

    def objective():
        return loss(forward(g, x, "train"), target, g.kernel_params(), l2).value

    lv = loss(forward(g, x, "train"), target, g.kernel_params(), l2)
    analytic = backward(g, lv)
    rng = rng or np.random.default_rng(0)
    errors = {}
    for name, p in g.params.items():
        idx = None
        if max_entries is not None and p.size > max_entries:
            idx = rng.choice(p.size, max_entries, replace=False)
        num = numeric_grad(objective, p, step, idx)
        a = analytic[name].reshape(-1)
        n = num.reshape(-1)
        if idx is not None:
            a, n = a[idx], n[idx]
        errors[name] = relative_error(a, n)
    return errors
