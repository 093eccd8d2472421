"""Central finite-difference gradient verification."""

import numpy as np

__all__ = ["numerical_gradient", "relative_error", "check_gradients"]


def numerical_gradient(f, params, index, h=1e-5):
    """Central differences of scalar ``f(params)`` w.r.t. every entry of ``params[index]``."""
    p = params[index]
    grad = np.empty_like(p)
    flat = p.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        fp = f(params)
        flat[k] = old - h
        fm = f(params)
        flat[k] = old
        gflat[k] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic, numeric, floor=1e-6):
    """Entry-wise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps entries whose true gradient is ~0 from dividing
    round-off noise by round-off noise.
    """
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_gradients(f, params, grads, h=1e-5, floor=1e-6):
    """Worst relative error per parameter array.

    ``params`` is mutated during the sweep and restored afterwards.
    """
    params = [np.array(p, dtype=np.float64, copy=True) for p in params]
    worst = []
    for i, g in enumerate(grads):
        num = numerical_gradient(f, params, i, h)
        worst.append(float(np.max(relative_error(g, num, floor))))
    return worst
