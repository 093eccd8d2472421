"""Sparsifying transforms and their shrinkage operators.

``shrink(x, t, kind)`` returns ``psi^-1 soft(psi x, t)``, the Z-update of
the ADMM scaffold. Two transforms are available:

``haar-wavelet``
    Single-level orthonormal 2D Haar on the last two axes (even sizes).
    The approximation band is left unthresholded.
``finite-difference``
    Undecimated one-level Haar along each axis, i.e. shrinkage of
    half forward differences with periodic boundary. The two axis-wise
    reconstructions are averaged.
"""

import numpy as np

__all__ = ["soft_threshold", "haar2", "ihaar2", "shrink", "sparsity_norm", "TRANSFORMS"]

TRANSFORMS = ("haar-wavelet", "finite-difference")
_S2 = np.sqrt(2.0)


def soft_threshold(x, t):
    """Complex-safe soft thresholding: ``x * max(0, 1 - t/|x|)``."""
    x = np.asarray(x)
    mag = np.abs(x)
    scale = np.maximum(mag - t, 0.0) / np.where(mag > 0, mag, 1.0)
    return x * scale


def _check_even(x):
    if x.shape[-2] % 2 or x.shape[-1] % 2:
        raise ValueError(f"Haar transform needs even image dimensions, got {x.shape[-2:]}")


def haar2(x):
    """Single-level orthonormal 2D Haar; quadrants [[LL, LH], [HL, HH]]."""
    x = np.asarray(x)
    _check_even(x)
    a = (x[..., 0::2, :] + x[..., 1::2, :]) / _S2
    d = (x[..., 0::2, :] - x[..., 1::2, :]) / _S2
    rows = np.concatenate([a, d], axis=-2)
    a = (rows[..., 0::2] + rows[..., 1::2]) / _S2
    d = (rows[..., 0::2] - rows[..., 1::2]) / _S2
    return np.concatenate([a, d], axis=-1)


def ihaar2(c):
    """Inverse of :func:`haar2`."""
    c = np.asarray(c)
    _check_even(c)
    hy, hx = c.shape[-2] // 2, c.shape[-1] // 2
    rows = np.empty_like(c)
    a, d = c[..., :hx], c[..., hx:]
    rows[..., 0::2] = (a + d) / _S2
    rows[..., 1::2] = (a - d) / _S2
    out = np.empty_like(c)
    a, d = rows[..., :hy, :], rows[..., hy:, :]
    out[..., 0::2, :] = (a + d) / _S2
    out[..., 1::2, :] = (a - d) / _S2
    return out


def _detail_mask(shape):
    m = np.ones(shape[-2:], dtype=bool)
    m[: shape[-2] // 2, : shape[-1] // 2] = False
    return m


def _fd_shrink_axis(x, t, axis):
    sx = np.roll(x, -1, axis=axis)
    a = (x + sx) / 2
    d = soft_threshold((x - sx) / 2, t)
    return (a + np.roll(a, 1, axis=axis)) / 2 + (d - np.roll(d, 1, axis=axis)) / 2


def shrink(x, t, kind="haar-wavelet"):
    """Shrinkage in the sparsifying domain followed by the inverse transform."""
    if kind == "haar-wavelet":
        c = haar2(x)
        detail = _detail_mask(c.shape)
        c = np.where(detail, soft_threshold(c, t), c)
        return ihaar2(c)
    if kind == "finite-difference":
        return 0.5 * (_fd_shrink_axis(x, t, -1) + _fd_shrink_axis(x, t, -2))
    raise ValueError(f"unknown transform {kind!r}")


def sparsity_norm(x, kind="haar-wavelet"):
    """l1 norm of the thresholded coefficients (the regularizer value)."""
    if kind == "haar-wavelet":
        c = haar2(x)
        return float(np.sum(np.abs(c[..., _detail_mask(c.shape)])))
    if kind == "finite-difference":
        dx = (x - np.roll(x, -1, axis=-1)) / 2
        dy = (x - np.roll(x, -1, axis=-2)) / 2
        return float(np.sum(np.abs(dx)) + np.sum(np.abs(dy)))
    raise ValueError(f"unknown transform {kind!r}")
