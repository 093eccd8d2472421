"""Training losses and their gradients.

``nrmse_loss`` is the normalized reconstruction error |pred - target| / |target|
(averaged over the leading sample axis when ``per_sample=True``).
``l2_loss`` averages the *unsquared* l2 norm of each (sample, channel) image.
"""

import numpy as np

__all__ = ["nrmse_loss", "nrmse_loss_grad", "l2_loss", "l2_loss_grad", "NORM_EPS"]

NORM_EPS = 1e-12


def nrmse_loss(pred, target, per_sample: bool = False) -> float:
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if per_sample:
        return float(np.mean([nrmse_loss(p, t) for p, t in zip(pred, target)]))
    tn = np.sqrt(np.sum(np.abs(target) ** 2))
    if tn == 0:
        raise ValueError("nRMSE is undefined for a zero-norm target")
    return float(np.sqrt(np.sum(np.abs(pred - target) ** 2)) / tn)


def nrmse_loss_grad(pred, target, per_sample: bool = False):
    """Gradient of :func:`nrmse_loss` w.r.t. ``pred``.

    For complex ``pred`` the result is the gradient w.r.t. the real and
    imaginary parts packed as ``d/dRe + 1j d/dIm``.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if per_sample:
        k = pred.shape[0]
        return np.stack([nrmse_loss_grad(p, t) for p, t in zip(pred, target)]) / k
    diff = pred - target
    tn = np.sqrt(np.sum(np.abs(target) ** 2))
    if tn == 0:
        raise ValueError("nRMSE is undefined for a zero-norm target")
    dn = np.sqrt(np.sum(np.abs(diff) ** 2))
    return diff / (max(dn, NORM_EPS) * tn)


def _per_image_norms(diff):
    if diff.ndim < 3:
        raise ValueError("l2_loss expects (channels, H, W) or (samples, channels, H, W)")
    if diff.ndim == 3:
        diff = diff[None]
    return np.sqrt(np.sum(diff**2, axis=(-2, -1))), diff


def l2_loss(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    norms, _ = _per_image_norms(pred - target)
    return float(np.mean(norms))


def l2_loss_grad(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    norms, diff = _per_image_norms(pred - target)
    g = diff / np.maximum(norms, NORM_EPS)[..., None, None] / norms.size
    return g.reshape(pred.shape)
