"""Classical ADMM reconstruction unrolled for a fixed number of iterations.

One iteration, for a measurement operator ``A`` and data ``y``::

    d    = A m - y                                   (data residual)
    m   <- argmin_m 1/2 |A m - y|^2 + eta/2 |m - z + beta|^2
           solved by CG as m + delta, (A^H A + eta I) delta = -A^H d + eta (z - beta - m)
    z   <- psi^-1 soft(psi (m + beta), reg_weight / eta)
    beta <- beta + eta (m - z)
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from ..acquisition import CoilProfile, KSpaceData, MeasurementOperator, SamplingMask
from ..core import ContrastImageSet
from .transforms import TRANSFORMS, shrink

__all__ = [
    "ReconConfig",
    "ADMMState",
    "ReconDivergenceError",
    "conjugate_gradient",
    "zero_filled",
    "admm_init",
    "admm_step",
    "admm_reconstruct",
    "cg_sense",
    "tune_reg_weight",
    "REG_GRID",
]

# multiples of max|zero_filled| searched by tune_reg_weight
REG_GRID = (1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1)


class ReconDivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class ReconConfig:
    n_iters: int = 10
    eta: float = 1.0
    reg_weight: float = 1e-3
    transform: str = "haar-wavelet"
    cg_iters: int = 10
    cg_tol: float = 1e-8
    mode: str = "classical"

    def __post_init__(self):
        if self.n_iters < 1:
            raise ValueError("n_iters must be >= 1")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.reg_weight < 0:
            raise ValueError("reg_weight must be >= 0")
        if not self.cg_tol > 0:
            raise ValueError("cg_tol must be positive")
        if self.cg_iters < 1:
            raise ValueError("cg_iters must be >= 1")
        if self.transform not in TRANSFORMS:
            raise ValueError(f"transform must be one of {TRANSFORMS}")
        if self.mode not in ("classical", "learned"):
            raise ValueError("mode must be 'classical' or 'learned'")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ReconConfig":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class ADMMState:
    """Primal image ``m``, auxiliary ``z``, scaled dual ``beta`` and data residual ``d``."""

    m: np.ndarray
    z: np.ndarray
    beta: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        if not (self.m.shape == self.z.shape == self.beta.shape):
            raise ValueError("m, z and beta must share one shape")


def _vdot(a, b):
    return np.vdot(a, b).real


def conjugate_gradient(apply, b, x0=None, iters=10, tol=1e-8):
    """Conjugate gradient for a Hermitian positive (semi)definite operator.

    Stops after ``iters`` iterations or once ``|r| <= tol * |b|``.
    Returns ``(x, n_iterations, relative_residual)``.
    """
    x = np.zeros_like(b) if x0 is None else x0.copy()
    r = b - apply(x) if x0 is not None else b.copy()
    bnorm = np.sqrt(_vdot(b, b))
    if bnorm == 0:
        return np.zeros_like(b), 0, 0.0
    p = r.copy()
    rr = _vdot(r, r)
    it = 0
    for it in range(1, iters + 1):
        if np.sqrt(rr) <= tol * bnorm:
            it -= 1
            break
        ap = apply(p)
        pap = _vdot(p, ap)
        if pap <= 0:
            break
        alpha = rr / pap
        x += alpha * p
        r -= alpha * ap
        rr_new = _vdot(r, r)
        p = r + (rr_new / rr) * p
        rr = rr_new
    res = np.sqrt(rr) / bnorm
    if not np.isfinite(res):
        raise ReconDivergenceError("conjugate gradient residual is not finite")
    return x, it, res


def _operator(coils: CoilProfile, mask) -> MeasurementOperator:
    if isinstance(mask, SamplingMask) or mask is None:
        return MeasurementOperator(coils, mask)
    return MeasurementOperator(coils, SamplingMask(mask))


def zero_filled(y: KSpaceData, coils: CoilProfile, tsl_ms=None) -> ContrastImageSet:
    """Adjoint of the measurement operator applied to ``y``."""
    op = MeasurementOperator(coils, y.mask)
    tsl = range(y.n_tsl) if tsl_ms is None else tsl_ms
    return ContrastImageSet(op.apply_adjoint(y.y), tsl)


def admm_init(op: MeasurementOperator, y: np.ndarray) -> ADMMState:
    m0 = op.apply_adjoint(y)
    return ADMMState(m=m0, z=m0.copy(), beta=np.zeros_like(m0), d=np.zeros_like(y))


def admm_step(state: ADMMState, op: MeasurementOperator, y, cfg: ReconConfig,
              iteration: int = 0) -> ADMMState:
    """One classical ADMM iteration; returns the new state."""
    y = y.y if isinstance(y, KSpaceData) else y
    eta = cfg.eta
    m, z, beta = state.m, state.z, state.beta
    d = op.apply(m) - y
    rhs = -op.apply_adjoint(d) + eta * (z - beta - m)
    delta, _, res = conjugate_gradient(lambda v: op.normal(v) + eta * v, rhs,
                                       iters=cfg.cg_iters, tol=cfg.cg_tol)
    if not np.isfinite(res) or not np.all(np.isfinite(delta)):
        raise ReconDivergenceError(f"CG diverged in ADMM iteration {iteration}")
    m = m + delta
    z = shrink(m + beta, cfg.reg_weight / eta, cfg.transform) if cfg.reg_weight > 0 else m + beta
    beta = beta + eta * (m - z)
    return ADMMState(m=m, z=z, beta=beta, d=d)


def admm_reconstruct(y: KSpaceData, coils: CoilProfile, mask=None, cfg: ReconConfig = ReconConfig(),
                     tsl_ms=None) -> ContrastImageSet:
    """Run ``cfg.n_iters`` ADMM iterations from the zero-filled image."""
    if cfg.mode != "classical":
        raise ValueError("admm_reconstruct runs the classical mode; use learned_admm_reconstruct")
    op = _operator(coils, y.mask if mask is None else mask)
    state = admm_init(op, y.y)
    for n in range(cfg.n_iters):
        state = admm_step(state, op, y.y, cfg, iteration=n + 1)
    tsl = range(y.n_tsl) if tsl_ms is None else tsl_ms
    return ContrastImageSet(state.m, tsl)


def cg_sense(y: KSpaceData, coils: CoilProfile, iters: int = 200, tol: float = 1e-12) -> np.ndarray:
    """Unregularized least-squares (CG-SENSE) solution of ``A m = y``."""
    op = MeasurementOperator(coils, y.mask)
    x, _, _ = conjugate_gradient(op.normal, op.apply_adjoint(y.y), iters=iters, tol=tol)
    return x


def tune_reg_weight(cases, cfg: ReconConfig = ReconConfig(), grid=REG_GRID, loss=None, eta_grid=None):
    """Pick ``reg_weight`` from ``grid * max|zero_filled|`` by mean loss.

    ``cases`` is a sequence of ``(y, coils, truth_images)``. The scale
    ``max|zero_filled|`` is taken as the median over cases. If ``eta_grid``
    is given the dual step is searched jointly. Returns ``(best_cfg, table)``
    where ``table`` lists ``(eta, reg_weight, mean_loss)``.
    """
    from ..nnet.losses import nrmse_loss

    loss = nrmse_loss if loss is None else loss
    etas = (cfg.eta,) if eta_grid is None else tuple(eta_grid)
    scale = float(np.median([np.max(np.abs(zero_filled(y, c).images)) for y, c, _ in cases]))
    table = []
    for eta in etas:
        for g in grid:
            trial = ReconConfig(**{**asdict(cfg), "eta": eta, "reg_weight": g * scale})
            vals = [loss(admm_reconstruct(y, c, cfg=trial).images, t) for y, c, t in cases]
            table.append((trial.eta, trial.reg_weight, float(np.mean(vals))))
    best = min(table, key=lambda row: row[2])
    return ReconConfig(**{**asdict(cfg), "eta": best[0], "reg_weight": best[1]}), table
