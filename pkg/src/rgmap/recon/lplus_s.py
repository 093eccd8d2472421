"""Low-rank plus sparse reconstruction of a contrast series.

The series is arranged as a Casorati matrix (pixels x contrasts) and split
into ``L + S`` by block-coordinate descent on::

    J(L, S, M) = lambda_L |L|_* + lambda_S |T S|_1 + 1/2 |M - L - S|^2

with ``T`` the unitary DFT along the contrast axis:

* L-step: singular-value soft-thresholding of ``M - S``
* S-step: soft-thresholding of ``T (M - L)``, then the inverse DFT
* M-step: data consistency. Each coil's k-space of ``L + S`` has its
  sampled entries replaced by the acquired values, and the coils are
  recombined with their sensitivities: ``M = X - A^H (A X - y)``.

For a single coil of unit-modulus sensitivity the M-step is the exact
projection onto the data-consistent set, so ``J`` is non-increasing and
``A (L + S) = y`` holds at the sampled points after the final step. With
several overlapping coils the recombined image is only approximately
consistent.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from ..acquisition import CoilProfile, KSpaceData, MeasurementOperator
from ..core import ContrastImageSet
from .transforms import soft_threshold

__all__ = ["LplusSConfig", "LplusSResult", "svt", "ls_reconstruct", "ConvergenceWarning"]


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class LplusSConfig:
    lambda_L: float = 0.01
    lambda_S: float = 0.005
    max_iters: int = 50
    tol: float = 1e-4

    def __post_init__(self):
        if not (self.lambda_L > 0 and self.lambda_S > 0):
            raise ValueError("L+S thresholds must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")


@dataclass(frozen=True, eq=False)
class LplusSResult:
    L: ContrastImageSet
    S: ContrastImageSet
    converged: bool
    n_iters: int
    objective: tuple = field(default_factory=tuple)

    @property
    def image(self) -> ContrastImageSet:
        return ContrastImageSet(self.L.images + self.S.images, self.L.tsl_ms)


def svt(X, tau):
    """Singular-value soft-thresholding of a 2D matrix; returns (X_tau, shrunk singular values)."""
    u, s, vh = np.linalg.svd(X, full_matrices=False)
    s = np.maximum(s - tau, 0.0)
    return (u * s) @ vh, s


def _tdft(x):
    return np.fft.fft(x, axis=0, norm="ortho")


def _itdft(x):
    return np.fft.ifft(x, axis=0, norm="ortho")


def data_consistency(op: MeasurementOperator, y, x):
    """Replace sampled k-space entries coil by coil and recombine."""
    return x - op.apply_adjoint(op.apply(x) - y)


def lplus_s_objective(L, S, M, cfg: LplusSConfig) -> float:
    nt = L.shape[0]
    sv = np.linalg.svd(L.reshape(nt, -1).T, compute_uv=False)
    return float(cfg.lambda_L * sv.sum() + cfg.lambda_S * np.sum(np.abs(_tdft(S)))
                 + 0.5 * np.sum(np.abs(M - L - S) ** 2))


def ls_reconstruct(y: KSpaceData, coils: CoilProfile, mask=None, cfg: LplusSConfig = LplusSConfig(),
                   tsl_ms=None, track_objective: bool = False) -> LplusSResult:
    """Low-rank plus sparse decomposition with data consistency.

    The returned ``S`` absorbs the final data-consistency correction, so
    ``L + S`` is the data-consistent image. If ``max_iters`` runs out
    before the relative change of ``M`` drops below ``tol``, a
    :class:`ConvergenceWarning` is issued and ``converged`` is False; the
    last iterate is still returned.
    """
    if y.n_tsl < 2:
        raise ValueError("L+S needs at least two contrasts")
    op = MeasurementOperator(coils, y.mask if mask is None else mask)
    yy = y.y
    nt = y.n_tsl
    shape = yy.shape[1:]
    M = op.apply_adjoint(yy)
    L = np.zeros_like(M)
    S = np.zeros_like(M)
    history = []
    converged = False
    k = 0
    for k in range(1, cfg.max_iters + 1):
        M_prev = M
        Lc, _ = svt((M - S).reshape(nt, -1).T, cfg.lambda_L)
        L = Lc.T.reshape(shape)
        S = _itdft(soft_threshold(_tdft(M - L), cfg.lambda_S))
        M = data_consistency(op, yy, L + S)
        if track_objective:
            history.append(lplus_s_objective(L, S, M, cfg))
        denom = np.linalg.norm(M_prev)
        change = np.linalg.norm(M - M_prev) / denom if denom > 0 else 0.0
        if change < cfg.tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"L+S did not converge in {cfg.max_iters} iterations", ConvergenceWarning,
                      stacklevel=2)
    S = M - L
    tsl = range(nt) if tsl_ms is None else tsl_ms
    return LplusSResult(ContrastImageSet(L, tsl), ContrastImageSet(S, tsl), converged, k, tuple(history))
