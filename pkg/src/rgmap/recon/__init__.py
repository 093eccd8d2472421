"""Reconstruction of contrast-weighted images from undersampled multi-coil k-space."""

from .admm import (
    ADMMState,
    ReconConfig,
    ReconDivergenceError,
    admm_reconstruct,
    admm_step,
    cg_sense,
    conjugate_gradient,
    tune_reg_weight,
    zero_filled,
)
from .lplus_s import ConvergenceWarning, LplusSConfig, LplusSResult, ls_reconstruct, svt
from .learned import (
    LearnedADMM,
    UntrainedModelError,
    learned_admm_reconstruct,
    train_learned_admm,
)
from .transforms import haar2, ihaar2, shrink, soft_threshold

__all__ = [
    "ADMMState",
    "ReconConfig",
    "ReconDivergenceError",
    "admm_reconstruct",
    "admm_step",
    "cg_sense",
    "conjugate_gradient",
    "tune_reg_weight",
    "zero_filled",
    "ConvergenceWarning",
    "LplusSConfig",
    "LplusSResult",
    "ls_reconstruct",
    "svt",
    "LearnedADMM",
    "UntrainedModelError",
    "learned_admm_reconstruct",
    "train_learned_admm",
    "haar2",
    "ihaar2",
    "shrink",
    "soft_threshold",
]
