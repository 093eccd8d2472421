"""Composition of the modules into end-to-end experiments.

A *slice* is a rasterized phantom with its full contrast series and coil
sensitivities. Acquisition picks the contrasts to sample (all five, or the
first and last), draws one Poisson-disc mask per contrast and adds noise
calibrated on the first contrast. Everything downstream is a pure function
of the slice, the configuration and the seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import acquisition as acq
from .analysis import FitConfig, fit_map, nrmse
from .core import ContrastImageSet, ParamMap, derive_seed
from .phantom import KNEE_TSL_MS, PhantomSpec, preset, random_phantom, rasterize, synthesize
from .recon import LplusSConfig, ReconConfig, admm_reconstruct, ls_reconstruct, zero_filled

__all__ = [
    "SliceCase",
    "make_slice",
    "acquire",
    "acquire_with_mask",
    "acquisition_mask",
    "reconstruct",
    "acquired_indices",
    "t1rho_nrmse",
    "ExperimentConfig",
    "RECON_MODES",
    "GENERATION_MODES",
    "TrainRunConfig",
    "fit_series",
]

RECON_MODES = ("zero-filled", "admm", "learned-admm", "l+s")
GENERATION_MODES = ("none", "analytic", "model")


@dataclass(frozen=True, eq=False)
class SliceCase:
    spec: PhantomSpec
    truth: ParamMap
    labels: np.ndarray
    series: ContrastImageSet
    coils: acq.CoilProfile

    @property
    def roi(self) -> np.ndarray:
        return self.truth.valid_mask


def make_slice(seed, ny: int = 64, nx: int = 64, n_coils: int = 4, tsl_ms=KNEE_TSL_MS,
               spec: PhantomSpec | None = None, phase_mode: str = "zero") -> SliceCase:
    """Random phantom slice (or ``spec`` if given) with seeded coils."""
    spec = random_phantom(ny, nx, derive_seed(seed, "phantom")) if spec is None else spec
    truth, labels = rasterize(spec)
    series = synthesize(truth, tsl_ms, phase_mode=phase_mode)
    coils = acq.make_coils(n_coils, spec.ny, spec.nx, seed=derive_seed(seed, "coils"))
    return SliceCase(spec, truth, labels, series, coils)


def acquired_indices(n_tsl: int, r_tsl: float) -> tuple:
    """Contrast indices sampled for a contrast-reduction factor of 1 or 2.5."""
    if r_tsl == 1:
        return tuple(range(n_tsl))
    if r_tsl == 2.5:
        if n_tsl != 5:
            raise ValueError("r_tsl = 2.5 assumes a five-point TSL grid")
        return (0, n_tsl - 1)
    raise ValueError(f"r_tsl must be 1 or 2.5, got {r_tsl}")


def acquisition_mask(ny: int, nx: int, n_contrasts: int, r_k: float, seed=0,
                     calib_frac: float = acq.DEFAULT_CALIB_FRAC) -> acq.SamplingMask:
    """Masks used by :func:`acquire`; ``r_k = 1`` samples everything."""
    if r_k == 1:
        return acq.full_mask(n_contrasts, ny, nx)
    return acq.make_mask_set(ny, nx, n_contrasts, r_k, calib_frac, seed=derive_seed(seed, "mask"))


def acquire_with_mask(series: ContrastImageSet, coils: acq.CoilProfile, roi, mask: acq.SamplingMask,
                      contrasts, snr_db: float = math.inf, seed=0) -> acq.KSpaceData:
    """Sample ``series.select(contrasts)`` through ``mask`` and add noise.

    The noise level is set from the mean magnitude of the first contrast
    of the full ``series`` inside ``roi``, so equal ``snr_db`` means equal
    noise for every choice of ``contrasts``.
    """
    op = acq.MeasurementOperator(coils, mask)
    y = acq.forward(op, series.select(tuple(contrasts)))
    return acq.add_noise(y, snr_db, roi, series.images[0], seed=derive_seed(seed, "noise"))


def acquire(case: SliceCase, r_k: float, contrasts, snr_db: float = math.inf, seed=0,
            calib_frac: float = acq.DEFAULT_CALIB_FRAC) -> acq.KSpaceData:
    """Undersampled, noisy multi-coil k-space of the chosen contrasts of a slice."""
    contrasts = tuple(contrasts)
    ny, nx = case.series.shape
    mask = acquisition_mask(ny, nx, len(contrasts), r_k, seed, calib_frac)
    return acquire_with_mask(case.series, case.coils, case.roi, mask, contrasts, snr_db, seed)


def reconstruct(y: acq.KSpaceData, coils: acq.CoilProfile, mode: str, tsl_ms,
                recon_cfg: ReconConfig = ReconConfig(), ls_cfg: LplusSConfig = LplusSConfig(),
                learned=None) -> ContrastImageSet:
    """Dispatch to one of the reconstructors in :data:`RECON_MODES`."""
    if mode == "zero-filled":
        return zero_filled(y, coils, tsl_ms)
    if mode == "admm":
        return admm_reconstruct(y, coils, cfg=recon_cfg, tsl_ms=tsl_ms)
    if mode == "l+s":
        import warnings

        from .recon import ConvergenceWarning

        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            return ls_reconstruct(y, coils, cfg=ls_cfg, tsl_ms=tsl_ms).image
    if mode == "learned-admm":
        from .recon.learned import learned_admm_reconstruct

        if learned is None:
            raise ValueError("learned-admm needs a trained model")
        return learned_admm_reconstruct(y, coils, learned, tsl_ms=tsl_ms)
    raise ValueError(f"unknown reconstruction mode {mode!r}; choose from {RECON_MODES}")


def t1rho_nrmse(est: ParamMap, case_or_truth) -> float:
    """T1rho-map nRMSE inside the true phantom support (masked pixels count as 0)."""
    truth = case_or_truth.truth if isinstance(case_or_truth, SliceCase) else case_or_truth
    return nrmse(est.t1rho_ms, truth.t1rho_ms, truth.valid_mask)


def _snr_to_json(v):
    return None if math.isinf(v) else v


def _snr_from_json(v):
    if v is None or v == "inf":
        return math.inf
    return float(v)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to run one phantom through the pipeline.

    ``phantom`` is a preset name, ``"random"`` (seeded by ``seed``) or a
    :class:`PhantomSpec` dictionary. ``snr_db`` is ``None`` or ``"inf"``
    in JSON for noiseless data. ``recon_cfg``, ``ls_cfg`` and ``fit_cfg``
    hold keyword overrides for the respective config classes.
    """

    name: str = "experiment"
    phantom: object = "knee-like"
    ny: int = 64
    nx: int = 64
    tsl_ms: tuple = KNEE_TSL_MS
    phase_mode: str = "zero"
    n_coils: int = 4
    r_k: float = 6.8
    r_tsl: float = 2.5
    snr_db: float = math.inf
    recon: str = "admm"
    generation: str = "model"
    model_dir: str | None = None
    recon_model_dir: str | None = None
    recon_cfg: dict = field(default_factory=dict)
    ls_cfg: dict = field(default_factory=dict)
    fit_cfg: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tsl_ms", tuple(float(t) for t in self.tsl_ms))
        object.__setattr__(self, "snr_db", _snr_from_json(self.snr_db))
        if self.r_tsl not in (1, 2.5):
            raise ValueError(f"r_tsl must be 1 or 2.5, got {self.r_tsl}")
        if self.recon not in RECON_MODES:
            raise ValueError(f"unknown recon mode {self.recon!r}; choose from {RECON_MODES}")
        if self.generation not in GENERATION_MODES:
            raise ValueError(f"unknown generation mode {self.generation!r}; choose from {GENERATION_MODES}")
        if self.generation != "none" and self.r_tsl != 2.5:
            raise ValueError("generation requires r_tsl = 2.5")
        if self.generation == "model" and not self.model_dir:
            raise ValueError("generation = 'model' needs model_dir")
        if self.recon == "learned-admm" and not self.recon_model_dir:
            raise ValueError("recon = 'learned-admm' needs recon_model_dir")
        if self.r_k < 1:
            raise ValueError("r_k must be >= 1")

    @property
    def r_e(self) -> float:
        return self.r_k * self.r_tsl

    @property
    def recon_config(self) -> ReconConfig:
        return ReconConfig.from_dict(self.recon_cfg)

    @property
    def ls_config(self) -> LplusSConfig:
        return LplusSConfig(**self.ls_cfg)

    @property
    def fit_config(self) -> FitConfig:
        return FitConfig.from_dict(self.fit_cfg)

    def phantom_spec(self) -> PhantomSpec:
        if isinstance(self.phantom, dict):
            return PhantomSpec.from_dict(self.phantom)
        if self.phantom == "random":
            return random_phantom(self.ny, self.nx, derive_seed(self.seed, "phantom"))
        return preset(self.phantom, self.ny, self.nx)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tsl_ms"] = list(self.tsl_ms)
        d["snr_db"] = _snr_to_json(self.snr_db)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=int(seed))


def fit_series(series: ContrastImageSet, cfg: FitConfig = FitConfig()) -> ParamMap:
    return fit_map(series.magnitude(), cfg)


@dataclass(frozen=True)
class TrainRunConfig:
    """Synthetic training set plus the three-step schedule.

    Slices are random phantoms seeded from ``seed``; ``dataset`` may
    instead name a directory holding a ``dataset.json`` with explicit
    ``train_seeds`` and ``val_seeds`` (as written by a previous run).
    ``train`` holds :class:`~rgmap.generative.TrainConfig` overrides.
    """

    name: str = "train"
    n_train: int = 200
    n_val: int = 20
    ny: int = 64
    nx: int = 64
    n_coils: int = 4
    tsl_ms: tuple = KNEE_TSL_MS
    r_k: float = 6.8
    snr_db: float = math.inf
    recon: str = "admm"
    recon_cfg: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    eta_grid: tuple | None = None
    tune_cases: int = 16
    dataset: str | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tsl_ms", tuple(float(t) for t in self.tsl_ms))
        object.__setattr__(self, "snr_db", _snr_from_json(self.snr_db))
        if self.eta_grid is not None:
            object.__setattr__(self, "eta_grid", tuple(float(e) for e in self.eta_grid))
        if self.recon not in ("admm", "learned-admm"):
            raise ValueError(f"training supports recon 'admm' or 'learned-admm', got {self.recon!r}")
        if self.n_train < 1 or self.n_val < 1:
            raise ValueError("n_train and n_val must be >= 1")
        if len(self.tsl_ms) != 5:
            raise ValueError("training assumes a five-point TSL grid")

    def slice_seeds(self):
        """``(train_seeds, val_seeds)`` from ``dataset`` or derived from ``seed``."""
        if self.dataset is not None:
            from pathlib import Path

            path = Path(self.dataset) / "dataset.json"
            if not path.is_file():
                raise FileNotFoundError(f"dataset description not found: {path}")
            d = json.loads(path.read_text())
            return [int(s) for s in d["train_seeds"]], [int(s) for s in d["val_seeds"]]
        return ([derive_seed(self.seed, "train", i) for i in range(self.n_train)],
                [derive_seed(self.seed, "val", i) for i in range(self.n_val)])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tsl_ms"] = list(self.tsl_ms)
        d["snr_db"] = _snr_to_json(self.snr_db)
        d["eta_grid"] = None if self.eta_grid is None else list(self.eta_grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainRunConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)
