"""Multi-coil Cartesian acquisition: coils, masks, the measurement operator and noise.

The measurement operator is ``A = P F C``: coil weighting, a centred unitary
2D DFT, and a per-contrast sampling mask. Every contrast is encoded
independently, so ``A`` is block diagonal over the contrast axis.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numba
import numpy as np
import scipy.fft as spfft

from .core import ContrastImageSet, check_seed, derive_seed, frozen, rng_from

__all__ = [
    "CoilProfile",
    "SamplingMask",
    "KSpaceData",
    "MeasurementOperator",
    "fft2c",
    "ifft2c",
    "make_coils",
    "forward",
    "adjoint",
    "make_poisson_mask",
    "make_mask_set",
    "full_mask",
    "noise_sigma",
    "add_noise",
    "coil_combine",
    "DEFAULT_CALIB_FRAC",
]

DEFAULT_CALIB_FRAC = 1.0 / 16.0


@functools.lru_cache(maxsize=32)
def _checkerboard(ny: int, nx: int) -> np.ndarray:
    # for even sizes fftshift(fft(ifftshift(x))) == sign * c * fft(c * x), c = (-1)^(i+j)
    return (-1.0) ** np.add.outer(np.arange(ny), np.arange(nx))


def fft2c(x):
    """Centred unitary 2D DFT over the last two axes."""
    ny, nx = x.shape[-2:]
    if ny % 2 == 0 and nx % 2 == 0:
        c = _checkerboard(ny, nx)
        sign = (-1.0) ** ((ny // 2 + nx // 2) % 2)
        return spfft.fft2(x * c, norm="ortho") * (c * sign)
    x = np.fft.ifftshift(x, axes=(-2, -1))
    return np.fft.fftshift(spfft.fft2(x, norm="ortho"), axes=(-2, -1))


def ifft2c(k):
    """Inverse of :func:`fft2c`."""
    ny, nx = k.shape[-2:]
    if ny % 2 == 0 and nx % 2 == 0:
        c = _checkerboard(ny, nx)
        sign = (-1.0) ** ((ny // 2 + nx // 2) % 2)
        return spfft.ifft2(k * c, norm="ortho") * (c * sign)
    k = np.fft.ifftshift(k, axes=(-2, -1))
    return np.fft.fftshift(spfft.ifft2(k, norm="ortho"), axes=(-2, -1))


# --------------------------------------------------------------------------
# Types
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CoilProfile:
    """Complex coil sensitivities, shape (n_coils, ny, nx), sum-of-squares normalized."""

    sens: np.ndarray

    def __post_init__(self):
        sens = np.asarray(self.sens, dtype=np.complex128)
        if sens.ndim != 3:
            raise ValueError(f"sens must be 3D (n_coils, ny, nx), got {sens.shape}")
        sos = np.sum(np.abs(sens) ** 2, axis=0)
        if np.max(np.abs(sos - 1.0)) > 1e-10:
            raise ValueError("coil sensitivities are not sum-of-squares normalized")
        object.__setattr__(self, "sens", frozen(sens))

    @property
    def n_coils(self) -> int:
        return self.sens.shape[0]

    @property
    def shape(self) -> tuple:
        return self.sens.shape[1:]


@dataclass(frozen=True, eq=False)
class SamplingMask:
    """Per-contrast boolean sampling pattern, shape (n_tsl, ny, nx)."""

    mask: np.ndarray
    r_target: float = 1.0
    calib_frac: float = DEFAULT_CALIB_FRAC

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        if mask.ndim == 2:
            mask = mask[None]
        if mask.ndim != 3:
            raise ValueError(f"mask must be 3D (n_tsl, ny, nx), got {mask.shape}")
        object.__setattr__(self, "mask", frozen(mask))
        object.__setattr__(self, "r_target", float(self.r_target))
        object.__setattr__(self, "calib_frac", float(self.calib_frac))

    @property
    def n_tsl(self) -> int:
        return self.mask.shape[0]

    def realized_acceleration(self) -> np.ndarray:
        """Total points over sampled points, one value per contrast."""
        n = self.mask.shape[1] * self.mask.shape[2]
        return n / self.mask.reshape(self.n_tsl, -1).sum(axis=1)

    def select(self, indices) -> "SamplingMask":
        return SamplingMask(self.mask[list(indices)], self.r_target, self.calib_frac)


@dataclass(frozen=True, eq=False)
class KSpaceData:
    """Undersampled multi-coil k-space, shape (n_coils, n_tsl, ny, nx); zero where not sampled."""

    y: np.ndarray
    mask: SamplingMask
    noise_std: float = 0.0

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.complex128)
        if y.ndim != 4 or y.shape[1:] != self.mask.mask.shape:
            raise ValueError(f"k-space shape {y.shape} does not match mask {self.mask.mask.shape}")
        if np.any(y[:, ~self.mask.mask] != 0):
            raise ValueError("k-space must be zero at unsampled locations")
        object.__setattr__(self, "y", frozen(y))
        object.__setattr__(self, "noise_std", float(self.noise_std))

    @property
    def n_coils(self) -> int:
        return self.y.shape[0]

    @property
    def n_tsl(self) -> int:
        return self.y.shape[1]


@dataclass(frozen=True, eq=False)
class MeasurementOperator:
    """``A = P F C`` for a coil profile and (optionally) a sampling mask.

    ``mask=None`` means full sampling; in that case the operator accepts any
    number of contrasts.
    """

    coils: CoilProfile
    mask: SamplingMask | None = None

    def _mask_for(self, n_tsl):
        if self.mask is None:
            return None
        if self.mask.n_tsl != n_tsl:
            raise ValueError(f"mask has {self.mask.n_tsl} contrasts, data has {n_tsl}")
        return self.mask.mask

    @functools.cached_property
    def _fast(self):
        # coil maps and mask premultiplied by the centring checkerboard
        ny, nx = self.coils.shape
        if ny % 2 or nx % 2:
            return None
        c = _checkerboard(ny, nx)
        sign = (-1.0) ** ((ny // 2 + nx // 2) % 2)
        post = c * sign if self.mask is None else self.mask.mask * (c * sign)
        return self.coils.sens[:, None] * c, np.conj(self.coils.sens)[:, None] * (c * sign), post, c

    def apply(self, x: np.ndarray) -> np.ndarray:
        """(n_tsl, ny, nx) images -> (n_coils, n_tsl, ny, nx) k-space."""
        x = np.asarray(x)
        if x.ndim != 3 or x.shape[1:] != self.coils.shape:
            raise ValueError(f"image shape {x.shape} incompatible with coils {self.coils.shape}")
        m = self._mask_for(x.shape[0])
        fast = self._fast
        if fast is not None:
            sc, _, post, _ = fast
            return spfft.fft2(sc * x[None], norm="ortho", overwrite_x=True) * post
        k = fft2c(self.coils.sens[:, None] * x[None])
        return k if m is None else k * m

    def apply_adjoint(self, y: np.ndarray) -> np.ndarray:
        """(n_coils, n_tsl, ny, nx) k-space -> (n_tsl, ny, nx) images."""
        y = np.asarray(y)
        if y.ndim != 4 or y.shape[0] != self.coils.n_coils or y.shape[2:] != self.coils.shape:
            raise ValueError(f"k-space shape {y.shape} incompatible with coils {self.coils.sens.shape}")
        m = self._mask_for(y.shape[1])
        fast = self._fast
        if fast is not None:
            _, csc, _, c = fast
            pre = c if m is None else m * c
            return np.sum(csc * spfft.ifft2(y * pre, norm="ortho", overwrite_x=True), axis=0)
        if m is not None:
            y = y * m
        return np.sum(np.conj(self.coils.sens)[:, None] * ifft2c(y), axis=0)

    def normal(self, x: np.ndarray) -> np.ndarray:
        return self.apply_adjoint(self.apply(x))


# --------------------------------------------------------------------------
# Coils
# --------------------------------------------------------------------------

def make_coils(n_coils: int, ny: int, nx: int, seed=0) -> CoilProfile:
    """Smooth simulated coil sensitivities arranged around the field of view.

    Each coil has a Gaussian magnitude falloff from a point outside the
    object and a low-order linear phase; profiles are then normalized so
    the sum of squared magnitudes is exactly one at every pixel.
    """
    if n_coils < 1:
        raise ValueError("n_coils must be >= 1")
    if n_coils == 1:
        return CoilProfile(np.ones((1, ny, nx), dtype=np.complex128))
    rng = rng_from(seed, "coils", n_coils, ny, nx)
    y = (np.arange(ny) + 0.5) / ny - 0.5
    x = (np.arange(nx) + 0.5) / nx - 0.5
    xx, yy = np.meshgrid(x, y, indexing="xy")
    sens = np.empty((n_coils, ny, nx), dtype=np.complex128)
    offset = rng.uniform(0, 2 * np.pi)
    for c in range(n_coils):
        theta = offset + 2 * np.pi * c / n_coils + rng.uniform(-0.15, 0.15)
        dist = rng.uniform(0.55, 0.75)
        width = rng.uniform(0.35, 0.5)
        px, py = dist * np.cos(theta), dist * np.sin(theta)
        mag = np.exp(-((xx - px) ** 2 + (yy - py) ** 2) / (2 * width**2))
        gx, gy, p0 = rng.uniform(-np.pi, np.pi, size=3)
        sens[c] = mag * np.exp(1j * (p0 + gx * xx + gy * yy))
    sens /= np.sqrt(np.sum(np.abs(sens) ** 2, axis=0))
    return CoilProfile(sens)


# --------------------------------------------------------------------------
# Forward / adjoint on typed values
# --------------------------------------------------------------------------

def forward(op: MeasurementOperator, img: ContrastImageSet) -> KSpaceData:
    y = op.apply(img.images)
    mask = op.mask if op.mask is not None else full_mask(img.n_tsl, *img.shape)
    return KSpaceData(y, mask)


def adjoint(op: MeasurementOperator, y: KSpaceData, tsl_ms=None) -> ContrastImageSet:
    if tsl_ms is None:
        tsl_ms = range(y.n_tsl)
    if op.mask is None:
        op = MeasurementOperator(op.coils, y.mask)
    return ContrastImageSet(op.apply_adjoint(y.y), tsl_ms)


# --------------------------------------------------------------------------
# Sampling masks
# --------------------------------------------------------------------------

def full_mask(n_tsl: int, ny: int, nx: int) -> SamplingMask:
    return SamplingMask(np.ones((n_tsl, ny, nx), dtype=bool), 1.0, 1.0)


def calibration_region(ny: int, nx: int, calib_frac: float) -> np.ndarray:
    """Fully sampled central block: ``round(calib_frac * n)`` lines per axis."""
    calib = np.zeros((ny, nx), dtype=bool)
    cy, cx = max(int(round(calib_frac * ny)), 0), max(int(round(calib_frac * nx)), 0)
    if cy and cx:
        y0, x0 = ny // 2 - cy // 2, nx // 2 - cx // 2
        calib[y0:y0 + cy, x0:x0 + cx] = True
    return calib


def _radius_profile(ny: int, nx: int, slope: float) -> np.ndarray:
    """Radius growth ``1 + slope * |k|/k_max`` with k normalized per axis."""
    ky = (np.arange(ny) - ny // 2) / (ny / 2)
    kx = (np.arange(nx) - nx // 2) / (nx / 2)
    kk = np.sqrt(ky[:, None] ** 2 + kx[None, :] ** 2) / np.sqrt(2.0)
    return 1.0 + slope * kk


@numba.njit(cache=True)
def _dart_throw(order, radius, calib):
    ny, nx = radius.shape
    taken = calib.copy()
    for idx in order:
        i = idx // nx
        j = idx % nx
        if taken[i, j]:
            continue
        r = radius[i, j]
        w = int(math.ceil(r))
        rr = r * r
        ok = True
        for di in range(-w, w + 1):
            ii = i + di
            if ii < 0 or ii >= ny:
                continue
            for dj in range(-w, w + 1):
                jj = j + dj
                if jj < 0 or jj >= nx:
                    continue
                if taken[ii, jj] and di * di + dj * dj < rr:
                    ok = False
                    break
            if not ok:
                break
        if ok:
            taken[i, j] = True
    return taken


def make_poisson_mask(ny: int, nx: int, r_target: float, calib_frac: float = DEFAULT_CALIB_FRAC,
                      seed=0, slope: float = 2.0, tol: float = 0.01, max_bisect: int = 60) -> np.ndarray:
    """Variable-density Poisson-disc sampling mask.

    Candidates are visited in a seeded random order and accepted when no
    already-accepted point lies closer than ``r0 * (1 + slope * |k|/k_max)``
    pixels. ``r0`` is found by bisection so the realized acceleration
    ``ny*nx / n_sampled`` is within ``tol`` (relative) of ``r_target``;
    the result is guaranteed to be within 5%. The central calibration
    block is always fully sampled.

    Raises
    ------
    ValueError
        If the target cannot be reached within 5% on this grid.
    """
    if r_target < 1:
        raise ValueError(f"r_target must be >= 1, got {r_target}")
    if not 0 <= calib_frac < 1:
        raise ValueError(f"calib_frac must lie in [0, 1), got {calib_frac}")
    check_seed(seed)
    n = ny * nx
    if r_target == 1:
        return np.ones((ny, nx), dtype=bool)
    target = n / r_target
    calib = calibration_region(ny, nx, calib_frac)
    if calib.sum() > target * 1.05:
        raise ValueError(f"calibration block alone exceeds the sample budget for R={r_target}")
    order = rng_from(seed, "poisson_mask", ny, nx).permutation(n).astype(np.int64)
    profile = _radius_profile(ny, nx, slope)

    def count(r0):
        m = _dart_throw(order, r0 * profile, calib)
        return m, int(m.sum())

    lo, hi = 0.5 / profile.max(), 1.0
    _, c_hi = count(hi)
    while c_hi > target:
        lo, hi = hi, hi * 2.0
        if hi > 4 * max(ny, nx):
            raise ValueError(f"acceleration {r_target} infeasible on a {ny}x{nx} grid")
        _, c_hi = count(hi)

    best, best_err = None, np.inf
    for _ in range(max_bisect):
        mid = 0.5 * (lo + hi)
        m, c = count(mid)
        err = abs(n / c - r_target) / r_target
        if err < best_err:
            best, best_err = m, err
        if err <= tol:
            break
        if c > target:
            lo = mid
        else:
            hi = mid
    if best_err > 0.05:
        raise ValueError(
            f"could not reach R={r_target} within 5% on a {ny}x{nx} grid (best error {best_err:.3f})"
        )
    return best


def make_mask_set(ny: int, nx: int, n_tsl: int, r_target: float,
                  calib_frac: float = DEFAULT_CALIB_FRAC, seed=0) -> SamplingMask:
    """One Poisson-disc mask per contrast, pairwise distinct.

    Contrast 0 uses ``seed`` itself (so ``n_tsl=1`` matches
    :func:`make_poisson_mask`); contrast ``i`` uses a seed derived from
    ``(seed, i)``.
    """
    masks = []
    for i in range(n_tsl):
        s = seed if i == 0 else derive_seed(seed, "contrast", i)
        attempt = 0
        while True:
            m = make_poisson_mask(ny, nx, r_target, calib_frac, s)
            if r_target == 1 or not any(np.array_equal(m, prev) for prev in masks):
                break
            attempt += 1
            s = derive_seed(seed, "contrast", i, "retry", attempt)
        masks.append(m)
    return SamplingMask(np.stack(masks), r_target, calib_frac)


# --------------------------------------------------------------------------
# Noise and coil combination
# --------------------------------------------------------------------------

def noise_sigma(snr_db: float, roi, clean_combined) -> float:
    """Noise standard deviation that gives ``snr_db`` = 20 log10(mean|m| / sigma) over ``roi``."""
    roi = np.asarray(roi, dtype=bool)
    if not roi.any():
        raise ValueError("roi is empty")
    if math.isinf(snr_db) and snr_db > 0:
        return 0.0
    mean = float(np.mean(np.abs(np.asarray(clean_combined))[..., roi]))
    return mean / 10.0 ** (snr_db / 20.0)


def add_noise(y: KSpaceData, snr_db: float, roi, clean_combined, seed=0) -> KSpaceData:
    """Add complex white Gaussian noise at the sampled k-space locations.

    ``sigma`` follows from the mean magnitude of ``clean_combined`` inside
    ``roi``; each of the real and imaginary parts has std ``sigma/sqrt(2)``.
    ``snr_db=inf`` returns the data unchanged.
    """
    sigma = noise_sigma(snr_db, roi, clean_combined)
    if sigma == 0.0:
        return y
    rng = rng_from(seed, "kspace_noise")
    shape = y.y.shape
    noise = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * (sigma / np.sqrt(2.0))
    return KSpaceData(y.y + noise * y.mask.mask[None], y.mask, sigma)


def coil_combine(per_coil, coils: CoilProfile) -> np.ndarray:
    """Sensitivity-weighted combination ``sum_c conj(s_c) * x_c``.

    Accepts (n_coils, ny, nx) or (n_coils, n_tsl, ny, nx) inputs.
    """
    per_coil = np.asarray(per_coil)
    if per_coil.shape[0] != coils.n_coils or per_coil.shape[-2:] != coils.shape:
        raise ValueError(f"per-coil shape {per_coil.shape} does not match coils {coils.sens.shape}")
    sens = np.conj(coils.sens)
    if per_coil.ndim == 4:
        sens = sens[:, None]
    return np.sum(sens * per_coil, axis=0)
