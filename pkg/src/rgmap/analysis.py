"""Pixel-wise T1rho estimation and evaluation metrics.

The fit is a Levenberg-Marquardt solve of the mono-exponential model
``S(t) = S0 exp(-t / T)`` vectorized over pixels: every pixel carries its
own damping factor and convergence flag, so results do not depend on how
pixels are batched.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import ContrastImageSet, ParamMap

__all__ = [
    "FitConfig",
    "FitResult",
    "RegionStats",
    "fit_pixels",
    "fit_monoexp_pixel",
    "two_point_fit",
    "fit_map",
    "nrmse",
    "snr_db",
    "region_stats",
    "write_pgm",
    "read_pgm",
    "METRICS_HEADER",
    "metrics_csv",
]


@dataclass(frozen=True)
class FitConfig:
    """Bounds, masking and Levenberg-Marquardt settings.

    ``intensity_floor`` is a fraction of the series maximum when used by
    :func:`fit_map` and an absolute level in :func:`fit_monoexp_pixel`.
    """

    t1rho_min: float = 1.0
    t1rho_max: float = 1000.0
    intensity_floor: float = 0.05
    max_lm_iters: int = 50
    lm_tol: float = 1e-10
    lm_lambda0: float = 1e-3

    def __post_init__(self):
        if not 0 < self.t1rho_min < self.t1rho_max:
            raise ValueError("need 0 < t1rho_min < t1rho_max")
        if self.intensity_floor < 0:
            raise ValueError("intensity_floor must be >= 0")
        if self.max_lm_iters < 1 or not self.lm_tol > 0 or not self.lm_lambda0 > 0:
            raise ValueError("invalid Levenberg-Marquardt settings")

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class FitResult:
    s0: np.ndarray
    t1rho_ms: np.ndarray
    residual: np.ndarray
    converged: np.ndarray
    valid: np.ndarray


def _loglinear_init(s, t, floor, cfg):
    y = np.log(np.maximum(s, max(floor, 1e-300)))
    tc = t - t.mean()
    slope = (y - y.mean(axis=1, keepdims=True)) @ tc / (tc @ tc)
    icpt = y.mean(axis=1) - slope * t.mean()
    with np.errstate(divide="ignore"):
        T = np.where(slope < 0, -1.0 / np.where(slope < 0, slope, -1.0), cfg.t1rho_max)
    T = np.clip(T, cfg.t1rho_min, cfg.t1rho_max)
    return np.exp(icpt), T


def _cost(s, t, s0, T):
    r = s0[:, None] * np.exp(-t[None, :] / T[:, None]) - s
    return np.einsum("ij,ij->i", r, r)


def fit_pixels(signals, tsl_ms, cfg: FitConfig = FitConfig(), floor: float = 0.0) -> FitResult:
    """Mono-exponential fits of many decay curves at once.

    Parameters
    ----------
    signals : ndarray, shape (P, n)
        Nonnegative samples, one row per pixel.
    tsl_ms : sequence of float, length n >= 2
    floor : float
        Absolute intensity floor; rows with every sample at or below it
        are returned invalid with zero parameters.

    Returns
    -------
    FitResult
        ``residual`` is the final sum of squared residuals; ``converged``
        marks rows whose last proposed step had relative norm below
        ``cfg.lm_tol``.
    """
    s = np.asarray(signals, dtype=np.float64)
    t = np.asarray(tsl_ms, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] != t.size:
        raise ValueError(f"signals {s.shape} do not match {t.size} spin-lock times")
    if t.size < 2:
        raise ValueError("need at least two samples per pixel")
    if np.any(s < 0):
        raise ValueError("signals must be nonnegative")
    P = s.shape[0]
    valid = np.any(s > floor, axis=1)
    s0 = np.zeros(P)
    T = np.zeros(P)
    conv = np.zeros(P, dtype=bool)
    res = np.zeros(P)
    idx = np.flatnonzero(valid)
    if idx.size:
        sv = s[idx]
        a, b = _loglinear_init(sv, t, floor, cfg)
        lam = np.full(idx.size, cfg.lm_lambda0)
        cost = _cost(sv, t, a, b)
        done = np.zeros(idx.size, dtype=bool)
        for _ in range(cfg.max_lm_iters):
            act = np.flatnonzero(~done)
            if act.size == 0:
                break
            aa, bb, ss = a[act], b[act], sv[act]
            e = np.exp(-t[None, :] / bb[:, None])
            r = aa[:, None] * e - ss
            j0 = e
            j1 = aa[:, None] * e * t[None, :] / (bb[:, None] ** 2)
            h00 = np.einsum("ij,ij->i", j0, j0)
            h01 = np.einsum("ij,ij->i", j0, j1)
            h11 = np.einsum("ij,ij->i", j1, j1)
            g0 = np.einsum("ij,ij->i", j0, r)
            g1 = np.einsum("ij,ij->i", j1, r)
            la = lam[act]
            d00 = h00 * (1 + la) + 1e-300
            d11 = h11 * (1 + la) + 1e-300
            det = d00 * d11 - h01 * h01
            det = np.where(det == 0, 1e-300, det)
            da = -(d11 * g0 - h01 * g1) / det
            db = -(d00 * g1 - h01 * g0) / det
            na = aa + da
            nb = np.clip(bb + db, cfg.t1rho_min, cfg.t1rho_max)
            new_cost = _cost(ss, t, na, nb)
            ok = new_cost <= cost[act]
            a[act] = np.where(ok, na, aa)
            b[act] = np.where(ok, nb, bb)
            cost[act] = np.where(ok, new_cost, cost[act])
            lam[act] = np.where(ok, la / 10.0, la * 10.0)
            step = np.hypot(na - aa, nb - bb)
            scale = np.hypot(aa, bb)
            done[act] = step < cfg.lm_tol * (scale + cfg.lm_tol)
        s0[idx], T[idx], res[idx], conv[idx] = a, b, cost, done
        good = valid.copy()
        good[idx] = a > 0
        valid = good
    s0 = np.where(valid, s0, 0.0)
    T = np.where(valid, T, 0.0)
    return FitResult(s0, T, res, conv & valid, valid)


def fit_monoexp_pixel(signal, tsl_ms, cfg: FitConfig = FitConfig()):
    """Fit one decay curve; returns ``(s0, t1rho_ms, residual, converged)``.

    ``cfg.intensity_floor`` is applied as an absolute level here. A curve
    entirely at or below it gives ``(0.0, 0.0, 0.0, False)``.
    """
    sig = np.asarray(signal, dtype=np.float64)
    if sig.ndim != 1 or sig.size != len(tsl_ms):
        raise ValueError("signal and tsl_ms lengths differ")
    r = fit_pixels(sig[None], tsl_ms, cfg, floor=cfg.intensity_floor)
    return float(r.s0[0]), float(r.t1rho_ms[0]), float(r.residual[0]), bool(r.converged[0])


def two_point_fit(s1, s2, t1: float, t2: float):
    """Closed-form mono-exponential through two samples.

    Works element-wise on arrays. Returns ``(s0, t1rho_ms, valid)``;
    entries with ``s1 <= s2`` or ``s2 <= 0`` are invalid and set to 0.
    """
    if not t1 < t2:
        raise ValueError("t1 must be smaller than t2")
    a = np.asarray(s1, dtype=np.float64)
    b = np.asarray(s2, dtype=np.float64)
    valid = (a > b) & (b > 0)
    sa = np.where(valid, a, 2.0)
    sb = np.where(valid, b, 1.0)
    T = (t2 - t1) / np.log(sa / sb)
    s0 = sa * np.exp(t1 / T)
    return np.where(valid, s0, 0.0), np.where(valid, T, 0.0), valid


def fit_map(series: ContrastImageSet, cfg: FitConfig = FitConfig()) -> ParamMap:
    """Pixel-wise fit of a magnitude series into a :class:`ParamMap`.

    Pixels whose samples all lie at or below ``intensity_floor`` times the
    series maximum, and pixels whose fit did not converge, are masked.
    """
    if series.n_tsl < 2:
        raise ValueError("fitting needs at least two contrasts")
    mag = np.abs(series.images)
    n, ny, nx = mag.shape
    floor = cfg.intensity_floor * float(mag.max(initial=0.0))
    r = fit_pixels(mag.reshape(n, -1).T, series.tsl_ms, cfg, floor=floor)
    ok = r.valid & r.converged
    shape = (ny, nx)
    return ParamMap(r.s0.reshape(shape), r.t1rho_ms.reshape(shape), ok.reshape(shape), r.residual.reshape(shape))


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------

def nrmse(est, ref, roi=None) -> float:
    """Normalized root-mean-square error within an optional boolean ROI."""
    e = np.asarray(est)
    r = np.asarray(ref)
    if e.shape != r.shape:
        raise ValueError(f"shape mismatch {e.shape} vs {r.shape}")
    if roi is not None:
        roi = np.asarray(roi, dtype=bool)
        e, r = e[..., roi], r[..., roi]
    den = np.sqrt(np.sum(np.abs(r) ** 2))
    if den == 0:
        raise ValueError("reference has zero norm inside the ROI")
    return float(np.sqrt(np.sum(np.abs(e - r) ** 2)) / den)


def snr_db(img, roi, noise_std: float) -> float:
    """``20 log10(mean |img| over roi / noise_std)``."""
    roi = np.asarray(roi, dtype=bool)
    if not roi.any():
        raise ValueError("empty ROI")
    if not noise_std > 0:
        raise ValueError("noise_std must be positive")
    return float(20.0 * np.log10(np.mean(np.abs(np.asarray(img))[roi]) / noise_std))


@dataclass(frozen=True)
class RegionStats:
    label: int
    n: int
    mean: float
    median: float
    q1: float
    q3: float

    @property
    def empty(self) -> bool:
        return self.n == 0


def region_stats(values, labels, valid=None) -> list:
    """Mean, median and linear-interpolation quartiles per nonzero label.

    ``values`` may be a :class:`ParamMap` (its T1rho map and valid mask are
    used) or a plain array. Regions without valid pixels yield a row with
    ``n == 0`` and NaN statistics.
    """
    if isinstance(values, ParamMap):
        valid = values.valid_mask if valid is None else valid
        values = values.t1rho_ms
    v = np.asarray(values, dtype=np.float64)
    lab = np.asarray(labels)
    if lab.shape != v.shape:
        raise ValueError("labels shape differs from the map")
    ok = np.ones(v.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    rows = []
    for k in np.unique(lab[lab != 0]):
        x = v[(lab == k) & ok]
        if x.size == 0:
            rows.append(RegionStats(int(k), 0, np.nan, np.nan, np.nan, np.nan))
            continue
        q1, med, q3 = np.percentile(x, [25, 50, 75])
        rows.append(RegionStats(int(k), int(x.size), float(x.mean()), float(med), float(q1), float(q3)))
    return rows


# --------------------------------------------------------------------------
# Export
# --------------------------------------------------------------------------

def write_pgm(path, image, vmax: float, vmin: float = 0.0) -> Path:
    """16-bit binary PGM with values mapped linearly from ``[vmin, vmax]``.

    A sidecar ``<name>.json`` records the window.
    """
    if not vmax > vmin:
        raise ValueError("empty display window")
    path = Path(path)
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM export needs a 2D image")
    scaled = np.clip((img - vmin) / (vmax - vmin), 0.0, 1.0) * 65535.0
    data = np.rint(np.nan_to_num(scaled)).astype(">u2")
    ny, nx = img.shape
    path.write_bytes(f"P5\n{nx} {ny}\n65535\n".encode("ascii") + data.tobytes())
    sidecar = {"window": [float(vmin), float(vmax)], "maxval": 65535, "width": nx, "height": ny}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def read_pgm(path) -> np.ndarray:
    """Raw 16-bit values of a file written by :func:`write_pgm`."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    nx, ny = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=">u2").reshape(ny, nx).astype(np.uint16)


METRICS_HEADER = ("experiment", "stage", "region", "metric", "value", "seed")


def metrics_csv(rows) -> str:
    """CSV text for ``(experiment, stage, region, metric, value, seed)`` rows."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for exp, stage, region, metric, value, seed in rows:
        w.writerow([exp, stage, region, metric, repr(float(value)), int(seed)])
    return buf.getvalue()
