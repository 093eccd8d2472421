"""Ellipse phantoms and the mono-exponential spin-lock signal model.

A phantom is an ordered list of ellipses, each carrying an equilibrium
signal ``s0`` and a relaxation time ``t1rho_ms``. Later ellipses overwrite
earlier ones, and a pixel belongs to an ellipse when its centre lies inside.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import ContrastImageSet, ParamMap, rng_from

__all__ = [
    "KNEE_TSL_MS",
    "BRAIN_TSL_MS",
    "EllipseRegion",
    "PhantomSpec",
    "rasterize",
    "synthesize",
    "signal_model",
    "knee_like",
    "brain_like",
    "random_phantom",
    "preset",
]

KNEE_TSL_MS = (5.0, 10.0, 20.0, 40.0, 60.0)
BRAIN_TSL_MS = (1.0, 15.0, 25.0, 45.0, 65.0)


@dataclass(frozen=True)
class EllipseRegion:
    cx: float
    cy: float
    rx: float
    ry: float
    angle_deg: float
    s0: float
    t1rho_ms: float

    def __post_init__(self):
        if not self.s0 > 0:
            raise ValueError(f"s0 must be positive, got {self.s0}")
        if not 1.0 <= self.t1rho_ms <= 1000.0:
            raise ValueError(f"t1rho_ms must lie in [1, 1000], got {self.t1rho_ms}")
        if not (self.rx > 0 and self.ry > 0):
            raise ValueError(f"semi-axes must be positive, got ({self.rx}, {self.ry})")

    def contains(self, x, y):
        """Point test on fractional coordinates (broadcasts over arrays)."""
        a = np.deg2rad(self.angle_deg)
        dx, dy = x - self.cx, y - self.cy
        u = dx * np.cos(a) + dy * np.sin(a)
        v = -dx * np.sin(a) + dy * np.cos(a)
        return (u / self.rx) ** 2 + (v / self.ry) ** 2 <= 1.0


@dataclass(frozen=True)
class PhantomSpec:
    ny: int
    nx: int
    regions: tuple = field(default_factory=tuple)

    def __post_init__(self):
        regions = tuple(r if isinstance(r, EllipseRegion) else EllipseRegion(**r) for r in self.regions)
        if not regions:
            raise ValueError("a phantom needs at least one region")
        if self.ny < 8 or self.nx < 8:
            raise ValueError(f"grid must be at least 8x8, got {self.ny}x{self.nx}")
        object.__setattr__(self, "regions", regions)
        object.__setattr__(self, "ny", int(self.ny))
        object.__setattr__(self, "nx", int(self.nx))

    def to_dict(self) -> dict:
        return {"ny": self.ny, "nx": self.nx, "regions": [asdict(r) for r in self.regions]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(ny=d["ny"], nx=d["nx"], regions=tuple(EllipseRegion(**r) for r in d["regions"]))

    @classmethod
    def from_json(cls, text: str) -> "PhantomSpec":
        return cls.from_dict(json.loads(text))


def pixel_centers(ny: int, nx: int):
    """Fractional (x, y) coordinates of pixel centres, each of shape (ny, nx)."""
    y = (np.arange(ny) + 0.5) / ny
    x = (np.arange(nx) + 0.5) / nx
    return np.meshgrid(x, y, indexing="xy")


def rasterize(spec: PhantomSpec):
    """Rasterize a phantom into its ground-truth parameter map.

    Returns
    -------
    truth : ParamMap
        ``s0`` and ``t1rho_ms`` per pixel; background pixels are invalid.
    labels : ndarray of int, shape (ny, nx)
        Index of the last region covering each pixel, 1-based; 0 is background.
    """
    x, y = pixel_centers(spec.ny, spec.nx)
    s0 = np.zeros((spec.ny, spec.nx))
    t1 = np.zeros((spec.ny, spec.nx))
    labels = np.zeros((spec.ny, spec.nx), dtype=np.int64)
    for k, region in enumerate(spec.regions, start=1):
        inside = region.contains(x, y)
        s0[inside] = region.s0
        t1[inside] = region.t1rho_ms
        labels[inside] = k
    valid = labels > 0
    truth = ParamMap(s0=s0, t1rho_ms=t1, valid_mask=valid, residual=np.zeros_like(s0))
    return truth, labels


def signal_model(s0, t1rho_ms, tsl_ms):
    """S(TSL) = S0 * exp(-TSL / T1rho), broadcast with TSL on a new leading axis."""
    tsl = np.asarray(tsl_ms, dtype=np.float64).reshape((-1,) + (1,) * np.ndim(s0))
    return np.asarray(s0) * np.exp(-tsl / np.asarray(t1rho_ms))


def quadratic_phase(ny: int, nx: int) -> np.ndarray:
    """A fixed smooth unit-modulus phase map (about 1.2 rad peak-to-peak)."""
    x, y = pixel_centers(ny, nx)
    phi = np.pi * (0.9 * (x - 0.45) ** 2 + 0.6 * (y - 0.55) ** 2 + 0.3 * (x - 0.5) * (y - 0.5))
    return np.exp(1j * phi)


def synthesize(truth: ParamMap, tsl_ms, phase_mode: str = "zero") -> ContrastImageSet:
    """Contrast-weighted images of ``truth`` at each spin-lock time.

    Invalid pixels are zero. ``phase_mode="smooth-quadratic"`` multiplies
    every image by the same smooth unit-modulus phase.
    """
    tsl = [float(t) for t in tsl_ms]
    if not tsl:
        raise ValueError("tsl_ms must not be empty")
    valid = truth.valid_mask
    t1 = np.where(valid, truth.t1rho_ms, 1.0)
    images = np.where(valid, signal_model(truth.s0, t1, tsl), 0.0).astype(np.complex128)
    if phase_mode == "smooth-quadratic":
        images = images * quadratic_phase(*truth.shape)
    elif phase_mode != "zero":
        raise ValueError(f"unknown phase_mode {phase_mode!r}")
    return ContrastImageSet(images, tsl)


# --------------------------------------------------------------------------
# Presets
# --------------------------------------------------------------------------

def knee_like(ny: int = 128, nx: int = 128) -> PhantomSpec:
    """Knee-like slice: muscle, two bone ellipses and cartilage bands of 40-60 ms."""
    R = EllipseRegion
    regions = (
        R(0.50, 0.50, 0.44, 0.46, 0.0, 0.55, 32.0),    # soft tissue / muscle
        R(0.50, 0.30, 0.30, 0.17, 0.0, 0.95, 58.0),    # femoral cartilage band
        R(0.50, 0.28, 0.27, 0.14, 0.0, 0.40, 25.0),    # femur marrow
        R(0.50, 0.70, 0.29, 0.15, 0.0, 0.90, 45.0),    # tibial cartilage band
        R(0.50, 0.72, 0.26, 0.12, 0.0, 0.42, 27.0),    # tibia marrow
        R(0.30, 0.50, 0.10, 0.05, 15.0, 0.85, 40.0),   # meniscus-adjacent cartilage
        R(0.72, 0.50, 0.09, 0.05, -15.0, 0.80, 52.0),
    )
    return PhantomSpec(ny, nx, regions)


def brain_like(ny: int = 128, nx: int = 128) -> PhantomSpec:
    """Brain-like slice: gray matter 80 ms, white matter 60 ms, CSF 150 ms."""
    R = EllipseRegion
    regions = (
        R(0.50, 0.50, 0.40, 0.46, 0.0, 0.80, 80.0),    # gray matter
        R(0.50, 0.50, 0.33, 0.39, 0.0, 0.70, 60.0),    # white matter
        R(0.42, 0.45, 0.05, 0.14, 18.0, 1.00, 150.0),  # ventricles
        R(0.58, 0.45, 0.05, 0.14, -18.0, 1.00, 150.0),
        R(0.50, 0.72, 0.08, 0.05, 0.0, 0.85, 80.0),    # deep gray nucleus
        R(0.35, 0.68, 0.04, 0.04, 0.0, 0.80, 90.0),
    )
    return PhantomSpec(ny, nx, regions)


def random_phantom(ny: int, nx: int, seed, n_regions: tuple = (4, 9)) -> PhantomSpec:
    """Random ellipse phantom for training-set construction.

    An outer support ellipse is followed by a seeded number of interior
    ellipses with T1rho in [20, 160] ms and s0 in [0.3, 1.0].
    """
    rng = rng_from(seed, "random_phantom")
    regions = [
        EllipseRegion(
            cx=0.5 + rng.uniform(-0.04, 0.04),
            cy=0.5 + rng.uniform(-0.04, 0.04),
            rx=rng.uniform(0.36, 0.45),
            ry=rng.uniform(0.36, 0.45),
            angle_deg=rng.uniform(-30, 30),
            s0=rng.uniform(0.4, 0.9),
            t1rho_ms=rng.uniform(30, 90),
        )
    ]
    for _ in range(int(rng.integers(n_regions[0], n_regions[1] + 1))):
        r = rng.uniform(0.0, 0.25)
        theta = rng.uniform(0, 2 * np.pi)
        regions.append(
            EllipseRegion(
                cx=0.5 + r * np.cos(theta),
                cy=0.5 + r * np.sin(theta),
                rx=rng.uniform(0.04, 0.18),
                ry=rng.uniform(0.04, 0.18),
                angle_deg=rng.uniform(-90, 90),
                s0=rng.uniform(0.3, 1.0),
                t1rho_ms=float(np.exp(rng.uniform(np.log(20.0), np.log(160.0)))),
            )
        )
    return PhantomSpec(ny, nx, tuple(regions))


def preset(name: str, ny: int = 128, nx: int = 128) -> PhantomSpec:
    presets = {"knee-like": knee_like, "brain-like": brain_like}
    if name not in presets:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(presets)}")
    return presets[name](ny, nx)
