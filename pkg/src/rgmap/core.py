"""Shared value types, seeded RNG helpers and the QTNS tensor format.

All arrays held by the value types are copied on construction and marked
read-only, so instances can be passed between workers freely.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "SEED_MAX",
    "check_seed",
    "rng_from",
    "derive_seed",
    "frozen",
    "ContrastImageSet",
    "ParamMap",
    "as_complex_image",
    "QTNSError",
    "BadMagicError",
    "TruncatedPayloadError",
    "UnknownDtypeError",
    "tensor_write",
    "tensor_read",
]

SEED_MAX = 2**64 - 1


# --------------------------------------------------------------------------
# Seeds
# --------------------------------------------------------------------------

def check_seed(seed) -> int:
    """Validate a seed as an unsigned 64-bit integer and return it as int."""
    if isinstance(seed, (bool, np.bool_)) or not isinstance(seed, (int, np.integer)):
        raise TypeError(f"seed must be an integer, got {type(seed).__name__}")
    seed = int(seed)
    if not 0 <= seed <= SEED_MAX:
        raise ValueError(f"seed {seed} outside unsigned 64-bit range")
    return seed


def _key(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    return int(k)


def rng_from(seed, *keys) -> np.random.Generator:
    """Return a PCG64 generator for ``seed`` specialised by ``keys``.

    Keys may be ints or strings; the same (seed, keys) always yields the
    same stream, and distinct keys give statistically independent streams.
    """
    ss = np.random.SeedSequence(check_seed(seed), spawn_key=tuple(_key(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed, *keys) -> int:
    """Derive a child u64 seed, e.g. one per contrast or per training slice."""
    ss = np.random.SeedSequence(check_seed(seed), spawn_key=tuple(_key(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# --------------------------------------------------------------------------
# Value types
# --------------------------------------------------------------------------

def frozen(a, dtype=None) -> np.ndarray:
    """Copy ``a`` into a new read-only array."""
    out = np.array(a, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


def as_complex_image(data) -> np.ndarray:
    """Validate a 2D complex image (finite, at least 8x8) and return it as complex128."""
    arr = np.asarray(data, dtype=np.complex128)
    if arr.ndim != 2:
        raise ValueError(f"complex image must be 2D, got shape {arr.shape}")
    if arr.shape[0] < 8 or arr.shape[1] < 8:
        raise ValueError(f"complex image must be at least 8x8, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("complex image contains NaN or Inf")
    return arr


@dataclass(frozen=True, eq=False)
class ContrastImageSet:
    """Stack of contrast-weighted images, one per spin-lock time.

    Attributes
    ----------
    images : ndarray, shape (n_tsl, ny, nx)
        Complex (or real magnitude) images.
    tsl_ms : tuple of float
        Spin-lock times in milliseconds, strictly increasing and >= 0.
    """

    images: np.ndarray
    tsl_ms: tuple

    def __post_init__(self):
        images = np.asarray(self.images)
        if images.ndim != 3:
            raise ValueError(f"images must be 3D (n_tsl, ny, nx), got shape {images.shape}")
        if not np.iscomplexobj(images):
            images = images.astype(np.float64)
        else:
            images = images.astype(np.complex128)
        tsl = tuple(float(t) for t in self.tsl_ms)
        if len(tsl) != images.shape[0]:
            raise ValueError(f"{images.shape[0]} images but {len(tsl)} spin-lock times")
        _check_tsl(tsl)
        if not np.all(np.isfinite(images)):
            raise ValueError("images contain NaN or Inf")
        object.__setattr__(self, "images", frozen(images))
        object.__setattr__(self, "tsl_ms", tsl)

    @property
    def n_tsl(self) -> int:
        return self.images.shape[0]

    @property
    def shape(self) -> tuple:
        return self.images.shape[1:]

    def magnitude(self) -> "ContrastImageSet":
        return ContrastImageSet(np.abs(self.images), self.tsl_ms)

    def select(self, indices: Sequence[int]) -> "ContrastImageSet":
        indices = list(indices)
        return ContrastImageSet(self.images[indices], [self.tsl_ms[i] for i in indices])


def _check_tsl(tsl):
    if len(tsl) == 0:
        raise ValueError("at least one spin-lock time is required")
    if any(t < 0 for t in tsl):
        raise ValueError(f"spin-lock times must be nonnegative: {tsl}")
    if any(b <= a for a, b in zip(tsl, tsl[1:])):
        raise ValueError(f"spin-lock times must be strictly increasing: {tsl}")


@dataclass(frozen=True, eq=False)
class ParamMap:
    """Per-pixel S0 and T1rho estimates.

    Invalid pixels carry exactly zero in ``s0`` and ``t1rho_ms``.
    """

    s0: np.ndarray
    t1rho_ms: np.ndarray
    valid_mask: np.ndarray
    residual: np.ndarray

    def __post_init__(self):
        valid = np.asarray(self.valid_mask, dtype=bool)
        s0 = np.where(valid, np.asarray(self.s0, dtype=np.float64), 0.0)
        t1 = np.where(valid, np.asarray(self.t1rho_ms, dtype=np.float64), 0.0)
        res = np.asarray(self.residual, dtype=np.float64)
        if not (s0.shape == t1.shape == valid.shape == res.shape) or s0.ndim != 2:
            raise ValueError("ParamMap fields must be 2D arrays of equal shape")
        if np.any(s0[valid] <= 0):
            raise ValueError("valid pixels must have s0 > 0")
        object.__setattr__(self, "s0", frozen(s0))
        object.__setattr__(self, "t1rho_ms", frozen(t1))
        object.__setattr__(self, "valid_mask", frozen(valid))
        object.__setattr__(self, "residual", frozen(res))

    @property
    def shape(self) -> tuple:
        return self.s0.shape


# --------------------------------------------------------------------------
# QTNS tensor files
# --------------------------------------------------------------------------

MAGIC = b"QTNS"
VERSION = 1

# codes 1-4 are the float/complex layouts; 5 and 6 carry masks and labels
_CODE_TO_DTYPE = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("<c8"),
    4: np.dtype("<c16"),
    5: np.dtype("u1"),
    6: np.dtype("<i8"),
}
_KIND_TO_CODE = {
    ("f", 4): 1,
    ("f", 8): 2,
    ("c", 8): 3,
    ("c", 16): 4,
}


class QTNSError(Exception):
    """Base class for QTNS read/write failures."""


class BadMagicError(QTNSError):
    pass


class TruncatedPayloadError(QTNSError):
    pass


class UnknownDtypeError(QTNSError):
    pass


def _dtype_code(arr: np.ndarray) -> tuple[int, np.ndarray]:
    if arr.dtype == np.bool_:
        return 5, arr.astype(np.uint8)
    if arr.dtype == np.uint8:
        return 5, arr
    if arr.dtype.kind in "iu":
        return 6, arr.astype(np.int64)
    code = _KIND_TO_CODE.get((arr.dtype.kind, arr.dtype.itemsize))
    if code is None:
        raise UnknownDtypeError(f"cannot serialize dtype {arr.dtype}")
    return code, arr


def tensor_write(path, t) -> None:
    """Write an array to ``path`` in QTNS format.

    Complex values are stored as interleaved (re, im) pairs, row-major,
    little-endian. Boolean arrays are stored as unsigned bytes (0/1).
    """
    arr = np.asarray(t)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if any(d == 0 for d in arr.shape):
        raise ValueError(f"zero-sized dimension rejected: shape {arr.shape}")
    code, arr = _dtype_code(arr)
    dtype = _CODE_TO_DTYPE[code]
    header = MAGIC + struct.pack("<III", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=dtype).tobytes(order="C")
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise QTNSError(f"failed to write {os.fspath(path)}: {exc}") from exc


def tensor_read(path) -> np.ndarray:
    """Read a QTNS file written by :func:`tensor_write`.

    Masks (code 5) come back as uint8; call ``.astype(bool)`` where needed.
    """
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise QTNSError(f"failed to read {os.fspath(path)}: {exc}") from exc
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{os.fspath(path)}: bad magic {raw[:4]!r}")
    if len(raw) < 16:
        raise TruncatedPayloadError(f"{os.fspath(path)}: truncated header")
    version, code, ndim = struct.unpack_from("<III", raw, 4)
    if version != VERSION:
        raise QTNSError(f"{os.fspath(path)}: unsupported version {version}")
    if code not in _CODE_TO_DTYPE:
        raise UnknownDtypeError(f"{os.fspath(path)}: unknown dtype code {code}")
    off = 16 + 8 * ndim
    if len(raw) < off:
        raise TruncatedPayloadError(f"{os.fspath(path)}: truncated header")
    shape = struct.unpack_from(f"<{ndim}Q", raw, 16)
    dtype = _CODE_TO_DTYPE[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(raw) - off < nbytes:
        raise TruncatedPayloadError(
            f"{os.fspath(path)}: payload has {len(raw) - off} bytes, header declares {nbytes}"
        )
    if len(raw) - off > nbytes:
        raise QTNSError(f"{os.fspath(path)}: {len(raw) - off - nbytes} trailing bytes")
    arr = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=off)
    return arr.reshape(shape).astype(dtype.newbyteorder("="))
