import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from rgmap.core import (
    BadMagicError,
    ContrastImageSet,
    ParamMap,
    QTNSError,
    TruncatedPayloadError,
    UnknownDtypeError,
    as_complex_image,
    check_seed,
    derive_seed,
    rng_from,
    tensor_read,
    tensor_write,
)


def test_qtns_2x2_layout(tmp_path):
    p = tmp_path / "a.qtns"
    tensor_write(p, np.array([[1.0, 2.0], [3.0, 4.0]]))
    raw = p.read_bytes()
    # 4 magic + 3 u32 + 2 u64 = 32 header bytes, 4 float64 = 32 payload bytes
    assert raw[:4] == b"QTNS"
    assert struct.unpack_from("<III", raw, 4) == (1, 2, 2)
    assert struct.unpack_from("<2Q", raw, 16) == (2, 2)
    assert len(raw) == 32 + 32
    assert np.frombuffer(raw[32:], "<f8").tolist() == [1, 2, 3, 4]
    np.testing.assert_array_equal(tensor_read(p), [[1, 2], [3, 4]])


def test_qtns_complex_interleaved(tmp_path):
    p = tmp_path / "c.qtns"
    tensor_write(p, np.array([1 + 2j, 3 - 4j]))
    raw = p.read_bytes()
    assert struct.unpack_from("<I", raw, 8)[0] == 4
    assert np.frombuffer(raw[24:], "<f8").tolist() == [1, 2, 3, -4]


def test_qtns_complex_zeros_roundtrip(tmp_path):
    a = np.zeros((3, 4, 5), dtype=np.complex128)
    tensor_write(tmp_path / "z.qtns", a)
    b = tensor_read(tmp_path / "z.qtns")
    assert b.dtype == np.complex128 and b.tobytes() == a.tobytes()


@pytest.mark.parametrize("dtype", [np.float32, np.float64, np.complex64, np.complex128, np.uint8, np.int64])
def test_qtns_dtypes_bitwise(tmp_path, dtype):
    rng = np.random.default_rng(0)
    a = (rng.standard_normal((3, 7)) * 100).astype(dtype)
    if np.iscomplexobj(a):
        a = a + 1j * rng.standard_normal((3, 7)).astype(a.real.dtype)
    tensor_write(tmp_path / "x.qtns", a)
    b = tensor_read(tmp_path / "x.qtns")
    assert b.dtype == a.dtype and b.tobytes() == a.tobytes()


def test_qtns_bool_stored_as_u8(tmp_path):
    m = np.array([[True, False], [False, True]])
    tensor_write(tmp_path / "m.qtns", m)
    np.testing.assert_array_equal(tensor_read(tmp_path / "m.qtns").astype(bool), m)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=4, min_side=1, max_side=5),
                  elements=st.floats(allow_nan=True, allow_infinity=True, width=64)))
def test_qtns_roundtrip_property(tmp_path_factory, a):
    p = tmp_path_factory.mktemp("q") / "a.qtns"
    tensor_write(p, a)
    assert tensor_read(p).tobytes() == a.tobytes()


def test_qtns_zero_sized(tmp_path):
    with pytest.raises(ValueError, match="zero-sized dimension rejected"):
        tensor_write(tmp_path / "e.qtns", np.zeros((0, 3)))


def test_qtns_errors(tmp_path):
    good = tmp_path / "g.qtns"
    tensor_write(good, np.arange(10, dtype=np.float64))
    raw = good.read_bytes()

    bad = tmp_path / "bad.qtns"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagicError):
        tensor_read(bad)

    trunc = tmp_path / "t.qtns"
    trunc.write_bytes(raw[:-8])   # 9 of 10 elements
    with pytest.raises(TruncatedPayloadError):
        tensor_read(trunc)

    unk = tmp_path / "u.qtns"
    unk.write_bytes(raw[:8] + struct.pack("<I", 99) + raw[12:])
    with pytest.raises(UnknownDtypeError):
        tensor_read(unk)

    with pytest.raises(QTNSError, match="missing"):
        tensor_read(tmp_path / "missing.qtns")
    with pytest.raises(QTNSError, match="nodir"):
        tensor_write(tmp_path / "nodir" / "x.qtns", np.ones(2))


def test_seed_contract():
    assert check_seed(2**64 - 1) == 2**64 - 1
    with pytest.raises(ValueError):
        check_seed(-1)
    with pytest.raises(TypeError):
        check_seed(1.5)
    a = rng_from(7, "noise", 3).standard_normal(5)
    b = rng_from(7, "noise", 3).standard_normal(5)
    c = rng_from(7, "noise", 4).standard_normal(5)
    assert a.tobytes() == b.tobytes() and not np.array_equal(a, c)
    assert derive_seed(1, "x") == derive_seed(1, "x") != derive_seed(2, "x")


def test_contrast_image_set_invariants():
    imgs = np.ones((2, 8, 8))
    s = ContrastImageSet(imgs, [5, 60])
    assert s.n_tsl == 2 and s.shape == (8, 8) and s.tsl_ms == (5.0, 60.0)
    with pytest.raises(ValueError):
        s.images[0, 0, 0] = 2
    with pytest.raises(ValueError, match="increasing"):
        ContrastImageSet(imgs, [60, 5])
    with pytest.raises(ValueError, match="nonnegative"):
        ContrastImageSet(imgs, [-1, 5])
    with pytest.raises(ValueError):
        ContrastImageSet(imgs, [5])
    with pytest.raises(ValueError, match="NaN"):
        ContrastImageSet(np.full((1, 8, 8), np.nan), [5])
    assert s.select([1]).tsl_ms == (60.0,)


def test_complex_image_checks():
    with pytest.raises(ValueError, match="8x8"):
        as_complex_image(np.zeros((4, 8)))
    with pytest.raises(ValueError):
        as_complex_image(np.full((8, 8), np.inf))
    assert as_complex_image(np.ones((8, 8))).dtype == np.complex128


def test_param_map_zeroes_invalid():
    valid = np.zeros((8, 8), bool)
    valid[2:4, 2:4] = True
    pm = ParamMap(np.ones((8, 8)), np.full((8, 8), 40.0), valid, np.zeros((8, 8)))
    assert pm.t1rho_ms[0, 0] == 0 and pm.s0[0, 0] == 0 and pm.t1rho_ms[2, 2] == 40
    with pytest.raises(ValueError, match="s0 > 0"):
        ParamMap(np.zeros((8, 8)), np.ones((8, 8)), valid, np.zeros((8, 8)))
