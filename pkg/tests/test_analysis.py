import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rgmap.analysis import (
    METRICS_HEADER,
    FitConfig,
    fit_map,
    fit_monoexp_pixel,
    fit_pixels,
    metrics_csv,
    nrmse,
    read_pgm,
    region_stats,
    snr_db,
    two_point_fit,
    write_pgm,
)
from rgmap.phantom import KNEE_TSL_MS, knee_like, rasterize, synthesize

TSL = np.array(KNEE_TSL_MS)


def test_exact_pixel_fit():
    s0, t1, res, conv = fit_monoexp_pixel(np.exp(-TSL / 40.0), TSL)
    assert conv and abs(s0 - 1) < 1e-9 and abs(t1 / 40 - 1) < 1e-9 and res < 1e-20


def test_two_point_pixel_matches_closed_form():
    sig = np.array([0.9, 0.31])
    s0, t1, _, _ = fit_monoexp_pixel(sig, [5, 60], FitConfig(intensity_floor=0))
    cs0, ct1, ok = two_point_fit(0.9, 0.31, 5, 60)
    assert ok and abs(t1 - ct1) < 1e-9 and abs(s0 - cs0) < 1e-9


@pytest.mark.parametrize("seed", range(3))
def test_lm_matches_grid_oracle(seed):
    rng = np.random.default_rng(seed)
    true_t = rng.uniform(20, 120)
    sig = np.abs(0.9 * np.exp(-TSL / true_t) + 0.01 * rng.standard_normal(TSL.size))
    s0, t1, _, conv = fit_monoexp_pixel(sig, TSL, FitConfig(intensity_floor=0))
    assert conv
    # brute force: T on a 0.01 ms grid, S0 optimal for each T, then snapped to 1e-3
    grid = np.arange(1.0, 1000.0 + 1e-9, 0.01)
    e = np.exp(-TSL[None, :] / grid[:, None])
    a = (e @ sig) / np.einsum("ij,ij->i", e, e)
    cost = np.sum((a[:, None] * e - sig) ** 2, axis=1)
    k = int(np.argmin(cost))
    assert abs(t1 - grid[k]) <= 0.01
    assert abs(s0 - a[k]) <= 1e-3


def test_dark_pixel_is_invalid():
    r = fit_pixels(np.array([[0.001, 0.0005], [1.0, 0.5]]), [5, 60], floor=0.01)
    assert list(r.valid) == [False, True]
    assert r.t1rho_ms[0] == 0 and r.s0[0] == 0
    assert fit_monoexp_pixel([0.0, 0.0, 0.0], [5, 10, 20]) == (0.0, 0.0, 0.0, False)


def test_bounds_clamp():
    cfg = FitConfig(intensity_floor=0)
    flat = fit_monoexp_pixel([0.5, 0.5, 0.5], [5, 10, 20], cfg)
    assert flat[1] == cfg.t1rho_max
    fast = fit_monoexp_pixel([1.0, 1e-9, 1e-12], [5, 100, 200], cfg)
    assert cfg.t1rho_min <= fast[1] <= 5.0


def test_fit_input_errors():
    with pytest.raises(ValueError):
        fit_monoexp_pixel([1.0], [5])
    with pytest.raises(ValueError):
        fit_monoexp_pixel([1.0, -0.5], [5, 10])
    with pytest.raises(ValueError):
        FitConfig(t1rho_min=10, t1rho_max=5)


def test_two_point_examples():
    s0, t1, ok = two_point_fit(math.exp(-0.125), math.exp(-1.5), 5, 60)
    assert ok and abs(t1 - 40.0) < 1e-9 and abs(s0 - 1.0) < 1e-12
    _, t1, ok = two_point_fit(0.5, 0.5, 5, 60)
    assert not ok and t1 == 0


@settings(max_examples=50, deadline=None)
@given(st.floats(0.05, 5.0), st.floats(1.0, 1000.0))
def test_two_point_inverts_model(s0, t):
    a, b = s0 * math.exp(-5 / t), s0 * math.exp(-60 / t)
    rs0, rt, ok = two_point_fit(a, b, 5, 60)
    assert ok and abs(rt / t - 1) < 1e-12 * max(1.0, t / 10) and abs(rs0 / s0 - 1) < 1e-11


def test_fit_map_noiseless_knee():
    truth, labels = rasterize(knee_like(64, 64))
    pm = fit_map(synthesize(truth, KNEE_TSL_MS))
    v = truth.valid_mask
    np.testing.assert_array_equal(pm.valid_mask, v)
    assert np.max(np.abs(pm.t1rho_ms[v] / truth.t1rho_ms[v] - 1)) < 1e-6
    assert np.all(pm.t1rho_ms[~v] == 0)


def test_fit_map_two_contrasts_matches_closed_form():
    truth, _ = rasterize(knee_like(32, 32))
    s = synthesize(truth, (5, 60)).magnitude()
    pm = fit_map(s)
    _, t1, ok = two_point_fit(s.images[0], s.images[1], 5, 60)
    v = pm.valid_mask
    assert np.all(ok[v])
    np.testing.assert_allclose(pm.t1rho_ms[v], t1[v], rtol=1e-9)
    with pytest.raises(ValueError):
        fit_map(s.select([0]))


def test_fit_pixels_batch_independent():
    rng = np.random.default_rng(0)
    sig = np.abs(np.exp(-TSL[None] / rng.uniform(20, 100, (50, 1))) + 0.02 * rng.standard_normal((50, 5)))
    full = fit_pixels(sig, TSL)
    part = fit_pixels(sig[10:20], TSL)
    assert full.t1rho_ms[10:20].tobytes() == part.t1rho_ms.tobytes()


def test_nrmse_examples():
    assert nrmse(np.ones(3), np.ones(3)) == 0
    assert nrmse(np.zeros(3), np.ones(3)) == 1
    assert nrmse(np.array([1.0, 2.0]), np.array([2.0, 2.0])) == pytest.approx(0.35355339059327373)
    rng = np.random.default_rng(0)
    e, r = rng.standard_normal(20), rng.standard_normal(20)
    assert abs(nrmse(3.7 * e, 3.7 * r) - nrmse(e, r)) < 1e-12
    roi = np.array([True, False])
    assert nrmse(np.array([1.0, 5.0]), np.array([1.0, 2.0]), roi) == 0
    with pytest.raises(ValueError):
        nrmse(np.ones(2), np.zeros(2))


def test_snr_examples():
    roi = np.ones((4, 4), bool)
    img = np.full((4, 4), 0.5)
    assert snr_db(img, roi, 0.05) == pytest.approx(20.0)
    assert snr_db(img, roi, 0.5 / 10**1.5) == pytest.approx(30.0)
    assert snr_db(img, roi, 0.5) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        snr_db(img, ~roi, 0.1)
    with pytest.raises(ValueError):
        snr_db(img, roi, 0.0)


def test_region_stats():
    labels = np.array([[1, 1, 2, 2], [0, 0, 3, 3]])
    vals = np.array([[1.0, 2.0, 40.0, 40.0], [9.0, 9.0, 5.0, 5.0]])
    valid = np.array([[True, True, True, True], [True, True, False, False]])
    rows = {r.label: r for r in region_stats(vals, labels, valid)}
    assert rows[2].mean == rows[2].median == rows[2].q1 == rows[2].q3 == 40
    assert rows[3].empty and math.isnan(rows[3].mean)
    four = region_stats(np.array([[1.0, 2.0, 3.0, 4.0]]), np.ones((1, 4), int))[0]
    assert (four.median, four.q1, four.q3) == (2.5, 1.75, 3.25)


def test_region_stats_bruteforce():
    rng = np.random.default_rng(3)
    vals = rng.standard_normal((20, 20))
    labels = rng.integers(0, 4, (20, 20))

    def q(x, p):
        xs = sorted(x)
        pos = p * (len(xs) - 1)
        lo = int(math.floor(pos))
        hi = min(lo + 1, len(xs) - 1)
        return xs[lo] + (pos - lo) * (xs[hi] - xs[lo])

    for row in region_stats(vals, labels):
        x = vals[labels == row.label].tolist()
        assert row.q1 == pytest.approx(q(x, 0.25)) and row.q3 == pytest.approx(q(x, 0.75))
        assert row.median == pytest.approx(q(x, 0.5)) and row.mean == pytest.approx(sum(x) / len(x))
        assert row.q1 <= row.median <= row.q3


def test_region_stats_parammap():
    truth, labels = rasterize(knee_like(32, 32))
    rows = region_stats(truth, labels)
    assert all(r.q1 == r.q3 for r in rows if not r.empty)


def test_pgm_export(tmp_path):
    img = np.array([[0.0, 500.0], [1000.0, 2000.0]])
    p = write_pgm(tmp_path / "t.pgm", img, vmax=1000.0)
    raw = p.read_bytes()
    assert raw.startswith(b"P5\n2 2\n65535\n")
    np.testing.assert_array_equal(read_pgm(p), [[0, 32768], [65535, 65535]])
    side = json.loads((tmp_path / "t.json").read_text())
    assert side["window"] == [0.0, 1000.0]
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "x.pgm", img, vmax=0.0)


def test_metrics_csv():
    text = metrics_csv([("e1", "fit", "all", "t1rho_nrmse", 0.125, 3)])
    lines = text.splitlines()
    assert lines[0] == ",".join(METRICS_HEADER) == "experiment,stage,region,metric,value,seed"
    assert lines[1] == "e1,fit,all,t1rho_nrmse,0.125,3"
