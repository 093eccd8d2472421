import warnings

import numpy as np
import pytest

from rgmap import acquisition as acq
from rgmap.analysis import nrmse
from rgmap.core import ContrastImageSet
from rgmap.phantom import EllipseRegion, PhantomSpec, rasterize, synthesize
from rgmap.recon import (
    ConvergenceWarning,
    LplusSConfig,
    ReconConfig,
    ReconDivergenceError,
    admm_reconstruct,
    admm_step,
    cg_sense,
    conjugate_gradient,
    haar2,
    ihaar2,
    ls_reconstruct,
    shrink,
    soft_threshold,
    svt,
    tune_reg_weight,
    zero_filled,
)
from rgmap.recon.admm import admm_init
from rgmap.recon.learned import LearnedADMM, UntrainedModelError, learned_admm_reconstruct, train_learned_admm

from .conftest import undersample


def _dc_residual(y, coils, img):
    op = acq.MeasurementOperator(coils, y.mask)
    return np.linalg.norm(op.apply(img) - y.y) / np.linalg.norm(y.y)


# ---- transforms ---------------------------------------------------------

def test_soft_threshold_examples():
    assert soft_threshold(np.array(0.5), 0.2) == pytest.approx(0.3)
    assert soft_threshold(np.array(-0.1), 0.2) == 0.0
    z = soft_threshold(np.array(3 + 4j), 1.0)
    assert z == pytest.approx(0.8 * (3 + 4j))


def test_haar_orthonormal():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 16, 8)) + 1j * rng.standard_normal((3, 16, 8))
    c = haar2(x)
    assert np.linalg.norm(c) == pytest.approx(np.linalg.norm(x))
    np.testing.assert_allclose(ihaar2(c), x, atol=1e-13)
    with pytest.raises(ValueError):
        haar2(np.zeros((7, 8)))


@pytest.mark.parametrize("kind", ["haar-wavelet", "finite-difference"])
def test_shrink_limits(kind):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((16, 16))
    np.testing.assert_allclose(shrink(x, 0.0, kind), x, atol=1e-13)
    flat = np.full((16, 16), 2.5)
    np.testing.assert_allclose(shrink(flat, 10.0, kind), flat, atol=1e-13)


# ---- ADMM ---------------------------------------------------------------

def test_zero_filled_full_mask_is_truth(knee64, knee_coils):
    _, _, series = knee64
    op = acq.MeasurementOperator(knee_coils)
    y = acq.forward(op, series)
    np.testing.assert_allclose(zero_filled(y, knee_coils).images, series.images, atol=1e-12)
    y0 = acq.KSpaceData(np.zeros_like(y.y), y.mask)
    assert not np.any(zero_filled(y0, knee_coils).images)


def test_single_step_least_squares(knee64, knee_coils):
    _, _, series = knee64
    y = acq.forward(acq.MeasurementOperator(knee_coils), series)
    op = acq.MeasurementOperator(knee_coils, y.mask)
    cfg = ReconConfig(reg_weight=0.0, cg_iters=50, cg_tol=1e-12)
    state = admm_step(admm_init(op, y.y), op, y, cfg)
    assert np.abs(state.m - series.images).max() < cfg.cg_tol


def test_dual_unchanged_when_m_equals_z(knee64, knee_coils):
    _, _, series = knee64
    y = acq.forward(acq.MeasurementOperator(knee_coils), series)
    op = acq.MeasurementOperator(knee_coils, y.mask)
    state = admm_init(op, y.y)
    new = admm_step(state, op, y, ReconConfig(reg_weight=0.0))
    # with reg 0 the Z-update returns m + beta, so m - z = -beta = 0 here
    np.testing.assert_array_equal(new.beta, state.beta)


def test_admm_full_mask_exact(knee64, knee_coils):
    _, _, series = knee64
    y = acq.forward(acq.MeasurementOperator(knee_coils), series)
    rec = admm_reconstruct(y, knee_coils, cfg=ReconConfig(reg_weight=1e-9))
    assert nrmse(rec.images, series.images) < 1e-6


def test_admm_beats_zero_filled(knee64, knee_coils):
    _, _, series = knee64
    y = undersample(series, knee_coils, 6.8, seed=3)
    zf = zero_filled(y, knee_coils)
    rec = admm_reconstruct(y, knee_coils, cfg=ReconConfig(eta=0.1, reg_weight=3e-3 * np.abs(zf.images).max()))
    assert nrmse(rec.images, series.images) < nrmse(zf.images, series.images)
    assert _dc_residual(y, knee_coils, rec.images) <= _dc_residual(y, knee_coils, zf.images)


def test_admm_reg0_equals_cg_sense():
    truth, _ = rasterize(PhantomSpec(32, 32, (EllipseRegion(0.5, 0.5, 0.4, 0.3, 20, 0.9, 45.0),)))
    series = synthesize(truth, [5])
    coils = acq.make_coils(4, 32, 32, seed=1)
    y = undersample(series, coils, 1.5, seed=1)
    cfg = ReconConfig(n_iters=1, eta=1e-12, reg_weight=0.0, cg_iters=200, cg_tol=1e-14)
    rec = admm_reconstruct(y, coils, cfg=cfg)
    ref = cg_sense(y, coils, iters=200, tol=1e-14)
    assert np.linalg.norm(rec.images - ref) / np.linalg.norm(ref) < 1e-8


def test_admm_deterministic(knee64, knee_coils):
    _, _, series = knee64
    y = undersample(series, knee_coils, 4.6, seed=2)
    a = admm_reconstruct(y, knee_coils).images
    b = admm_reconstruct(y, knee_coils).images
    assert a.tobytes() == b.tobytes()


def test_recon_config_validation():
    with pytest.raises(ValueError):
        ReconConfig(n_iters=0)
    with pytest.raises(ValueError):
        ReconConfig(cg_tol=0)
    with pytest.raises(ValueError):
        ReconConfig(transform="dct")
    cfg = ReconConfig(eta=0.3)
    import json
    assert ReconConfig.from_dict(json.loads(cfg.to_json())) == cfg


def test_cg_divergence_reported():
    with pytest.raises(ReconDivergenceError):
        conjugate_gradient(lambda v: v * np.nan, np.ones(4), iters=3)


def test_tune_reg_weight_picks_grid_minimum(knee64, knee_coils):
    _, _, series = knee64
    y = undersample(series.select([0, 4]), knee_coils, 6.8, seed=5)
    cases = [(y, knee_coils, series.images[[0, 4]])]
    best, table = tune_reg_weight(cases, ReconConfig(n_iters=3), grid=(1e-3, 1e-2), eta_grid=(0.1, 1.0))
    assert len(table) == 4
    assert (best.eta, best.reg_weight) == min(table, key=lambda r: r[2])[:2]


# ---- L+S ----------------------------------------------------------------

def test_svt():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((20, 5))
    s = np.linalg.svd(x, compute_uv=False)
    y, sh = svt(x, s[2])
    assert np.linalg.matrix_rank(y) == 2
    np.testing.assert_allclose(sh[:2], s[:2] - s[2])


def test_ls_zero_data():
    coils = acq.make_coils(1, 16, 16)
    y = acq.KSpaceData(np.zeros((1, 3, 16, 16), complex), acq.full_mask(3, 16, 16))
    res = ls_reconstruct(y, coils)
    assert not np.any(res.L.images) and not np.any(res.S.images)
    with pytest.raises(ValueError):
        ls_reconstruct(acq.KSpaceData(np.zeros((1, 1, 16, 16), complex), acq.full_mask(1, 16, 16)), coils)


def test_ls_data_consistency_single_coil(knee64):
    _, _, series = knee64
    coils = acq.make_coils(1, 64, 64)
    y = undersample(series, coils, 6.8, seed=4)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        res = ls_reconstruct(y, coils, cfg=LplusSConfig(lambda_L=0.05, lambda_S=0.002, max_iters=20))
    op = acq.MeasurementOperator(coils, y.mask)
    resid = op.apply(res.image.images) - y.y
    sampled = np.broadcast_to(y.mask.mask[None], resid.shape)
    assert np.abs(resid[sampled]).max() / np.abs(y.y).max() < 1e-10


@pytest.mark.parametrize("n_coils", [1, 4])
def test_ls_objective_monotone(knee64, n_coils):
    _, _, series = knee64
    coils = acq.make_coils(n_coils, 64, 64, seed=2)
    y = undersample(series, coils, 6.8, seed=6)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        res = ls_reconstruct(y, coils, cfg=LplusSConfig(lambda_L=0.05, lambda_S=0.002, max_iters=30),
                             track_objective=True)
    obj = np.array(res.objective)
    assert np.all(np.diff(obj) <= 1e-8)


def test_ls_rank_one_energy_in_L():
    spec = PhantomSpec(32, 32, (EllipseRegion(0.5, 0.5, 0.4, 0.3, 10, 1.0, 50.0),
                                EllipseRegion(0.5, 0.5, 0.15, 0.15, 0, 0.5, 50.0)))
    truth, _ = rasterize(spec)
    series = synthesize(truth, (5, 10, 20, 40, 60))
    coils = acq.make_coils(1, 32, 32)
    y = acq.forward(acq.MeasurementOperator(coils), series)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        res = ls_reconstruct(y, coils, cfg=LplusSConfig(lambda_L=0.01, lambda_S=1e3, max_iters=50))
    e_l = np.linalg.norm(res.L.images) ** 2
    assert e_l >= 0.95 * np.linalg.norm(res.image.images) ** 2


def test_ls_nonconvergence_warns(knee64, knee_coils):
    _, _, series = knee64
    y = undersample(series, knee_coils, 6.8, seed=1)
    with pytest.warns(ConvergenceWarning):
        res = ls_reconstruct(y, knee_coils, cfg=LplusSConfig(max_iters=2, tol=1e-12))
    assert not res.converged and res.n_iters == 2


def test_ls_config_validation():
    with pytest.raises(ValueError):
        LplusSConfig(lambda_L=0)
    with pytest.raises(ValueError):
        LplusSConfig(max_iters=0)


# ---- learned ADMM -------------------------------------------------------

def test_learned_identity_init_full_mask(knee64, knee_coils):
    _, _, series = knee64
    y = acq.forward(acq.MeasurementOperator(knee_coils), series)
    model = LearnedADMM.init(10, 16, seed=0)
    with pytest.raises(UntrainedModelError):
        learned_admm_reconstruct(y, knee_coils, model)
    rec = learned_admm_reconstruct(y, knee_coils, model, allow_untrained=True)
    assert nrmse(rec.images, series.images) < 1e-3


def test_learned_gradients_finite_difference():
    from rgmap.nnet import nrmse_loss, nrmse_loss_grad
    from rgmap.recon.learned import learned_backward, learned_forward

    rng = np.random.default_rng(0)
    truth, _ = rasterize(PhantomSpec(16, 16, (EllipseRegion(0.5, 0.5, 0.35, 0.3, 0, 0.8, 40.0),)))
    series = synthesize(truth, (5, 60), phase_mode="smooth-quadratic")
    coils = acq.make_coils(2, 16, 16, seed=1)
    mk = rng.random((2, 16, 16)) < 0.5
    mk[:, 6:10, 6:10] = True
    op = acq.MeasurementOperator(coils, acq.SamplingMask(mk, 2.0, 0.0))
    y = op.apply(series.images)
    m0 = op.apply_adjoint(y)
    base = LearnedADMM.init(3, 4, eta=0.5, seed=2)
    params = [p + 0.1 * rng.standard_normal(p.shape) for p in base.parameters()]
    model = base.with_parameters(params)

    def loss(ps):
        m, _ = learned_forward(model.with_parameters(ps), op, y, m0)
        return nrmse_loss(m, series.images, per_sample=True)

    m, caches = learned_forward(model, op, y, m0, keep_cache=True)
    grads, _ = learned_backward(model, op, caches, nrmse_loss_grad(m, series.images, per_sample=True))
    h = 1e-6
    for k, p in enumerate(params):
        for idx in list(np.ndindex(p.shape))[:: max(1, p.size // 5)]:
            pp = [q.copy() for q in params]
            pp[k][idx] += h
            up = loss(pp)
            pp[k][idx] -= 2 * h
            num = (up - loss(pp)) / (2 * h)
            ana = grads[k][idx]
            assert abs(num - ana) / max(abs(num), abs(ana), 1e-6) < 1e-4


def test_learned_training_reduces_loss_and_is_deterministic(knee64):
    _, _, series = knee64
    sub = ContrastImageSet(series.images[[0, 4], 16:48, 16:48], (5, 60))
    coils = acq.make_coils(2, 32, 32, seed=3)
    y = undersample(sub, coils, 4.0, seed=1)
    cases = [(y, coils, sub.images)]
    m1, h1 = train_learned_admm(cases, epochs=6, lr=5e-3, seed=0, n_iters=3, width=4, eta=0.5)
    m2, _ = train_learned_admm(cases, epochs=6, lr=5e-3, seed=0, n_iters=3, width=4, eta=0.5)
    assert h1[-1][0] < h1[0][0]
    for a, b in zip(m1.parameters(), m2.parameters()):
        assert a.tobytes() == b.tobytes()
    r1 = learned_admm_reconstruct(y, coils, m1).images
    assert r1.tobytes() == learned_admm_reconstruct(y, coils, m1).images.tobytes()


def test_learned_save_load(tmp_path):
    m = LearnedADMM.init(4, 8, seed=1)
    m.save(tmp_path / "la")
    back = LearnedADMM.load(tmp_path / "la")
    assert back.n_iters == 4 and not back.trained
    for a, b in zip(m.parameters(), back.parameters()):
        np.testing.assert_array_equal(a, b)
