"""Unrolled ADMM with learned operators.

Each iteration keeps the classical scaffold but swaps the hand-designed
operators for small residual networks (conv, ReLU, conv; 3x3 kernels)
acting on complex images stored as (re, im) channel pairs:

* data term:  ``g' = g + C_G(g)`` with ``g = A^H (A m - y)``
* M-update:   ``m' = m - tau_n (g' + eta_n (m - z + beta)) + C_P([m, z - beta, g'])``
* Z-update:   ``z' = v + C_L(v)`` with ``v = m' + beta``
* dual:       ``beta' = beta + eta_n (m' - z')``

The conv weights are shared across iterations; ``eta_n`` and ``tau_n``
are learned per iteration. The last layer of every network starts at
zero, so an untrained model is a plain gradient-step ADMM whose Z-update
is the identity. Gradients are propagated by hand through all iterations,
including the measurement operator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..acquisition import CoilProfile, KSpaceData, MeasurementOperator
from ..core import ContrastImageSet, rng_from
from ..nnet import (
    AdamState,
    ConvLayer,
    TrainingDivergenceError,
    adam_step,
    conv2d_backward,
    conv2d_forward,
    he_conv,
    nrmse_loss,
    nrmse_loss_grad,
    relu_backward,
    relu_forward,
)
from ..nnet.serialize import load_weights, save_weights
from .admm import zero_filled

__all__ = [
    "LearnedADMM",
    "UntrainedModelError",
    "learned_admm_reconstruct",
    "learned_forward",
    "learned_backward",
    "train_learned_admm",
]


class UntrainedModelError(RuntimeError):
    pass


def _to_ch(x):
    return np.stack([x.real, x.imag], axis=1)


def _from_ch(c):
    return c[:, 0] + 1j * c[:, 1]


@dataclass(frozen=True, eq=False)
class TwoLayerNet:
    """conv -> ReLU -> conv."""

    first: ConvLayer
    second: ConvLayer

    def parameters(self):
        return [self.first.weights, self.first.bias, self.second.weights, self.second.bias]

    @classmethod
    def from_parameters(cls, p):
        return cls(ConvLayer(p[0], p[1]), ConvLayer(p[2], p[3]))

    def forward(self, x):
        h, c1 = conv2d_forward(self.first, x)
        h, r = relu_forward(h)
        out, c2 = conv2d_forward(self.second, h)
        return out, (c1, r, c2)

    @staticmethod
    def backward(cache, gout):
        c1, r, c2 = cache
        g, gw2, gb2 = conv2d_backward(c2, gout)
        g = relu_backward(r, g)
        g, gw1, gb1 = conv2d_backward(c1, g)
        return g, [gw1, gb1, gw2, gb2]


def _zero_last(in_ch, width, out_ch, rng):
    first = he_conv(in_ch, width, rng)
    return TwoLayerNet(first, ConvLayer(np.zeros((out_ch, width, 3, 3)), np.zeros(out_ch)))


@dataclass(frozen=True, eq=False)
class LearnedADMM:
    gamma: TwoLayerNet
    pi: TwoLayerNet
    lam: TwoLayerNet
    eta: np.ndarray
    tau: np.ndarray
    trained: bool = False

    @property
    def n_iters(self) -> int:
        return int(self.eta.size)

    @classmethod
    def init(cls, n_iters: int = 10, width: int = 16, eta: float = 1.0, tau: float = 1.0, seed=0) -> "LearnedADMM":
        if n_iters < 1:
            raise ValueError("n_iters must be >= 1")
        rng = rng_from(seed, "learned_admm_init")
        return cls(_zero_last(2, width, 2, rng), _zero_last(6, width, 2, rng), _zero_last(2, width, 2, rng),
                   np.full(n_iters, float(eta)), np.full(n_iters, float(tau)))

    def parameters(self) -> list:
        return self.gamma.parameters() + self.pi.parameters() + self.lam.parameters() + [self.eta, self.tau]

    def with_parameters(self, p, trained: bool | None = None) -> "LearnedADMM":
        p = list(p)
        return LearnedADMM(TwoLayerNet.from_parameters(p[0:4]), TwoLayerNet.from_parameters(p[4:8]),
                           TwoLayerNet.from_parameters(p[8:12]), np.asarray(p[12], dtype=np.float64),
                           np.asarray(p[13], dtype=np.float64), self.trained if trained is None else trained)

    def save(self, directory):
        meta = {"kind": "LearnedADMM", "n_iters": self.n_iters, "width": self.gamma.first.out_ch,
                "trained": self.trained}
        return save_weights(directory, self.parameters(), meta)

    @classmethod
    def load(cls, directory) -> "LearnedADMM":
        params, meta = load_weights(directory)
        return cls.init(meta["n_iters"], meta["width"]).with_parameters(params, trained=meta["trained"])


def learned_forward(model: LearnedADMM, op: MeasurementOperator, y, m0, keep_cache: bool = False):
    """Run the unrolled iterations from ``m0`` (complex, (T, H, W)).

    Returns the final primal image and, if requested, the per-iteration
    cache consumed by :func:`learned_backward`.
    """
    b = op.apply_adjoint(y)
    m = m0
    z = m0.copy()
    beta = np.zeros_like(m0)
    caches = []
    for n in range(model.n_iters):
        eta, tau = model.eta[n], model.tau[n]
        g = op.normal(m) - b
        cg_out, cg = model.gamma.forward(_to_ch(g))
        gp = g + _from_ch(cg_out)
        u = m - z + beta
        cat = np.concatenate([_to_ch(m), _to_ch(z - beta), _to_ch(gp)], axis=1)
        cp_out, cp = model.pi.forward(cat)
        m_new = m - tau * (gp + eta * u) + _from_ch(cp_out)
        v = m_new + beta
        cl_out, cl = model.lam.forward(_to_ch(v))
        z_new = v + _from_ch(cl_out)
        beta_new = beta + eta * (m_new - z_new)
        if keep_cache:
            caches.append((cg, cp, cl, gp, u, m_new, z_new))
        m, z, beta = m_new, z_new, beta_new
        if not np.all(np.isfinite(m)):
            raise TrainingDivergenceError(f"learned ADMM produced non-finite values at iteration {n + 1}")
    return m, caches


def _re_dot(a, b) -> float:
    return float(np.sum(a.real * b.real + a.imag * b.imag))


def learned_backward(model: LearnedADMM, op: MeasurementOperator, caches, g_out):
    """Parameter gradients of a scalar loss given its gradient w.r.t. the output.

    ``g_out`` uses the packed convention ``dL/dRe + 1j dL/dIm``. Returns
    ``(param_grads, grad_m0)``.
    """
    gm = np.asarray(g_out, dtype=np.complex128).copy()
    gz = np.zeros_like(gm)
    gb = np.zeros_like(gm)
    n_par = [np.zeros_like(p) for p in model.parameters()]
    g_eta = np.zeros(model.n_iters)
    g_tau = np.zeros(model.n_iters)
    for n in range(model.n_iters - 1, -1, -1):
        cg, cp, cl, gp, u, m_new, z_new = caches[n]
        eta, tau = model.eta[n], model.tau[n]
        # beta' = beta + eta (m' - z')
        g_eta[n] += _re_dot(gb, m_new - z_new)
        gm_new = gm + eta * gb
        gz_new = gz - eta * gb
        gbeta = gb.copy()
        # z' = v + C_L(v)
        gin, pg = TwoLayerNet.backward(cl, _to_ch(gz_new))
        gv = gz_new + _from_ch(gin)
        for i, g in enumerate(pg):
            n_par[8 + i] += g
        gm_new = gm_new + gv
        gbeta += gv
        # m' = m - tau (g' + eta u) + C_P([m, z - beta, g'])
        g_tau[n] += -_re_dot(gm_new, gp + eta * u)
        g_eta[n] += -tau * _re_dot(gm_new, u)
        gm_prev = gm_new.copy()
        ggp = -tau * gm_new
        gu = -tau * eta * gm_new
        gin, pg = TwoLayerNet.backward(cp, _to_ch(gm_new))
        for i, g in enumerate(pg):
            n_par[4 + i] += g
        gm_prev += _from_ch(gin[:, 0:2])
        gzb = _from_ch(gin[:, 2:4])
        ggp += _from_ch(gin[:, 4:6])
        gz_prev = gzb.copy()
        gbeta -= gzb
        # u = m - z + beta
        gm_prev += gu
        gz_prev -= gu
        gbeta += gu
        # g' = g + C_G(g), g = N m - b
        gin, pg = TwoLayerNet.backward(cg, _to_ch(ggp))
        for i, g in enumerate(pg):
            n_par[i] += g
        gg = ggp + _from_ch(gin)
        gm_prev += op.normal(gg)
        gm, gz, gb = gm_prev, gz_prev, gbeta
    n_par[12] = g_eta
    n_par[13] = g_tau
    # m0 feeds both m and z at the start; beta0 is a constant
    return n_par, gm + gz


def learned_admm_reconstruct(y: KSpaceData, coils: CoilProfile, model: LearnedADMM, mask=None, tsl_ms=None,
                             allow_untrained: bool = False) -> ContrastImageSet:
    """Reconstruct with a trained :class:`LearnedADMM`."""
    if not (model.trained or allow_untrained):
        raise UntrainedModelError("learned ADMM model has not been trained")
    op = MeasurementOperator(coils, y.mask if mask is None else mask)
    m0 = zero_filled(y, coils).images
    m, _ = learned_forward(model, op, y.y, m0)
    return ContrastImageSet(m, range(y.n_tsl) if tsl_ms is None else tsl_ms)


def loss1_and_grad(model: LearnedADMM, y: KSpaceData, coils: CoilProfile, truth):
    """Per-contrast mean nRMSE of one case and its parameter gradients."""
    op = MeasurementOperator(coils, y.mask)
    m0 = zero_filled(y, coils).images
    m, caches = learned_forward(model, op, y.y, m0, keep_cache=True)
    loss = nrmse_loss(m, truth, per_sample=True)
    grads, _ = learned_backward(model, op, caches, nrmse_loss_grad(m, truth, per_sample=True))
    return loss, grads, m


def train_learned_admm(cases, epochs: int, lr: float = 5e-4, seed=0, model: LearnedADMM | None = None,
                       n_iters: int = 10, width: int = 16, eta: float = 1.0, val=None):
    """Adam on the per-contrast nRMSE, one case per step.

    ``cases`` holds ``(y, coils, truth_images)`` triples. Returns the
    trained model and a list of ``(train_loss, val_loss)`` per epoch.
    """
    model = LearnedADMM.init(n_iters, width, eta, seed=seed) if model is None else model
    state = AdamState.init(model.parameters(), lr=lr)
    history = []
    for epoch in range(epochs):
        order = rng_from(seed, "learned_admm_epoch", epoch).permutation(len(cases))
        losses = []
        for i in order:
            y, coils, truth = cases[i]
            loss, grads, _ = loss1_and_grad(model, y, coils, truth)
            params, state = adam_step(model.parameters(), grads, state)
            model = model.with_parameters(params)
            losses.append(loss)
        model = model.with_parameters(model.parameters(), trained=True)
        vloss = float("nan")
        if val:
            vloss = float(np.mean([nrmse_loss(learned_admm_reconstruct(y, c, model).images, t, per_sample=True)
                                   for y, c, t in val]))
        history.append((float(np.mean(losses)), vloss))
    return model.with_parameters(model.parameters(), trained=True), history
