"""Synthesis of the unacquired contrast images from the first and last spin-lock time.

Two generators share one calling convention:

* :func:`analytic_generate` inverts the mono-exponential model exactly
  from two images and re-evaluates it at the missing spin-lock times;
* :class:`GenModel`, a densely connected network of five ConvBlocks that
  learns the same mapping from data (magnitude images in, magnitude out).

Block ``k`` of the network sees the channel-wise concatenation of the
network input and the outputs of blocks ``1..k-1``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import ContrastImageSet, check_seed, derive_seed, rng_from, tensor_read, tensor_write
from .nnet import AdamState, ConvBlock, TrainingDivergenceError, adam_step, l2_loss, l2_loss_grad
from .nnet.serialize import load_weights, save_weights

log = logging.getLogger(__name__)

__all__ = [
    "GenModel",
    "GenDataset",
    "TrainConfig",
    "analytic_generate",
    "gen_forward",
    "gen_backward",
    "train_generative",
    "generate_full_series",
    "net_acceleration",
    "R_TSL_TWO_OF_FIVE",
    "TrainHistory",
    "train_pipeline",
    "dataset_loss",
]

R_TSL_TWO_OF_FIVE = 5 / 2


def net_acceleration(r_k: float, n_total: int = 5, n_acquired: int = 2) -> float:
    """Net acceleration: k-space factor times the contrast-reduction factor."""
    return r_k * (n_total / n_acquired)


# --------------------------------------------------------------------------
# Analytic generator
# --------------------------------------------------------------------------

def analytic_generate(img_a, img_b, t_a: float, t_b: float, t_out, floor: float | None = None):
    """Two-point inversion of ``S = S0 exp(-t / T)`` re-evaluated at ``t_out``.

    Parameters
    ----------
    img_a, img_b : ndarray
        Nonnegative magnitude images at ``t_a < t_b``.
    t_out : sequence of float
        Output times in ms, each within ``[0, 10 * t_b]``.
    floor : float, optional
        Pixels where either input is at or below ``floor`` are flagged;
        defaults to ``1e-6 * max(img_a, img_b)``.

    Returns
    -------
    images : list of ndarray
        One image per ``t_out``; flagged pixels are 0.
    valid : ndarray of bool
        False where a pixel was below the floor or not decaying.
    """
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if not t_a < t_b:
        raise ValueError("t_a must be smaller than t_b")
    if np.any(a < 0) or np.any(b < 0):
        raise ValueError("input images must be nonnegative magnitudes")
    t_out = [float(t) for t in t_out]
    for t in t_out:
        if not 0 <= t <= 10 * t_b:
            raise ValueError(f"output time {t} ms outside [0, {10 * t_b}] (extrapolation guard)")
    if floor is None:
        floor = 1e-6 * max(float(a.max(initial=0.0)), float(b.max(initial=0.0)))
    valid = (a > floor) & (b > floor) & (a > b)
    sa = np.where(valid, a, 1.0)
    sb = np.where(valid, b, 0.5)
    t1 = (t_b - t_a) / np.log(sa / sb)
    s0 = sa * np.exp(t_a / t1)
    return [np.where(valid, s0 * np.exp(-t / t1), 0.0) for t in t_out], valid


# --------------------------------------------------------------------------
# Densely connected generator
# --------------------------------------------------------------------------

N_BLOCKS = 5


@dataclass(frozen=True, eq=False)
class GenModel:
    """Five ConvBlocks with dense (concatenating) connectivity."""

    blocks: tuple
    in_ch: int = 2
    out_ch: int = 3
    growth: int = 16

    def __post_init__(self):
        blocks = tuple(self.blocks)
        if len(blocks) != N_BLOCKS:
            raise ValueError(f"GenModel needs exactly {N_BLOCKS} blocks, got {len(blocks)}")
        for k, blk in enumerate(blocks):
            expect_in = self.in_ch + k * self.growth
            expect_out = self.out_ch if k == N_BLOCKS - 1 else self.growth
            if blk.in_ch != expect_in or blk.out_ch != expect_out:
                raise ValueError(
                    f"block {k + 1} maps {blk.in_ch}->{blk.out_ch}, dense wiring needs {expect_in}->{expect_out}"
                )
        object.__setattr__(self, "blocks", blocks)

    @classmethod
    def init(cls, seed=0, in_ch: int = 2, out_ch: int = 3, width: int = 16) -> "GenModel":
        """He-initialized model; ``width`` is both the block width and the growth rate."""
        rng = rng_from(seed, "gen_model_init")
        blocks = []
        for k in range(N_BLOCKS):
            cin = in_ch + k * width
            cout = out_ch if k == N_BLOCKS - 1 else width
            blocks.append(ConvBlock.init(cin, width, cout, rng))
        return cls(tuple(blocks), in_ch, out_ch, width)

    def parameters(self) -> list:
        return [p for b in self.blocks for p in b.parameters()]

    def with_parameters(self, params) -> "GenModel":
        params = list(params)
        blocks = tuple(b.with_parameters(params[6 * k:6 * k + 6]) for k, b in enumerate(self.blocks))
        return GenModel(blocks, self.in_ch, self.out_ch, self.growth)

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def save(self, directory) -> Path:
        meta = {"kind": "GenModel", "in_ch": self.in_ch, "out_ch": self.out_ch, "growth": self.growth,
                "width": self.blocks[0].layers[0].out_ch}
        return save_weights(directory, self.parameters(), meta)

    @classmethod
    def load(cls, directory) -> "GenModel":
        params, meta = load_weights(directory)
        template = cls.init(0, meta["in_ch"], meta["out_ch"], meta["growth"])
        return template.with_parameters(params)


def _forward_cached(model: GenModel, x):
    feats = [x]
    caches = []
    out = None
    for blk in model.blocks:
        inp = feats[0] if len(feats) == 1 else np.concatenate(feats, axis=1)
        out, cache = blk.forward(inp)
        caches.append(cache)
        feats.append(out)
    return out, caches


def gen_forward(model: GenModel, x):
    """Generated images for a (2, H, W) or (N, 2, H, W) input."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != model.in_ch:
        raise ValueError(f"expected input with {model.in_ch} channels, got shape {x.shape}")
    if x.shape[2] < 8 or x.shape[3] < 8:
        raise ValueError(f"input must be at least 8x8, got {x.shape[2:]}")
    out, _ = _forward_cached(model, x)
    return out[0] if squeeze else out


def gen_backward(model: GenModel, x, gout):
    """Forward then backward pass; returns ``(output, grad_input, param_grads)``."""
    x = np.asarray(x, dtype=np.float64)
    out, caches = _forward_cached(model, x)
    g_feats = [np.zeros_like(x)] + [None] * N_BLOCKS
    g_feats[N_BLOCKS] = np.asarray(gout, dtype=np.float64)
    grads = [None] * N_BLOCKS
    chans = [model.in_ch] + [model.growth] * (N_BLOCKS - 1)
    for k in range(N_BLOCKS - 1, -1, -1):
        gin, grads[k] = model.blocks[k].backward(caches[k], g_feats[k + 1])
        # split the concatenated input gradient back onto its sources
        start = 0
        for j in range(k + 1):
            piece = gin[:, start:start + chans[j]]
            start += chans[j]
            g_feats[j] = piece if g_feats[j] is None else g_feats[j] + piece
    return out, g_feats[0], [g for blk in grads for g in blk]


# --------------------------------------------------------------------------
# Data and training
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GenDataset:
    """Input pairs (K, 2, H, W) and target stacks (K, J, H, W) of magnitude images."""

    inputs: np.ndarray
    targets: np.ndarray
    tsl_ms: tuple = (5.0, 10.0, 20.0, 40.0, 60.0)

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.targets, dtype=np.float64)
        if x.ndim != 4 or y.ndim != 4:
            raise ValueError("inputs and targets must be 4D (K, C, H, W)")
        if x.shape[0] != y.shape[0] or x.shape[2:] != y.shape[2:]:
            raise ValueError(f"inputs {x.shape} and targets {y.shape} disagree")
        if x.shape[1] + y.shape[1] != len(self.tsl_ms):
            raise ValueError("input and target channels must add up to the TSL grid")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)
        object.__setattr__(self, "tsl_ms", tuple(float(t) for t in self.tsl_ms))

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @classmethod
    def from_series(cls, series, acquired=(0, -1)) -> "GenDataset":
        """Build from full contrast series; ``acquired`` contrasts become inputs."""
        series = list(series)
        n = series[0].n_tsl
        acq = [a % n for a in acquired]
        rest = [i for i in range(n) if i not in acq]
        x = np.stack([np.abs(s.images[acq]) for s in series])
        y = np.stack([np.abs(s.images[rest]) for s in series])
        return cls(x, y, series[0].tsl_ms)

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        tensor_write(directory / "inputs.qtns", self.inputs)
        tensor_write(directory / "targets.qtns", self.targets)
        manifest = {"inputs": "inputs.qtns", "targets": "targets.qtns", "tsl_ms": list(self.tsl_ms),
                    "K": len(self)}
        path = directory / "dataset.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, directory) -> "GenDataset":
        directory = Path(directory)
        manifest = json.loads((directory / "dataset.json").read_text())
        return cls(tensor_read(directory / manifest["inputs"]), tensor_read(directory / manifest["targets"]),
                   tuple(manifest["tsl_ms"]))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    loss_mix: float = 0.1
    epochs_step1: int = 30
    epochs_step2: int = 5
    epochs_step3: int = 50
    seed: int = 0
    batch: int = 4
    width: int = 16
    crop: int | None = None
    lr_schedule: str = "constant"

    def __post_init__(self):
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if min(self.epochs_step1, self.epochs_step2, self.epochs_step3) < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.loss_mix < 0:
            raise ValueError("loss_mix must be >= 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        check_seed(self.seed)

    @property
    def total_epochs(self) -> int:
        return self.epochs_step1 + self.epochs_step2 + self.epochs_step3

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainHistory:
    """Per-epoch loss records (one dict per epoch)."""

    rows: list = field(default_factory=list)

    def append(self, **row):
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return np.array([r.get(name, np.nan) for r in self.rows], dtype=np.float64)


def _batches(n, batch, rng):
    order = rng.permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


def _crop(x, y, size, rng):
    if size is None or size >= x.shape[-1] and size >= x.shape[-2]:
        return x, y
    h, w = x.shape[-2:]
    i = int(rng.integers(0, h - size + 1))
    j = int(rng.integers(0, w - size + 1))
    return x[..., i:i + size, j:j + size], y[..., i:i + size, j:j + size]


def dataset_loss(model: GenModel, data: GenDataset, chunk: int = 8) -> float:
    """Loss2 over a whole dataset (mean over samples and channels)."""
    total = 0.0
    for i in range(0, len(data), chunk):
        xb = data.inputs[i:i + chunk]
        total += l2_loss(gen_forward(model, xb), data.targets[i:i + chunk]) * xb.shape[0]
    return total / len(data)


def train_epoch(model: GenModel, state: AdamState, data: GenDataset, cfg: TrainConfig, rng,
                grad_scale: float = 1.0, epoch: int = 0):
    """One pass of Adam over ``data`` in shuffled mini-batches.

    ``grad_scale`` multiplies the Loss2 gradient (the mixing weight in the
    joint objective). Returns ``(model, state, mean_batch_loss)``.
    """
    params = model.parameters()
    losses = []
    for step, idx in enumerate(_batches(len(data), cfg.batch, rng)):
        xb, yb = _crop(data.inputs[idx], data.targets[idx], cfg.crop, rng)
        out, caches = _forward_cached(model, xb)
        loss = l2_loss(out, yb)
        if not np.isfinite(loss):
            raise TrainingDivergenceError(f"non-finite Loss2 at epoch {epoch}, step {step}")
        _, _, grads = gen_backward(model, xb, grad_scale * l2_loss_grad(out, yb))
        params, state = adam_step(params, grads, state)
        model = model.with_parameters(params)
        losses.append(loss)
    return model, state, float(np.mean(losses)) if losses else float("nan")


def train_generative(dataset: GenDataset, cfg: TrainConfig = TrainConfig(), epochs: int | None = None,
                     model: GenModel | None = None, val: GenDataset | None = None):
    """Train the generator alone by Adam on Loss2.

    Parameters
    ----------
    epochs : int, optional
        Passes over ``dataset``; defaults to ``cfg.epochs_step2``.
    model : GenModel, optional
        Starting point; a fresh He-initialized model from ``cfg.seed`` otherwise.
        With ``cfg.lr_schedule == "cosine"`` the step size decays from
        ``cfg.lr`` towards zero over the ``epochs`` passes.

    Returns
    -------
    model : GenModel
    history : TrainHistory
        ``train_loss2`` per epoch (mean over mini-batches) and, if ``val``
        is given, ``val_loss2``.
    """
    if len(dataset) < 1:
        raise ValueError("training set is empty")
    epochs = cfg.epochs_step2 if epochs is None else epochs
    if model is None:
        model = GenModel.init(cfg.seed, dataset.inputs.shape[1], dataset.targets.shape[1], cfg.width)
    state = AdamState.init(model.parameters(), lr=cfg.lr)
    history = TrainHistory()
    for epoch in range(epochs):
        rng = rng_from(cfg.seed, "gen_epoch", epoch)
        if cfg.lr_schedule == "cosine":
            state = replace(state, lr=0.5 * cfg.lr * (1.0 + math.cos(math.pi * epoch / epochs)))
        model, state, loss = train_epoch(model, state, dataset, cfg, rng, epoch=epoch)
        row = {"epoch": epoch, "train_loss2": loss}
        if val is not None:
            row["val_loss2"] = dataset_loss(model, val)
        history.append(**row)
        log.debug("generator epoch %d: %s", epoch, row)
    return model, history


# --------------------------------------------------------------------------
# Full series
# --------------------------------------------------------------------------

def generate_full_series(acquired: ContrastImageSet, model, tsl_full) -> ContrastImageSet:
    """Five-contrast magnitude series from the first and last contrast.

    ``model`` is a :class:`GenModel` or the string ``"analytic"``; the
    acquired images are placed at their own spin-lock times and the
    generated ones fill the slots in between.
    """
    tsl_full = [float(t) for t in tsl_full]
    if acquired.n_tsl != 2:
        raise ValueError("exactly two acquired contrasts are required")
    if acquired.tsl_ms[0] != tsl_full[0] or acquired.tsl_ms[1] != tsl_full[-1]:
        raise ValueError(f"acquired TSLs {acquired.tsl_ms} must be the first and last of {tsl_full}")
    mag = np.abs(acquired.images)
    middle = tsl_full[1:-1]
    if isinstance(model, str):
        if model != "analytic":
            raise ValueError(f"unknown generator {model!r}")
        gen, _ = analytic_generate(mag[0], mag[1], tsl_full[0], tsl_full[-1], middle)
        gen = np.stack(gen)
    else:
        gen = gen_forward(model, mag)
        if gen.shape[0] != len(middle):
            raise ValueError(f"model produces {gen.shape[0]} images, {len(middle)} are needed")
    return ContrastImageSet(np.concatenate([mag[:1], gen, mag[1:]]), tsl_full)


# --------------------------------------------------------------------------
# Three-step schedule
# --------------------------------------------------------------------------

def _recon_many(cases, recon, tsl_pair):
    from .recon import admm_reconstruct
    from .recon.learned import LearnedADMM, learned_admm_reconstruct

    out = []
    for y, coils, _ in cases:
        if isinstance(recon, LearnedADMM):
            out.append(learned_admm_reconstruct(y, coils, recon, tsl_ms=tsl_pair).images)
        else:
            out.append(admm_reconstruct(y, coils, cfg=recon, tsl_ms=tsl_pair).images)
    return out


def _loss1(recons, cases, acquired):
    from .nnet import nrmse_loss

    return float(np.mean([nrmse_loss(r, t.images[list(acquired)], per_sample=True)
                          for r, (_, _, t) in zip(recons, cases)]))


def _gen_set(recons, cases, acquired):
    n = cases[0][2].n_tsl
    rest = [i for i in range(n) if i not in acquired]
    x = np.stack([np.abs(r) for r in recons])
    y = np.stack([np.abs(t.images[rest]) for _, _, t in cases])
    return GenDataset(x, y, cases[0][2].tsl_ms)


def _joint_epoch(recon, model, r_state, g_state, cases, cfg, rng, acquired, epoch):
    """One pass of joint Loss1 + lambda * Loss2 training through the learned reconstructor."""
    from .acquisition import MeasurementOperator
    from .nnet import nrmse_loss, nrmse_loss_grad
    from .recon import zero_filled
    from .recon.learned import learned_backward, learned_forward

    n = cases[0][2].n_tsl
    rest = [i for i in range(n) if i not in acquired]
    losses = []
    for step, idx in enumerate(_batches(len(cases), cfg.batch, rng)):
        r_acc = None
        g_acc = None
        batch_loss = 0.0
        for i in idx:
            y, coils, truth = cases[i]
            target = truth.images[list(acquired)]
            op = MeasurementOperator(coils, y.mask)
            m, caches = learned_forward(recon, op, y.y, zero_filled(y, coils).images, keep_cache=True)
            mag = np.abs(m)
            tgt2 = np.abs(truth.images[rest])[None]
            out, gcaches = _forward_cached(model, mag[None])
            l1 = nrmse_loss(m, target, per_sample=True)
            l2 = l2_loss(out, tgt2)
            batch_loss += (l1 + cfg.loss_mix * l2) / len(idx)
            if not np.isfinite(batch_loss):
                raise TrainingDivergenceError(f"non-finite Loss3 at epoch {epoch}, step {step}")
            _, gx, gg = gen_backward(model, mag[None], cfg.loss_mix * l2_loss_grad(out, tgt2))
            phase = np.where(mag > 0, m / np.where(mag > 0, mag, 1.0), 0.0)
            gm = nrmse_loss_grad(m, target, per_sample=True) + gx[0] * phase
            gr, _ = learned_backward(recon, op, caches, gm)
            scale = 1.0 / len(idx)
            r_acc = [g * scale for g in gr] if r_acc is None else [a + g * scale for a, g in zip(r_acc, gr)]
            g_acc = [g * scale for g in gg] if g_acc is None else [a + g * scale for a, g in zip(g_acc, gg)]
        rp, r_state = adam_step(recon.parameters(), r_acc, r_state)
        recon = recon.with_parameters(rp)
        gp, g_state = adam_step(model.parameters(), g_acc, g_state)
        model = model.with_parameters(gp)
        losses.append(batch_loss)
    return recon, model, r_state, g_state, float(np.mean(losses))


def train_pipeline(train_set, val_set, recon_cfg=None, cfg: TrainConfig = TrainConfig(),
                   acquired=(0, 4), eta_grid=None, tune_cases: int = 16):
    """Three-step training: reconstruction, generator, then both jointly.

    Parameters
    ----------
    train_set, val_set : sequence of (KSpaceData, CoilProfile, ContrastImageSet)
        k-space of the acquired contrasts, the coils and the full
        ground-truth series.
    recon_cfg : ReconConfig, optional
        ``mode='classical'`` turns step 1 into a grid search over
        ``reg_weight`` (and ``eta`` if ``eta_grid`` is given) on the first
        ``tune_cases`` training cases; every epoch of step 1 then reports
        the tuned configuration. ``mode='learned'`` trains an unrolled
        ADMM model (see :mod:`rgmap.recon.learned`) and backpropagates
        the joint loss through it in step 3.

    Returns
    -------
    recon : ReconConfig or LearnedADMM
    model : GenModel
    history : TrainHistory
        One row per epoch with ``step``, ``epoch`` and train/validation
        Loss1, Loss2 and Loss3 (= Loss1 + loss_mix * Loss2).
    """
    from .recon import ReconConfig, tune_reg_weight
    from .recon.learned import LearnedADMM, train_learned_admm

    train_set, val_set = list(train_set), list(val_set)
    if not train_set or not val_set:
        raise ValueError("training and validation sets must be nonempty")
    if any(a is b for a in train_set for b in val_set):
        raise ValueError("validation cases overlap the training set")
    recon_cfg = ReconConfig() if recon_cfg is None else recon_cfg
    acquired = tuple(acquired)
    tsl = train_set[0][2].tsl_ms
    pair = tuple(tsl[a] for a in acquired)
    sub = lambda cases: [(y, c, t.images[list(acquired)]) for y, c, t in cases]
    history = TrainHistory()
    lam = cfg.loss_mix

    def record(step, epoch, tl1, vl1, tl2, vl2):
        history.append(step=step, epoch=epoch, train_loss1=tl1, val_loss1=vl1, train_loss2=tl2, val_loss2=vl2,
                       train_loss3=tl1 + lam * tl2, val_loss3=vl1 + lam * vl2)

    model = GenModel.init(cfg.seed, len(acquired), train_set[0][2].n_tsl - len(acquired), cfg.width)

    # step 1: reconstruction alone
    if recon_cfg.mode == "classical":
        recon, table = tune_reg_weight(sub(train_set[:tune_cases]), recon_cfg, eta_grid=eta_grid)
        log.info("classical step 1: eta=%g reg_weight=%g", recon.eta, recon.reg_weight)
        tr_rec, va_rec = _recon_many(train_set, recon, pair), _recon_many(val_set, recon, pair)
        tl1, vl1 = _loss1(tr_rec, train_set, acquired), _loss1(va_rec, val_set, acquired)
        gtr, gva = _gen_set(tr_rec, train_set, acquired), _gen_set(va_rec, val_set, acquired)
        tl2, vl2 = dataset_loss(model, gtr), dataset_loss(model, gva)
        for e in range(cfg.epochs_step1):
            record(1, e, tl1, vl1, tl2, vl2)
    else:
        recon = LearnedADMM.init(recon_cfg.n_iters, cfg.width, recon_cfg.eta, seed=derive_seed(cfg.seed, "recon"))
        for e in range(cfg.epochs_step1):
            recon, h = train_learned_admm(sub(train_set), 1, cfg.lr, derive_seed(cfg.seed, "step1", e), model=recon)
            va_rec = _recon_many(val_set, recon, pair)
            gva = _gen_set(va_rec, val_set, acquired)
            record(1, e, h[0][0], _loss1(va_rec, val_set, acquired), float("nan"), dataset_loss(model, gva))
        recon = recon.with_parameters(recon.parameters(), trained=True)
        tr_rec, va_rec = _recon_many(train_set, recon, pair), _recon_many(val_set, recon, pair)
        tl1, vl1 = _loss1(tr_rec, train_set, acquired), _loss1(va_rec, val_set, acquired)
        gtr, gva = _gen_set(tr_rec, train_set, acquired), _gen_set(va_rec, val_set, acquired)

    # step 2: generator alone on the step-1 reconstructions
    state = AdamState.init(model.parameters(), lr=cfg.lr)
    for e in range(cfg.epochs_step2):
        model, state, tl2 = train_epoch(model, state, gtr, cfg, rng_from(cfg.seed, "step2", e), epoch=e)
        record(2, e, tl1, vl1, tl2, dataset_loss(model, gva))

    # step 3: joint objective
    state = AdamState.init(model.parameters(), lr=cfg.lr)
    if isinstance(recon, LearnedADMM):
        r_state = AdamState.init(recon.parameters(), lr=cfg.lr)
        for e in range(cfg.epochs_step3):
            rng = rng_from(cfg.seed, "step3", e)
            recon, model, r_state, state, tl3 = _joint_epoch(recon, model, r_state, state, train_set, cfg, rng,
                                                             acquired, e)
            va_rec = _recon_many(val_set, recon, pair)
            gva = _gen_set(va_rec, val_set, acquired)
            vl1, vl2 = _loss1(va_rec, val_set, acquired), dataset_loss(model, gva)
            history.append(step=3, epoch=e, train_loss1=float("nan"), val_loss1=vl1, train_loss2=float("nan"),
                           val_loss2=vl2, train_loss3=tl3, val_loss3=vl1 + lam * vl2)
    else:
        for e in range(cfg.epochs_step3):
            model, state, tl2 = train_epoch(model, state, gtr, cfg, rng_from(cfg.seed, "step3", e),
                                            grad_scale=lam, epoch=e)
            record(3, e, tl1, vl1, tl2, dataset_loss(model, gva))
    return recon, model, history
