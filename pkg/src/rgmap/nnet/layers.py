"""3x3 same-padded convolution, ReLU and the three-layer ConvBlock.

Tensors are batched as (N, C, H, W) float64. Every ``forward`` returns the
output together with a cache that the matching ``backward`` consumes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ConvLayer",
    "ConvBlock",
    "conv2d_forward",
    "conv2d_backward",
    "relu_forward",
    "relu_backward",
    "he_conv",
]

KERNEL = 3


@dataclass(frozen=True, eq=False)
class ConvLayer:
    weights: np.ndarray   # (out_ch, in_ch, 3, 3)
    bias: np.ndarray      # (out_ch,)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 4 or w.shape[2:] != (KERNEL, KERNEL):
            raise ValueError(f"conv weights must be (out, in, 3, 3), got {w.shape}")
        if b.shape != (w.shape[0],):
            raise ValueError(f"bias shape {b.shape} does not match {w.shape[0]} output channels")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_ch(self) -> int:
        return self.weights.shape[1]

    @property
    def out_ch(self) -> int:
        return self.weights.shape[0]


def he_conv(in_ch: int, out_ch: int, rng: np.random.Generator, scale: float = 1.0) -> ConvLayer:
    """He (fan-in) initialized layer with zero bias."""
    std = scale * np.sqrt(2.0 / (in_ch * KERNEL * KERNEL))
    return ConvLayer(rng.standard_normal((out_ch, in_ch, KERNEL, KERNEL)) * std, np.zeros(out_ch))


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ValueError(f"expected (C, H, W) or (N, C, H, W), got {x.shape}")
    return x, False


def _im2col(xt, h, w):
    """(C, N, H+2, W+2) padded input -> (9*C, N*H*W) columns, tap-major."""
    c, n = xt.shape[:2]
    cols = np.empty((KERNEL * KERNEL, c, n, h, w))
    for k in range(KERNEL * KERNEL):
        dy, dx = divmod(k, KERNEL)
        cols[k] = xt[:, :, dy:dy + h, dx:dx + w]
    return cols.reshape(KERNEL * KERNEL * c, n * h * w)


def conv2d_forward(layer: ConvLayer, x):
    """Zero-padded, stride-1 3x3 convolution (cross-correlation).

    Returns ``(out, cache)``; a 3D input gives a 3D output. The input is
    unrolled into a column matrix so each layer is a single matrix product.
    """
    xb, squeeze = _as_batch(x)
    n, c, h, w = xb.shape
    if c != layer.in_ch:
        raise ValueError(f"input has {c} channels, layer expects {layer.in_ch}")
    # (C, N, H+2, W+2), contiguous
    xt = np.pad(xb.transpose(1, 0, 2, 3), ((0, 0), (0, 0), (1, 1), (1, 1)))
    wmat = layer.weights.transpose(0, 2, 3, 1).reshape(layer.out_ch, -1)
    out = wmat @ _im2col(xt, h, w)
    out += layer.bias[:, None]
    out = np.ascontiguousarray(out.reshape(layer.out_ch, n, h, w).transpose(1, 0, 2, 3))
    return (out[0] if squeeze else out), (layer, xt, squeeze)


def conv2d_backward(cache, gout):
    """Gradients ``(grad_input, grad_weights, grad_bias)`` of a convolution."""
    layer, xt, squeeze = cache
    c, n, hp, wp = xt.shape
    h, w = hp - 2, wp - 2
    g = np.asarray(gout, dtype=np.float64)
    if squeeze:
        g = g[None]
    gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(layer.out_ch, -1)
    gw = (gt @ _im2col(xt, h, w).T).reshape(layer.out_ch, KERNEL, KERNEL, c).transpose(0, 3, 1, 2)
    wmat = layer.weights.transpose(0, 2, 3, 1).reshape(layer.out_ch, -1)
    gcols = (wmat.T @ gt).reshape(KERNEL * KERNEL, c, n, h, w)
    gxt = np.zeros_like(xt)
    for k in range(KERNEL * KERNEL):
        dy, dx = divmod(k, KERNEL)
        gxt[:, :, dy:dy + h, dx:dx + w] += gcols[k]
    gb = gt.sum(axis=1)
    gx = np.ascontiguousarray(gxt[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3))
    return (gx[0] if squeeze else gx), np.ascontiguousarray(gw), gb


def relu_forward(x):
    return np.maximum(x, 0.0), x


def relu_backward(pre, gout):
    """Subgradient at zero is taken as zero."""
    return np.where(pre > 0, gout, 0.0)


@dataclass(frozen=True, eq=False)
class ConvBlock:
    """conv -> ReLU -> conv -> ReLU -> conv."""

    layers: tuple

    def __post_init__(self):
        layers = tuple(self.layers)
        if len(layers) != 3 or not all(isinstance(l, ConvLayer) for l in layers):
            raise ValueError("a ConvBlock holds exactly three ConvLayer objects")
        for a, b in zip(layers, layers[1:]):
            if a.out_ch != b.in_ch:
                raise ValueError("consecutive layer channel counts do not match")
        object.__setattr__(self, "layers", layers)

    @classmethod
    def init(cls, in_ch: int, width: int, out_ch: int, rng: np.random.Generator,
             last_scale: float = 1.0) -> "ConvBlock":
        return cls((he_conv(in_ch, width, rng), he_conv(width, width, rng),
                    he_conv(width, out_ch, rng, scale=last_scale)))

    @property
    def in_ch(self) -> int:
        return self.layers[0].in_ch

    @property
    def out_ch(self) -> int:
        return self.layers[-1].out_ch

    def parameters(self) -> list:
        return [p for l in self.layers for p in (l.weights, l.bias)]

    def with_parameters(self, params) -> "ConvBlock":
        params = list(params)
        return ConvBlock(tuple(ConvLayer(params[2 * i], params[2 * i + 1]) for i in range(3)))

    def forward(self, x):
        h, c1 = conv2d_forward(self.layers[0], x)
        h, r1 = relu_forward(h)
        h, c2 = conv2d_forward(self.layers[1], h)
        h, r2 = relu_forward(h)
        out, c3 = conv2d_forward(self.layers[2], h)
        return out, (c1, r1, c2, r2, c3)

    def backward(self, cache, gout):
        """Returns ``(grad_input, [gW1, gb1, gW2, gb2, gW3, gb3])``."""
        c1, r1, c2, r2, c3 = cache
        g, gw3, gb3 = conv2d_backward(c3, gout)
        g = relu_backward(r2, g)
        g, gw2, gb2 = conv2d_backward(c2, g)
        g = relu_backward(r1, g)
        g, gw1, gb1 = conv2d_backward(c1, g)
        return g, [gw1, gb1, gw2, gb2, gw3, gb3]
