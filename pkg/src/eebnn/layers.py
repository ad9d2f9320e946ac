"""Differentiable layer primitives for the training route.

Each layer caches whatever its backward needs during forward, so instances
are single-writer while training. Parameters are stored as float32;
activations and gradients are float64.

Binarisation runs in one of two modes:

* sign mode (the real thing, used for training and inference), where the
  backward applies the straight-through rule: gradients pass where the
  pre-binarisation value lies in [-1, 1] and are zeroed outside;
* surrogate mode, where sign is replaced by the clipped identity so the
  whole network becomes an ordinary differentiable function. The backward
  code is identical in both modes; surrogate mode exists so that the chain
  rule machinery can be validated end to end with finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import bitops


@dataclass(frozen=True)
class Mode:
    train: bool = False
    surrogate: bool = False


def binarized(x: np.ndarray, surrogate: bool) -> np.ndarray:
    if surrogate:
        return np.clip(x, -1.0, 1.0)
    return np.where(x >= 0, 1.0, -1.0)


def ste_mask(x: np.ndarray) -> np.ndarray:
    return (np.abs(x) <= 1.0).astype(np.float64)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax (also accepts a single logit vector)."""
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# --- conv helpers ------------------------------------------------------------


def _conv_forward(x, w, geom: bitops.ConvGeometry, pad_value: float):
    """im2col convolution; x (N,H,W,C) float64, w (O,k,k,C) float64."""
    n, h, wd, c = x.shape
    o, k = w.shape[0], w.shape[1]
    pt, pb, pl, pr = geom.pad_amounts(h, wd)
    oh, ow = geom.out_hw(h, wd)
    if pt or pb or pl or pr:
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)), constant_values=pad_value)
    else:
        xp = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, :: geom.stride, :: geom.stride]  # (N, oh, ow, C, k, k)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * oh * ow, k * k * c)
    wmat = w.reshape(o, k * k * c)
    y = (cols @ wmat.T).reshape(n, oh, ow, o)
    cache = (cols, wmat, (n, h, wd, c), (pt, pl), (oh, ow), k, geom.stride)
    return y, cache


def _conv_backward(dy, cache):
    cols, wmat, (n, h, wd, c), (pt, pl), (oh, ow), k, stride = cache
    o = wmat.shape[0]
    dyf = dy.reshape(n * oh * ow, o)
    dw = (dyf.T @ cols).reshape(o, k, k, c)
    dcols = (dyf @ wmat).reshape(n, oh, ow, k, k, c)
    hp = h + max(pt * 2, (oh - 1) * stride + k - h if pt else 0)
    # reconstruct padded size directly from the window arithmetic
    hp = (oh - 1) * stride + k
    wp = (ow - 1) * stride + k
    hp = max(hp, h + pt)
    wp = max(wp, wd + pl)
    dxp = np.zeros((n, hp, wp, c))
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + oh * stride : stride, j : j + ow * stride : stride, :] += dcols[:, :, :, i, j, :]
    dx = dxp[:, pt : pt + h, pl : pl + wd, :]
    return dx, dw


def conv_infer(x3d, w, geom: bitops.ConvGeometry, pad_value: float) -> np.ndarray:
    """Cache-free float convolution of a single (H,W,C) map."""
    y, _ = _conv_forward(x3d[None].astype(np.float64), np.asarray(w, dtype=np.float64), geom, pad_value)
    return y[0]


def avgpool2(x):
    """2x2 average pooling with stride 2 on the (..., H, W, C) axes.

    Odd extents are zero-padded to even before pooling, matching the
    ceil(n/2) output size of a stride-2 "same" convolution.
    """
    h, wd = x.shape[-3], x.shape[-2]
    ph, pw = h % 2, wd % 2
    if ph or pw:
        pads = [(0, 0)] * (x.ndim - 3) + [(0, ph), (0, pw), (0, 0)]
        x = np.pad(x, pads)
    return 0.25 * (
        x[..., 0::2, 0::2, :] + x[..., 1::2, 0::2, :] + x[..., 0::2, 1::2, :] + x[..., 1::2, 1::2, :]
    )


def avgpool2_backward(dy, h, wd):
    """Backward of avgpool2 for an original (..., h, wd, C) input."""
    up = np.repeat(np.repeat(dy, 2, axis=-3), 2, axis=-2) * 0.25
    return up[..., :h, :wd, :]


# --- layers ------------------------------------------------------------------


class Layer:
    """Base: parameter dict plus accumulated float64 gradients."""

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def binary_param_names(self) -> set[str]:
        return set()

    def __init__(self):
        self.grads: dict[str, np.ndarray] = {}

    def zero_grads(self):
        self.grads = {name: np.zeros(p.shape) for name, p in self.params().items()}

    def _accumulate(self, name, g):
        if name not in self.grads:
            self.grads[name] = np.zeros(self.params()[name].shape)
        self.grads[name] += g


class RealConv2d(Layer):
    """Float-weight convolution (used for the stem). No bias; BN follows."""

    def __init__(self, in_channels, out_channels, kernel, stride, padding, rng):
        super().__init__()
        self.geom = bitops.ConvGeometry(kernel, stride, padding, in_channels, out_channels)
        fan_in = kernel * kernel * in_channels
        self.w = (rng.standard_normal((out_channels, kernel, kernel, in_channels)) * np.sqrt(2.0 / fan_in)).astype(
            np.float32
        )
        self._cache = None

    def params(self):
        return {"w": self.w}

    def forward(self, x, mode: Mode):
        y, self._cache = _conv_forward(x, self.w.astype(np.float64), self.geom, 0.0)
        return y

    def backward(self, dy):
        dx, dw = _conv_backward(dy, self._cache)
        self._accumulate("w", dw)
        return dx

    def infer(self, x3d):
        return conv_infer(x3d, self.w, self.geom, 0.0)


class BinConv2d(Layer):
    """Convolution with binarized weights; expects pre-binarized input.

    The latent float weights are what the optimizer sees; the effective
    weights are their sign (or clipped value in surrogate mode). "Same"
    padding uses -1, the encoding of an absent ±1 signal.
    """

    def __init__(self, in_channels, out_channels, kernel, stride, padding, rng):
        super().__init__()
        self.geom = bitops.ConvGeometry(kernel, stride, padding, in_channels, out_channels)
        self.latent = rng.uniform(-0.9, 0.9, (out_channels, kernel, kernel, in_channels)).astype(np.float32)
        self._cache = None
        self._packed = None

    def params(self):
        return {"latent": self.latent}

    def binary_param_names(self):
        return {"latent"}

    def forward(self, x, mode: Mode):
        latent = self.latent.astype(np.float64)
        w_eff = binarized(latent, mode.surrogate)
        y, conv_cache = _conv_forward(x, w_eff, self.geom, -1.0)
        self._cache = (conv_cache, latent)
        return y

    def backward(self, dy):
        conv_cache, latent = self._cache
        dx, dw_eff = _conv_backward(dy, conv_cache)
        self._accumulate("latent", dw_eff * ste_mask(latent))
        return dx

    def packed_weights(self) -> bitops.BitTensor:
        if self._packed is None:
            self._packed = bitops.binarize(self.latent.astype(np.float64))
        return self._packed

    def invalidate_packed(self):
        self._packed = None

    def infer(self, xbits: bitops.BitTensor) -> np.ndarray:
        return bitops.binary_conv2d(xbits, self.packed_weights(), self.geom).astype(np.float64)


class Binarize(Layer):
    """Activation binarisation with the straight-through backward."""

    def __init__(self):
        super().__init__()
        self._cache = None

    def forward(self, x, mode: Mode):
        self._cache = x
        return binarized(x, mode.surrogate)

    def backward(self, dy):
        return dy * ste_mask(self._cache)


class BatchNorm(Layer):
    """Per-channel batch normalisation over the (N, H, W) axes."""

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.gamma = np.ones(channels, dtype=np.float32)
        self.beta = np.zeros(channels, dtype=np.float32)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps
        self._cache = None

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, mode: Mode):
        axes = tuple(range(x.ndim - 1))
        if mode.train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            inv = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean) * inv
            self.running_mean = ((1 - self.momentum) * self.running_mean + self.momentum * mean).astype(np.float32)
            self.running_var = ((1 - self.momentum) * self.running_var + self.momentum * var).astype(np.float32)
            self._cache = (xhat, inv, axes, "train")
            return self.gamma.astype(np.float64) * xhat + self.beta.astype(np.float64)
        return self._affine_eval(x, cache=True)

    def _affine_eval(self, x, cache=False):
        inv = 1.0 / np.sqrt(self.running_var.astype(np.float64) + self.eps)
        xhat = (x - self.running_mean.astype(np.float64)) * inv
        if cache:
            self._cache = (xhat, inv, tuple(range(x.ndim - 1)), "eval")
        return self.gamma.astype(np.float64) * xhat + self.beta.astype(np.float64)

    def backward(self, dy):
        xhat, inv, axes, kind = self._cache
        self._accumulate("gamma", (dy * xhat).sum(axis=axes))
        self._accumulate("beta", dy.sum(axis=axes))
        g = self.gamma.astype(np.float64)
        if kind == "eval":
            return dy * g * inv
        m = np.prod([xhat.shape[a] for a in axes])
        dxhat = dy * g
        return (inv / m) * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))

    def infer(self, x3d):
        return self._affine_eval(x3d)


class GlobalAvgPool(Layer):
    def __init__(self):
        super().__init__()
        self._hw = None

    def forward(self, x, mode: Mode):
        self._hw = x.shape[1:3]
        return x.mean(axis=(1, 2))

    def backward(self, dy):
        h, w = self._hw
        return np.broadcast_to(dy[:, None, None, :] / (h * w), (dy.shape[0], h, w, dy.shape[1])).copy()


class ExitHead(Layer):
    """Classifier head: global average pool, binarize, binary dense, affine.

    The integer dot products from the binary dense layer pass through a
    learned per-class scale and bias before softmax, which gives the head
    real-valued expressivity despite its ±1 weights.
    """

    def __init__(self, n_features, n_classes, rng):
        super().__init__()
        self.n_features = n_features
        self.n_classes = n_classes
        self.latent = rng.uniform(-0.9, 0.9, (n_classes, n_features)).astype(np.float32)
        self.scale = np.full(n_classes, 1.0 / np.sqrt(n_features), dtype=np.float32)
        self.bias = np.zeros(n_classes, dtype=np.float32)
        self._cache = None
        self._packed = None

    def params(self):
        return {"latent": self.latent, "scale": self.scale, "bias": self.bias}

    def binary_param_names(self):
        return {"latent"}

    @property
    def macs(self) -> int:
        return self.n_features * self.n_classes

    def forward(self, act, mode: Mode):
        """act is (N, H, W, C); returns logits (N, n_classes)."""
        hw = act.shape[1:3]
        pooled = act.mean(axis=(1, 2))
        xb = binarized(pooled, mode.surrogate)
        latent = self.latent.astype(np.float64)
        wb = binarized(latent, mode.surrogate)
        ints = xb @ wb.T
        logits = self.scale.astype(np.float64) * ints + self.bias.astype(np.float64)
        self._cache = (hw, pooled, xb, latent, wb, ints)
        return logits

    def backward(self, dlogits):
        hw, pooled, xb, latent, wb, ints = self._cache
        self._accumulate("scale", (dlogits * ints).sum(axis=0))
        self._accumulate("bias", dlogits.sum(axis=0))
        dints = dlogits * self.scale.astype(np.float64)
        self._accumulate("latent", (dints.T @ xb) * ste_mask(latent))
        dxb = dints @ wb
        dpooled = dxb * ste_mask(pooled)
        h, w = hw
        n = dpooled.shape[0]
        return np.broadcast_to(dpooled[:, None, None, :] / (h * w), (n, h, w, dpooled.shape[1])).copy()

    def packed_weights(self) -> bitops.BitTensor:
        if self._packed is None:
            self._packed = bitops.binarize(self.latent.astype(np.float64))
        return self._packed

    def invalidate_packed(self):
        self._packed = None

    def infer(self, act3d) -> np.ndarray:
        """Distribution over classes for a single (H, W, C) activation map."""
        pooled = act3d.mean(axis=(0, 1))
        ints = bitops.binary_dense(bitops.binarize(pooled), self.packed_weights()).astype(np.float64)
        logits = self.scale.astype(np.float64) * ints + self.bias.astype(np.float64)
        return softmax(logits)
