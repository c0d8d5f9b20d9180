"""Dense-tensor neural network core.

Layers are small stateful objects that hold hyper-parameters and the
activations cached by the last ``forward``; parameters live outside the layer
(in a :class:`~fedhm.modelspec.Model`) and are passed in on every call. This
keeps one client's training state confined to its own model copy.

Layout is (batch, channel, height, width) throughout. Dense weights are stored
as (in, out); conv weights as (out, in, kh, kw).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .factorize import frobenius_decay_grad


class DimensionError(ValueError):
    """Operand shapes do not compose."""


class StateError(RuntimeError):
    """Backward called without a matching forward."""


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


# ---------------------------------------------------------------------------
# dense


def dense_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0]:
        raise DimensionError(f"dense: cannot multiply {x.shape} by {W.shape}")
    out = x @ W
    if b is not None:
        if b.shape != (W.shape[1],):
            raise DimensionError(f"dense: bias {b.shape} does not match {W.shape[1]} outputs")
        out = out + b
    return out


def dense_backward(dout, x, W):
    """Returns (dx, dW, db)."""
    return dout @ W.T, x.T @ dout, dout.sum(axis=0)


def factorized_dense_forward(x: np.ndarray, U: np.ndarray, V: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    # (xU)V^T; the product UV^T is never formed
    if U.ndim != 2 or V.ndim != 2 or U.shape[1] != V.shape[1]:
        raise DimensionError(f"factorized dense: factors {U.shape}, {V.shape} do not pair")
    r = U.shape[1]
    if r > min(U.shape[0], V.shape[0]):
        raise DimensionError(f"factorized dense: rank {r} exceeds min{U.shape[0], V.shape[0]}")
    h = dense_forward(x, U)
    out = h @ V.T
    if b is not None:
        out = out + b
    return out


# ---------------------------------------------------------------------------
# convolution


def _conv_out(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def conv2d_forward(x: np.ndarray, W: np.ndarray, stride=1, padding=0, return_cols: bool = False):
    """Cross-correlation of x (B, m, H, W) with W (n, m, kh, kw).

    ``stride`` and ``padding`` are ints or (vertical, horizontal) pairs.
    """
    if x.ndim != 4 or W.ndim != 4:
        raise DimensionError(f"conv2d expects 4D input and weight, got {x.shape}, {W.shape}")
    if x.shape[1] != W.shape[1]:
        raise DimensionError(f"conv2d: input has {x.shape[1]} channels, weight expects {W.shape[1]}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, m, kh, kw = W.shape
    B, _, H, Wd = x.shape
    Ho, Wo = _conv_out(H, kh, sh, ph), _conv_out(Wd, kw, sw, pw)
    if Ho <= 0 or Wo <= 0:
        raise DimensionError(f"conv2d: non-positive output extent ({Ho}, {Wo}) for input {x.shape}")
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    cols = kernels.im2col(xp, kh, kw, sh, sw)
    out = cols.reshape(B * Ho * Wo, m * kh * kw) @ W.reshape(n, -1).T
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, n).transpose(0, 3, 1, 2))
    if return_cols:
        return out, cols
    return out


def conv2d_backward(dout, cols, x_shape, W, stride=1, padding=0):
    """Returns (dx, dW) given the im2col buffer cached by the forward pass."""
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, m, kh, kw = W.shape
    B, _, H, Wd = x_shape
    Ho, Wo = dout.shape[2], dout.shape[3]
    d2 = dout.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, n)
    dW = (d2.T @ cols.reshape(B * Ho * Wo, m * kh * kw)).reshape(W.shape)
    dcols = (d2 @ W.reshape(n, -1)).reshape(B, Ho, Wo, m, kh, kw)
    dxp = kernels.col2im(dcols, (B, m, H + 2 * ph, Wd + 2 * pw), sh, sw)
    dx = dxp[:, :, ph : ph + H, pw : pw + Wd]
    return np.ascontiguousarray(dx), dW


def factorized_conv_forward(x: np.ndarray, U: np.ndarray, V: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Two-stage separable conv: U is (r, m, k, 1), V is (n, r, 1, k).

    Vertical stride/padding go to the U stage, horizontal to the V stage.
    """
    if U.ndim != 4 or V.ndim != 4 or U.shape[3] != 1 or V.shape[2] != 1 or U.shape[0] != V.shape[1]:
        raise DimensionError(f"factorized conv: factors {U.shape}, {V.shape} do not pair")
    h = conv2d_forward(x, U, (stride, 1), (padding, 0))
    return conv2d_forward(h, V, (1, stride), (0, padding))


# ---------------------------------------------------------------------------
# batch norm


BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _bn_axes(x):
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    if x.ndim == 2:
        return (0,), (1, -1)
    raise DimensionError(f"batchnorm expects 2D or 4D input, got {x.shape}")


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train: bool = True):
    """Returns (out, cache). In train mode the running buffers are updated in place."""
    if x.shape[0] == 0:
        raise DimensionError("batchnorm: empty batch")
    axes, bshape = _bn_axes(x)
    if x.shape[1] != gamma.shape[0]:
        raise DimensionError(f"batchnorm: {x.shape[1]} channels vs {gamma.shape[0]} parameters")
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        count = x.size // x.shape[1]
        unbiased = var * count / (count - 1) if count > 1 else var
        running_mean *= 1 - BN_MOMENTUM
        running_mean += BN_MOMENTUM * mean
        running_var *= 1 - BN_MOMENTUM
        running_var += BN_MOMENTUM * unbiased
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.reshape(bshape) + beta.reshape(bshape)
    return out, (xhat, inv_std, gamma, axes, bshape)


def batchnorm_backward(dout, cache):
    """Backward through training-mode batch norm. Returns (dx, dgamma, dbeta)."""
    xhat, inv_std, gamma, axes, bshape = cache
    count = dout.size // dout.shape[1]
    dbeta = dout.sum(axis=axes)
    dgamma = (dout * xhat).sum(axis=axes)
    dxhat = dout * gamma.reshape(bshape)
    dx = (inv_std.reshape(bshape) / count) * (
        count * dxhat - dxhat.sum(axis=axes).reshape(bshape) - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
    )
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# loss


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of the true class and its gradient."""
    labels = np.asarray(labels, dtype=np.int64)
    B, C = logits.shape
    if labels.shape != (B,):
        raise DimensionError(f"expected {B} labels, got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"label out of range [0, {C})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsumexp
    rows = np.arange(B)
    loss = float(-logp[rows, labels].mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= B
    return loss, grad


# ---------------------------------------------------------------------------
# layers


class Layer:
    """Base class; subclasses cache activations in ``forward``."""

    param_names: tuple[str, ...] = ()

    def __init__(self, name: str):
        self.name = name
        self._cache = None

    def _take_cache(self):
        if self._cache is None:
            raise StateError(f"{self.name}: backward called before forward")
        cache, self._cache = self._cache, None
        return cache

    def p(self, params, key):
        return params[f"{self.name}.{key}"]

    def forward(self, params, buffers, x, train):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, name, bias=True):
        super().__init__(name)
        self.bias = bias
        self.param_names = ("W", "b") if bias else ("W",)

    def forward(self, params, buffers, x, train):
        W = self.p(params, "W")
        self._cache = (x, W)
        return dense_forward(x, W, self.p(params, "b") if self.bias else None)

    def backward(self, dy):
        x, W = self._take_cache()
        dx, dW, db = dense_backward(dy, x, W)
        grads = {f"{self.name}.W": dW}
        if self.bias:
            grads[f"{self.name}.b"] = db
        return dx, grads


class FactorizedDense(Layer):
    def __init__(self, name, bias=True):
        super().__init__(name)
        self.bias = bias
        self.param_names = ("U", "V", "b") if bias else ("U", "V")

    def forward(self, params, buffers, x, train):
        U, V = self.p(params, "U"), self.p(params, "V")
        h = dense_forward(x, U)
        self._cache = (x, h, U, V)
        out = h @ V.T
        if self.bias:
            out = out + self.p(params, "b")
        return out

    def backward(self, dy):
        x, h, U, V = self._take_cache()
        dV = dy.T @ h
        dh = dy @ V
        grads = {f"{self.name}.U": x.T @ dh, f"{self.name}.V": dV}
        if self.bias:
            grads[f"{self.name}.b"] = dy.sum(axis=0)
        return dh @ U.T, grads


class Conv2D(Layer):
    param_names = ("W",)

    def __init__(self, name, stride=1, padding=0):
        super().__init__(name)
        self.stride, self.padding = stride, padding

    def forward(self, params, buffers, x, train):
        W = self.p(params, "W")
        out, cols = conv2d_forward(x, W, self.stride, self.padding, return_cols=True)
        self._cache = (cols, x.shape, W)
        return out

    def backward(self, dy):
        cols, shape, W = self._take_cache()
        dx, dW = conv2d_backward(dy, cols, shape, W, self.stride, self.padding)
        return dx, {f"{self.name}.W": dW}


class FactorizedConv(Layer):
    param_names = ("U", "V")

    def __init__(self, name, stride=1, padding=0):
        super().__init__(name)
        self.stride, self.padding = stride, padding

    def forward(self, params, buffers, x, train):
        U, V = self.p(params, "U"), self.p(params, "V")
        s, p = self.stride, self.padding
        h, cols_u = conv2d_forward(x, U, (s, 1), (p, 0), return_cols=True)
        out, cols_v = conv2d_forward(h, V, (1, s), (0, p), return_cols=True)
        self._cache = (cols_u, x.shape, U, cols_v, h.shape, V)
        return out

    def backward(self, dy):
        cols_u, x_shape, U, cols_v, h_shape, V = self._take_cache()
        s, p = self.stride, self.padding
        dh, dV = conv2d_backward(dy, cols_v, h_shape, V, (1, s), (0, p))
        dx, dU = conv2d_backward(dh, cols_u, x_shape, U, (s, 1), (p, 0))
        return dx, {f"{self.name}.U": dU, f"{self.name}.V": dV}


class BatchNorm(Layer):
    param_names = ("gamma", "beta")

    def forward(self, params, buffers, x, train):
        out, cache = batchnorm_forward(
            x,
            self.p(params, "gamma"),
            self.p(params, "beta"),
            buffers[f"{self.name}.running_mean"],
            buffers[f"{self.name}.running_var"],
            train=train,
        )
        self._cache = cache if train else None
        return out

    def backward(self, dy):
        dx, dgamma, dbeta = batchnorm_backward(dy, self._take_cache())
        return dx, {f"{self.name}.gamma": dgamma, f"{self.name}.beta": dbeta}


class ReLU(Layer):
    def forward(self, params, buffers, x, train):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, dy):
        return dy * self._take_cache(), {}


class AvgPool(Layer):
    """Global average pool over the spatial dims: (B, C, H, W) -> (B, C, 1, 1)."""

    def forward(self, params, buffers, x, train):
        self._cache = x.shape
        return x.mean(axis=(2, 3), keepdims=True)

    def backward(self, dy):
        B, C, H, W = self._take_cache()
        return np.broadcast_to(dy / (H * W), (B, C, H, W)).copy(), {}


class Flatten(Layer):
    def forward(self, params, buffers, x, train):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._take_cache()), {}


class Add(Layer):
    """Elementwise sum of two inputs (residual join)."""

    def forward(self, params, buffers, xs, train):
        a, b = xs
        if a.shape != b.shape:
            raise DimensionError(f"{self.name}: cannot add {a.shape} and {b.shape}")
        self._cache = True
        return a + b

    def backward(self, dy):
        self._take_cache()
        return (dy, dy), {}


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class SgdState:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    frobenius_decay: float = 1e-4
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0 or self.frobenius_decay < 0:
            raise ValueError("decay coefficients must be >= 0")


def decay_terms(params: dict, weight_decay: float, frobenius_decay: float) -> dict:
    """Regularizer gradients: wd*W for full weights, Frobenius decay for U/V pairs.

    Biases and batch-norm affine parameters receive no decay.
    """
    terms = {}
    for key, value in params.items():
        layer, _, pname = key.rpartition(".")
        if pname == "W" and weight_decay:
            terms[key] = weight_decay * value
        elif pname == "U" and frobenius_decay:
            gU, gV = frobenius_decay_grad(value, params[f"{layer}.V"], frobenius_decay)
            terms[key] = gU
            terms[f"{layer}.V"] = gV
    return terms


def sgd_step(params: dict, grads: dict, state: SgdState) -> dict:
    """One momentum-SGD step, in place: v <- mu*v + g + decay; p <- p - lr*v."""
    decay = decay_terms(params, state.weight_decay, state.frobenius_decay)
    for key, p in params.items():
        g = grads.get(key)
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"{key}: gradient {g.shape} vs parameter {p.shape}")
        if key in decay:
            g = g + decay[key]
        v = state.velocity.get(key)
        if v is None or state.momentum == 0:
            v = np.array(g, dtype=p.dtype, copy=True)
        else:
            v *= state.momentum
            v += g
        state.velocity[key] = v
        p -= state.lr * v
    return params
