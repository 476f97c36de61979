"""From-scratch 1-D CNN building blocks: layers, loss, init, optimizer.

All training math runs in float64. Layers follow a plain forward/backward
protocol; parameters and their gradients are exposed as aligned lists so the
optimizer stays agnostic of layer internals.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def glorot_init(fan_in: int, fan_out: int, rng: np.random.Generator,
                shape: tuple[int, ...] | None = None) -> np.ndarray:
    """Uniform init on +-sqrt(6 / (fan_in + fan_out))."""
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_out, fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    """Base layer: forward caches whatever backward needs."""

    name = "layer"

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    @property
    def params(self) -> list[np.ndarray]:
        return []

    @property
    def grads(self) -> list[np.ndarray]:
        return []

    def out_shape(self, shape):
        """Symbolic shape propagation; shape excludes the batch axis."""
        return shape


class ChannelScale(Layer):
    """Fixed per-channel affine input scaling: (x - mu) / sd over (B, C, L).

    Not trainable; the statistics are set once from training data to condition
    the optimizer across channels with very different physical ranges.
    """

    name = "scale"

    def __init__(self, mu: np.ndarray, sd: np.ndarray):
        self.mu = np.asarray(mu, dtype=np.float64).reshape(1, -1, 1)
        sd = np.asarray(sd, dtype=np.float64).reshape(1, -1, 1)
        self.sd = np.where(sd > 0, sd, 1.0)

    def forward(self, x, train=False):
        return (x - self.mu) / self.sd

    def backward(self, grad):
        return grad / self.sd


class Conv1D(Layer):
    """Width-3 (by default) same-padded stride-1 convolution over (B, C, L)."""

    def __init__(self, in_channels: int, out_channels: int,
                 rng: np.random.Generator, width: int = 3, name: str = "conv"):
        if width % 2 != 1:
            raise ValueError("kernel width must be odd for same padding")
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.width = width
        self.pad = (width - 1) // 2
        self.w = glorot_init(in_channels * width, out_channels * width, rng,
                             shape=(out_channels, in_channels, width))
        self.b = np.zeros(out_channels)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._cols = None
        self._in_len = 0

    def forward(self, x, train=False):
        b, c, length = x.shape
        if c != self.in_channels:
            raise ValueError(f"{self.name}: expected {self.in_channels} channels, got {c}")
        xpad = np.pad(x, ((0, 0), (0, 0), (self.pad, self.pad)))
        windows = sliding_window_view(xpad, self.width, axis=2)  # (B, C, L, K)
        cols = np.ascontiguousarray(windows.transpose(0, 2, 1, 3)).reshape(
            b, length, c * self.width)
        out = cols @ self.w.reshape(self.out_channels, -1).T + self.b
        self._cols = cols
        self._in_len = length
        return out.transpose(0, 2, 1)

    def backward(self, grad):
        b, _, length = grad.shape
        g = grad.transpose(0, 2, 1)  # (B, L, D)
        flat_g = g.reshape(b * length, self.out_channels)
        flat_cols = self._cols.reshape(b * length, -1)
        self.dw = (flat_g.T @ flat_cols).reshape(self.w.shape)
        self.db = grad.sum(axis=(0, 2))
        dcols = (g @ self.w.reshape(self.out_channels, -1)).reshape(
            b, length, self.in_channels, self.width)
        dxpad = np.zeros((b, self.in_channels, length + 2 * self.pad))
        for k in range(self.width):
            dxpad[:, :, k:k + length] += dcols[:, :, :, k].transpose(0, 2, 1)
        return dxpad[:, :, self.pad:self.pad + self._in_len]

    @property
    def params(self):
        return [self.w, self.b]

    @property
    def grads(self):
        return [self.dw, self.db]

    def out_shape(self, shape):
        return (self.out_channels, shape[1])


class ReLU(Layer):
    name = "relu"

    def forward(self, x, train=False):
        self._mask = x > 0  # subgradient at 0 taken as 0
        return x * self._mask

    def backward(self, grad):
        return grad * self._mask


class MaxPool1D(Layer):
    """Max pooling over (B, C, L); gradients route to the first argmax."""

    def __init__(self, width: int = 2, stride: int = 2, name: str = "pool"):
        self.name = name
        self.width = width
        self.stride = stride

    def forward(self, x, train=False):
        b, c, length = x.shape
        if length < self.width:
            raise ValueError(f"{self.name}: input length {length} < pool width")
        windows = sliding_window_view(x, self.width, axis=2)[:, :, ::self.stride]
        self._argmax = windows.argmax(axis=3)  # first max on ties
        self._in_shape = x.shape
        return windows.max(axis=3)

    def backward(self, grad):
        b, c, n_out = grad.shape
        dx = np.zeros(self._in_shape)
        starts = np.arange(n_out) * self.stride
        pos = starts[None, None, :] + self._argmax
        bi = np.repeat(np.arange(b), c * n_out)
        ci = np.tile(np.repeat(np.arange(c), n_out), b)
        np.add.at(dx, (bi, ci, pos.ravel()), grad.ravel())
        return dx

    def out_shape(self, shape):
        return (shape[0], (shape[1] - self.width) // self.stride + 1)


class Dropout(Layer):
    """Inverted dropout: survivors scaled by 1/(1-p); identity at eval."""

    def __init__(self, p: float, rng: np.random.Generator, name: str = "dropout"):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.name = name
        self.p = p
        self.rng = rng
        self._mask = None

    def forward(self, x, train=False):
        if not train or self.p == 0.0:
            self._mask = None
            return x
        self._mask = (self.rng.random(x.shape) >= self.p) / (1.0 - self.p)
        return x * self._mask

    def backward(self, grad):
        if self._mask is None:
            return grad
        return grad * self._mask


class Flatten(Layer):
    """(B, C, L) -> (B, C*L), channel-major."""

    name = "flatten"

    def forward(self, x, train=False):
        self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._in_shape)

    def out_shape(self, shape):
        return (shape[0] * shape[1],)


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 name: str = "dense"):
        self.name = name
        self.n_in = n_in
        self.n_out = n_out
        self.w = glorot_init(n_in, n_out, rng)
        self.b = np.zeros(n_out)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)

    def forward(self, x, train=False):
        if x.shape[1] != self.n_in:
            raise ValueError(f"{self.name}: expected {self.n_in} features, got {x.shape[1]}")
        self._x = x
        return x @ self.w.T + self.b

    def backward(self, grad):
        self.dw = grad.T @ self._x
        self.db = grad.sum(axis=0)
        return grad @ self.w

    @property
    def params(self):
        return [self.w, self.b]

    @property
    def grads(self):
        return [self.dw, self.db]

    def out_shape(self, shape):
        return (self.n_out,)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    n_classes = logits.shape[1]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels must be in [0, {n_classes}), got "
                         f"[{labels.min()}, {labels.max()}]")
    b = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    loss = -logp[np.arange(b), labels].mean()
    probs = np.exp(logp)
    dlogits = probs.copy()
    dlogits[np.arange(b), labels] -= 1.0
    return float(loss), dlogits / b


class Adam:
    """Adam with bias-corrected moments; defaults match common practice."""

    def __init__(self, lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: list[np.ndarray] | None = None
        self._v: list[np.ndarray] | None = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray],
             names: list[str] | None = None) -> None:
        """One in-place update. Raises on non-finite gradients, naming the
        offending parameter."""
        if self._m is None:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        if len(params) != len(self._m):
            raise ValueError("parameter list changed between steps")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, (p, g) in enumerate(zip(params, grads)):
            if not np.all(np.isfinite(g)):
                label = names[i] if names else f"param[{i}]"
                raise FloatingPointError(f"non-finite gradient in {label}")
            m = self._m[i]
            v = self._v[i]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
