"""Layer primitives with hand-written forward and backward passes.

Activations are laid out channel-first: ``(N, C, L)`` for temporal feature
maps and ``(N, F)`` for flat features. Every layer caches what its backward
pass needs during ``forward`` and refuses to run ``backward`` otherwise.
``backward`` overwrites (does not accumulate into) each parameter's grad.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when array extents do not chain through a layer."""


class LayerStateError(RuntimeError):
    """Raised when a layer is used out of order (backward before forward,
    eval before any training statistics exist)."""


@dataclass
class ParamTensor:
    value: np.ndarray
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ShapeError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    def zero_grad(self):
        self.grad[...] = 0.0

    @property
    def size(self):
        return self.value.size


# ---------------------------------------------------------------------------
# functional kernels
# ---------------------------------------------------------------------------

def _im2col(x, r):
    """(N, C, H) -> (N * E, C * R) patch matrix, column index c * R + tap."""
    n, c, h = x.shape
    e = h - r + 1
    cols = sliding_window_view(x.transpose(0, 2, 1), r, axis=1)  # (N, E, C, R)
    return cols.reshape(n * e, c * r)


def conv1d_forward(x, w, b, cols=None):
    """Valid, stride-1 1d convolution (cross-correlation).

    x: (N, C, H), w: (M, C, R), b: (M,)  ->  (N, M, H - R + 1)
    """
    if x.ndim != 3:
        raise ShapeError(f"input must be (N, C, H), got shape {x.shape}")
    n, c, h = x.shape
    m, cw, r = w.shape
    if cw != c:
        raise ShapeError(f"input channels C={c} but filter channels C={cw}")
    if b.shape != (m,):
        raise ShapeError(f"bias must have M={m} entries, got {b.shape}")
    if r > h:
        raise ShapeError(f"filter extent R={r} exceeds input extent H={h}")
    if cols is None:
        cols = _im2col(x, r)
    out = cols @ w.reshape(m, c * r).T + b  # (N * E, M)
    return np.ascontiguousarray(out.reshape(n, h - r + 1, m).transpose(0, 2, 1))


def conv1d_backward(grad_out, x, w, cols=None):
    """Gradients of :func:`conv1d_forward` -> (grad_x, grad_w, grad_b)."""
    n, c, h = x.shape
    m, _, r = w.shape
    e = grad_out.shape[2]
    if cols is None:
        cols = _im2col(x, r)
    g2 = grad_out.transpose(0, 2, 1).reshape(n * e, m)
    grad_w = (g2.T @ cols).reshape(m, c, r)
    grad_b = g2.sum(axis=0)
    gcols = (g2 @ w.reshape(m, c * r)).reshape(n, e, c, r)
    grad_x = np.zeros((n, h, c), dtype=gcols.dtype)
    for tap in range(r):
        grad_x[:, tap:tap + e, :] += gcols[:, :, :, tap]
    return np.ascontiguousarray(grad_x.transpose(0, 2, 1)), grad_w, grad_b


def locally_connected_forward(x, w, b):
    """Kernel-size-1 locally connected layer: one C->M map per position.

    x: (N, C, L), w: (L, M, C), b: (L, M)  ->  (N, M, L)
    """
    if x.ndim != 3:
        raise ShapeError(f"input must be (N, C, L), got shape {x.shape}")
    n, c, length = x.shape
    lw, m, cw = w.shape
    if lw != length:
        raise ShapeError(f"input length L={length} but weights cover L={lw} positions")
    if cw != c:
        raise ShapeError(f"input channels C={c} but weights expect C={cw}")
    if b.shape != (length, m):
        raise ShapeError(f"bias must be (L, M)=({length}, {m}), got {b.shape}")
    # batched matmul only hits BLAS with contiguous operands
    xt = np.ascontiguousarray(x.transpose(2, 0, 1))  # (L, N, C)
    out = np.matmul(xt, w.transpose(0, 2, 1)) + b[:, None, :]  # (L, N, M)
    return np.ascontiguousarray(out.transpose(1, 2, 0))


def locally_connected_backward(grad_out, x, w, out=None):
    """``out`` optionally receives grad_w in place."""
    gt = np.ascontiguousarray(grad_out.transpose(2, 0, 1))  # (L, N, M)
    xt = np.ascontiguousarray(x.transpose(2, 0, 1))  # (L, N, C)
    grad_w = np.matmul(gt.transpose(0, 2, 1), xt, out=out)  # (L, M, C)
    grad_b = np.ascontiguousarray(gt.sum(axis=1))
    grad_x = np.matmul(gt, w).transpose(1, 2, 0)  # (N, C, L)
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def linear_forward(x, w, b):
    """x: (N, F_in), w: (F_out, F_in), b: (F_out,) -> (N, F_out)"""
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"input features {x.shape[1:]} do not match weight F_in={w.shape[1]}")
    # (W @ x.T).T picks a faster BLAS kernel than x @ W.T for thin batches
    return (w @ x.T).T + b


def linear_backward(grad_out, x, w, out=None):
    """``out`` optionally receives grad_w in place."""
    grad_w = np.matmul(grad_out.T, x, out=out)
    grad_x = (w.T @ grad_out.T).T
    return grad_x, grad_w, grad_out.sum(axis=0)


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of ``labels`` under softmax(logits).

    Returns ``(loss, grad_logits)``; the loss is in nats.
    """
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in 0..{k - 1}")
    logp = log_softmax(logits)
    idx = np.arange(n)
    loss = -logp[idx, labels].mean()
    grad = np.exp(logp)
    grad[idx, labels] -= 1.0
    grad /= n
    return float(loss), grad


# ---------------------------------------------------------------------------
# layer objects
# ---------------------------------------------------------------------------

class Layer:
    name = "layer"

    def __init__(self):
        self.params: dict[str, ParamTensor] = {}
        self._cache = None

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def _cached(self):
        if self._cache is None:
            raise LayerStateError(f"{self.name}: backward called before forward")
        return self._cache

    def clear_cache(self):
        self._cache = None

    def output_shape(self, input_shape):
        return input_shape


def _buffer(param, like):
    # reuse the grad array across steps; large fresh allocations page-fault
    g = param.grad
    if g.dtype == like.dtype and g.flags.c_contiguous and g.flags.writeable:
        return g
    return None


def _uniform(rng, bound, shape, dtype):
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv1d(Layer):
    def __init__(self, in_channels, out_channels, kernel_size, rng, dtype=np.float64, name="conv"):
        super().__init__()
        self.name = name
        self.in_channels, self.out_channels, self.kernel_size = in_channels, out_channels, kernel_size
        bound = 1.0 / np.sqrt(in_channels * kernel_size)
        self.params["weight"] = ParamTensor(
            _uniform(rng, bound, (out_channels, in_channels, kernel_size), dtype))
        self.params["bias"] = ParamTensor(_uniform(rng, bound, (out_channels,), dtype))

    def forward(self, x, train=False):
        cols = _im2col(x, self.kernel_size) if x.ndim == 3 else None
        self._cache = (x, cols)
        return conv1d_forward(x, self.params["weight"].value, self.params["bias"].value, cols)

    def backward(self, grad_out):
        x, cols = self._cached()
        gx, gw, gb = conv1d_backward(grad_out, x, self.params["weight"].value, cols)
        self.params["weight"].grad = gw
        self.params["bias"].grad = gb
        return gx

    def output_shape(self, input_shape):
        c, h = input_shape
        if c != self.in_channels:
            raise ShapeError(f"{self.name}: C={c} but layer expects C={self.in_channels}")
        return (self.out_channels, h - self.kernel_size + 1)


class LocallyConnected1d(Layer):
    def __init__(self, in_channels, out_channels, length, rng, dtype=np.float64, name="lc"):
        super().__init__()
        self.name = name
        self.in_channels, self.out_channels, self.length = in_channels, out_channels, length
        bound = 1.0 / np.sqrt(in_channels)
        self.params["weight"] = ParamTensor(
            _uniform(rng, bound, (length, out_channels, in_channels), dtype))
        self.params["bias"] = ParamTensor(_uniform(rng, bound, (length, out_channels), dtype))

    def forward(self, x, train=False):
        self._cache = x
        return locally_connected_forward(x, self.params["weight"].value, self.params["bias"].value)

    def backward(self, grad_out):
        x = self._cached()
        gx, gw, gb = locally_connected_backward(
            grad_out, x, self.params["weight"].value, out=_buffer(self.params["weight"], grad_out))
        self.params["weight"].grad = gw
        self.params["bias"].grad = gb
        return gx

    def output_shape(self, input_shape):
        c, length = input_shape
        if (c, length) != (self.in_channels, self.length):
            raise ShapeError(
                f"{self.name}: input (C={c}, L={length}) but layer expects "
                f"(C={self.in_channels}, L={self.length})")
        return (self.out_channels, length)


class Linear(Layer):
    def __init__(self, in_features, out_features, rng, dtype=np.float64, name="fc"):
        super().__init__()
        self.name = name
        self.in_features, self.out_features = in_features, out_features
        bound = 1.0 / np.sqrt(in_features)
        self.params["weight"] = ParamTensor(_uniform(rng, bound, (out_features, in_features), dtype))
        self.params["bias"] = ParamTensor(_uniform(rng, bound, (out_features,), dtype))

    def forward(self, x, train=False):
        self._cache = x
        return linear_forward(x, self.params["weight"].value, self.params["bias"].value)

    def backward(self, grad_out):
        x = self._cached()
        gx, gw, gb = linear_backward(
            grad_out, x, self.params["weight"].value, out=_buffer(self.params["weight"], grad_out))
        self.params["weight"].grad = gw
        self.params["bias"].grad = gb
        return gx

    def output_shape(self, input_shape):
        (f,) = input_shape
        if f != self.in_features:
            raise ShapeError(f"{self.name}: F={f} but layer expects F={self.in_features}")
        return (self.out_features,)


_CHANNEL_SUM = {2: "nc->c", 3: "ncl->c"}
_CHANNEL_DOT = {2: "nc,nc->c", 3: "ncl,ncl->c"}


class BatchNorm(Layer):
    """Per-channel batch normalization over every axis except axis 1.

    Train mode normalizes with the biased batch variance and folds the
    unbiased variance into the running estimate; eval mode uses the running
    statistics only.
    """

    def __init__(self, num_features, eps=1e-5, momentum=0.1, dtype=np.float64, name="bn"):
        super().__init__()
        self.name = name
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.params["gamma"] = ParamTensor(np.ones(num_features, dtype=dtype))
        self.params["beta"] = ParamTensor(np.zeros(num_features, dtype=dtype))
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)
        self.num_batches_tracked = 0
        self.update_running = True

    def _bshape(self, x):
        shape = [1] * x.ndim
        shape[1] = self.num_features
        return tuple(shape)

    def forward(self, x, train=False):
        if x.shape[1] != self.num_features:
            raise ShapeError(f"{self.name}: C={x.shape[1]} but layer normalizes C={self.num_features}")
        if x.ndim not in _CHANNEL_SUM:
            raise ShapeError(f"{self.name}: expected (N, C) or (N, C, L) input, got {x.shape}")
        bs = self._bshape(x)
        gamma = self.params["gamma"].value
        beta = self.params["beta"].value.reshape(bs)
        if train:
            count = x.size // self.num_features
            if count < 2:
                raise ValueError(f"{self.name}: train-mode batch norm needs at least 2 values per channel")
            mean = np.einsum(_CHANNEL_SUM[x.ndim], x) / count
            centered = x - mean.reshape(bs)
            var = np.einsum(_CHANNEL_DOT[x.ndim], centered, centered) / count
            inv_std = 1.0 / np.sqrt(var + self.eps)
            if self.update_running:
                m = self.momentum
                unbiased = var * count / (count - 1)
                self.running_mean *= 1.0 - m
                self.running_mean += m * mean
                self.running_var *= 1.0 - m
                self.running_var += m * unbiased
                self.num_batches_tracked += 1
            self._cache = (centered, inv_std, count)
            return centered * (gamma * inv_std).reshape(bs) + beta
        if self.num_batches_tracked == 0:
            raise LayerStateError(f"{self.name}: eval mode before any training step")
        inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
        centered = x - self.running_mean.reshape(bs)
        self._cache = (centered, inv_std, None)
        return centered * (gamma * inv_std).reshape(bs) + beta

    def backward(self, grad_out):
        # works on the centred input; xhat = centered * inv_std is never stored
        centered, inv_std, count = self._cached()
        bs = self._bshape(grad_out)
        sum_g = np.einsum(_CHANNEL_SUM[grad_out.ndim], grad_out)
        sum_gxhat = np.einsum(_CHANNEL_DOT[grad_out.ndim], grad_out, centered) * inv_std
        self.params["gamma"].grad = sum_gxhat
        self.params["beta"].grad = sum_g
        scale = self.params["gamma"].value * inv_std
        if count is None:
            return grad_out * scale.reshape(bs)
        # scale * (g - mean(g) - xhat * mean(g * xhat))
        dx = grad_out * scale.reshape(bs)
        dx -= centered * (scale * inv_std * sum_gxhat / count).reshape(bs)
        dx -= (scale * sum_g / count).reshape(bs)
        return dx

    def state_arrays(self):
        return {
            "running_mean": self.running_mean,
            "running_var": self.running_var,
            "num_batches_tracked": np.array(self.num_batches_tracked, dtype=np.int64),
        }


class ReLU(Layer):
    name = "relu"

    def forward(self, x, train=False):
        mask = x > 0
        self._cache = mask
        return np.maximum(x, x.dtype.type(0))

    def backward(self, grad_out):
        return grad_out * self._cached()


_IDENTITY = object()


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1/(1-p) in train mode,
    identity in eval mode.

    ``fixed_mask`` pins the keep-mask, which makes the layer a deterministic
    function of its input (used by finite-difference checks).
    """

    def __init__(self, p=0.5, rng=None, name="dropout"):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must satisfy 0 <= p < 1, got {p}")
        self.name = name
        self.p = p
        self.rng = rng if rng is not None else np.random.default_rng()
        self.fixed_mask = None
        self.enabled = True

    def forward(self, x, train=False):
        if not train or self.p == 0.0 or not self.enabled:
            self._cache = _IDENTITY
            return x
        if self.fixed_mask is not None:
            keep = self.fixed_mask
            if keep.shape != x.shape:
                raise ShapeError(f"{self.name}: fixed mask {keep.shape} != input {x.shape}")
        else:
            keep = self.rng.random(x.shape, dtype=np.float32) >= self.p
        mask = keep * x.dtype.type(1.0 / (1.0 - self.p))
        self._cache = mask
        return x * mask

    def backward(self, grad_out):
        mask = self._cached()
        if mask is _IDENTITY:
            return grad_out
        return grad_out * mask


class Flatten(Layer):
    name = "flatten"

    def forward(self, x, train=False):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        return grad_out.reshape(self._cached())

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)


def relu(x):
    return np.maximum(x, 0)


def dropout(x, p=0.5, train=True, rng=None):
    """Functional dropout; returns ``x`` untouched outside train mode."""
    layer = Dropout(p, rng=rng)
    return layer.forward(x, train=train)
