"""Layer primitives on top of the tensor engine.

Linear projection, 1D same-padded convolution, batch/layer normalization,
non-overlapping average pooling, LeakyReLU, softmax cross-entropy, and
fan-in-scaled uniform initialization. Layers are plain parameter
containers; the ``*_forward`` functions build the autodiff graph.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, add, matmul, reshape, transpose2d


def kaiming_uniform(shape, fan_in: int, rng: np.random.Generator, dtype=np.float32):
    """Uniform(-sqrt(6/fan_in), +sqrt(6/fan_in)) samples, variance 2/fan_in.

    Draws in float64 before casting so a given seed yields the same values
    at either precision.
    """
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=tuple(shape)).astype(dtype)


class LinearLayer:
    """Fully connected map: y = x W^T + b along the last axis."""

    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor.from_array(
            kaiming_uniform((out_features, in_features), in_features, rng, dtype),
            requires_grad=True,
        )
        self.bias = Tensor.zeros((out_features,), requires_grad=True, dtype=dtype)

    def named_params(self):
        return [("weight", self.weight), ("bias", self.bias)]


def linear_forward(layer: LinearLayer, x: Tensor) -> Tensor:
    if x.ndim < 1 or x.shape[-1] != layer.in_features:
        raise ShapeError(
            f"linear expects last extent {layer.in_features}, got shape {x.shape}"
        )
    lead = x.shape[:-1]
    x2 = reshape(x, (x.size // layer.in_features, layer.in_features))
    y2 = add(matmul(x2, transpose2d(layer.weight)), layer.bias)
    return reshape(y2, lead + (layer.out_features,))


class Conv1dLayer:
    """1D cross-correlation kernels [out_ch, in_ch, k] with per-channel bias."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, dtype=np.float32):
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd and >= 1, got {kernel_size}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.kernels = Tensor.from_array(
            kaiming_uniform(
                (out_channels, in_channels, kernel_size),
                in_channels * kernel_size, rng, dtype,
            ),
            requires_grad=True,
        )
        self.bias = Tensor.zeros((out_channels,), requires_grad=True, dtype=dtype)

    def named_params(self):
        return [("kernels", self.kernels), ("bias", self.bias)]


def conv1d_same(layer: Conv1dLayer, x: Tensor) -> Tensor:
    """Stride-1 convolution with zero same-padding; time extent preserved."""
    if x.ndim != 3:
        raise ShapeError(f"conv1d expects [batch, in_ch, T], got shape {x.shape}")
    batch, in_ch, t_len = x.shape
    if in_ch != layer.in_channels:
        raise ShapeError(
            f"conv1d expects {layer.in_channels} input channels, got {in_ch}"
        )
    k = layer.kernel_size
    pad = (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad)))
    # im2col: cols2[b*t, ci*k] so forward and both weight grads are GEMMs
    cols = np.stack([xp[:, :, j:j + t_len] for j in range(k)], axis=3)
    cols2 = cols.transpose(0, 2, 1, 3).reshape(batch * t_len, in_ch * k)
    w2 = layer.kernels.data.reshape(layer.out_channels, in_ch * k)
    out2 = cols2 @ w2.T + layer.bias.data
    out = np.ascontiguousarray(
        out2.reshape(batch, t_len, layer.out_channels).transpose(0, 2, 1)
    )

    def backward(g):
        g2 = g.transpose(0, 2, 1).reshape(batch * t_len, layer.out_channels)
        d_kernels = (g2.T @ cols2).reshape(layer.kernels.shape)
        d_bias = g.sum(axis=(0, 2))
        dcols = (g2 @ w2).reshape(batch, t_len, in_ch, k).transpose(0, 2, 3, 1)
        dxp = np.zeros_like(xp)
        for j in range(k):
            dxp[:, :, j:j + t_len] += dcols[:, :, j, :]
        return dxp[:, :, pad:pad + t_len], d_kernels, d_bias

    return Tensor._from_op(out, (x, layer.kernels, layer.bias), backward)


def avg_pool1d(x: Tensor, k: int) -> Tensor:
    """Mean over consecutive length-k windows, stride k; remainder dropped."""
    if k < 1:
        raise ValueError(f"pool size must be >= 1, got {k}")
    t_len = x.shape[-1]
    if t_len < k:
        raise ShapeError(f"cannot pool extent {t_len} with window {k}")
    out_len = t_len // k
    kept = out_len * k
    windows = x.data[..., :kept].reshape(x.shape[:-1] + (out_len, k))
    out = windows.mean(axis=-1)

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[..., :kept] = np.repeat(g, k, axis=-1) / k
        return (dx,)

    return Tensor._from_op(out, (x,), backward)


class BatchNorm1d:
    """Per-feature normalization over (batch, time) with running statistics."""

    def __init__(self, num_features: int, momentum: float = 0.1,
                 eps: float = 1e-5, dtype=np.float32):
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor.from_array(np.ones(num_features, dtype=dtype),
                                       requires_grad=True)
        self.beta = Tensor.zeros((num_features,), requires_grad=True, dtype=dtype)
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)
        self.training = True

    def named_params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]


def batch_norm1d(bn: BatchNorm1d, x: Tensor) -> Tensor:
    if x.ndim != 3:
        raise ShapeError(f"batch norm expects [batch, features, T], got {x.shape}")
    batch, feats, t_len = x.shape
    if feats != bn.num_features:
        raise ShapeError(f"batch norm expects {bn.num_features} features, got {feats}")
    xd = x.data
    if bn.training:
        n = batch * t_len
        if n < 2:
            raise ValueError(
                f"train-mode batch norm needs >= 2 values per feature, got {n}"
            )
        mean = xd.mean(axis=(0, 2))
        var = xd.var(axis=(0, 2))  # biased
        m = bn.momentum
        bn.running_mean = ((1 - m) * bn.running_mean + m * mean).astype(
            bn.running_mean.dtype)
        bn.running_var = ((1 - m) * bn.running_var + m * var).astype(
            bn.running_var.dtype)
    else:
        mean = bn.running_mean.astype(xd.dtype)
        var = bn.running_var.astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + bn.eps)
    xhat = (xd - mean[None, :, None]) * inv[None, :, None]
    out = bn.gamma.data[None, :, None] * xhat + bn.beta.data[None, :, None]
    train_mode = bn.training

    def backward(g):
        d_gamma = (g * xhat).sum(axis=(0, 2))
        d_beta = g.sum(axis=(0, 2))
        d_xhat = g * bn.gamma.data[None, :, None]
        if not train_mode:
            return d_xhat * inv[None, :, None], d_gamma, d_beta
        n = batch * t_len
        # batch statistics are functions of x, so they carry gradient too
        dx = (inv[None, :, None] / n) * (
            n * d_xhat
            - d_xhat.sum(axis=(0, 2), keepdims=True)
            - xhat * (d_xhat * xhat).sum(axis=(0, 2), keepdims=True)
        )
        return dx, d_gamma, d_beta

    return Tensor._from_op(out, (x, bn.gamma, bn.beta), backward)


class LayerNorm:
    """Normalization over the last axis with learnable affine."""

    def __init__(self, extent: int, eps: float = 1e-5, dtype=np.float32):
        self.extent = extent
        self.eps = eps
        self.gamma = Tensor.from_array(np.ones(extent, dtype=dtype), requires_grad=True)
        self.beta = Tensor.zeros((extent,), requires_grad=True, dtype=dtype)

    def named_params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]


def layer_norm(p: LayerNorm, x: Tensor) -> Tensor:
    if x.ndim < 1 or x.shape[-1] != p.extent:
        raise ShapeError(f"layer norm expects last extent {p.extent}, got {x.shape}")
    xd = x.data
    mean = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)  # biased
    inv = 1.0 / np.sqrt(var + p.eps)
    xhat = (xd - mean) * inv
    out = p.gamma.data * xhat + p.beta.data
    lead_axes = tuple(range(xd.ndim - 1))

    def backward(g):
        d_gamma = (g * xhat).sum(axis=lead_axes)
        d_beta = g.sum(axis=lead_axes)
        d_xhat = g * p.gamma.data
        dx = inv * (
            d_xhat
            - d_xhat.mean(axis=-1, keepdims=True)
            - xhat * (d_xhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, d_gamma, d_beta

    return Tensor._from_op(out, (x, p.gamma, p.beta), backward)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    """x where x >= 0 else slope*x; the subgradient at 0 is taken as 1."""
    nonneg = x.data >= 0
    out = np.where(nonneg, x.data, slope * x.data).astype(x.dtype, copy=False)
    local = np.where(nonneg, x.dtype.type(1), x.dtype.type(slope))
    return Tensor._from_op(out, (x,), lambda g: (g * local,))


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over the batch of -log softmax(logits)[target]; max-stabilized."""
    if logits.ndim != 2:
        raise ShapeError(f"expected [batch, classes] logits, got {logits.shape}")
    batch, classes = logits.shape
    t = np.asarray(targets)
    if t.shape != (batch,):
        raise ValueError(f"expected {batch} targets, got shape {t.shape}")
    if not np.issubdtype(t.dtype, np.integer):
        raise ValueError(f"targets must be integer class indices, got {t.dtype}")
    if t.min() < 0 or t.max() >= classes:
        raise ValueError(
            f"targets must lie in [0, {classes}), got range "
            f"[{t.min()}, {t.max()}]"
        )
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    expz = np.exp(z)
    sumexp = expz.sum(axis=1, keepdims=True)
    log_probs = z - np.log(sumexp)
    rows = np.arange(batch)
    loss = np.asarray(-log_probs[rows, t].mean(), dtype=logits.dtype)

    def backward(g):
        d = expz / sumexp
        d[rows, t] -= 1.0
        return (g * d / batch,)

    return Tensor._from_op(loss, (logits,), backward)


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Plain (non-graph) stabilized softmax over the last axis."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
