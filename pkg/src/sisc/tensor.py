"""Rank-4 tensor conventions and the numerical layer kernels.

Activations, weights, and response maps all live in numpy arrays of shape
(batch N, channels C, height H, width W), C-contiguous, in one of two
precisions: float64 for oracle/gradient testing ("test grade") and float32
for training runs ("run grade").  Kernels are pure functions of their
inputs; the only mutation anywhere is the running-statistics update inside
train-mode batch normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (ConfigurationError, DataError, InternalConsistencyError,
                     NumericError)

# The universal value type: a rank-4 ndarray in (N, C, H, W) order.
Tensor = np.ndarray

RUN_DTYPE = np.float32
TEST_DTYPE = np.float64


def require_rank4(x: Tensor, name: str = "input") -> None:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        got = getattr(x, "shape", type(x))
        raise ConfigurationError(f"{name} must be a rank-4 (N,C,H,W) array, got {got}")


def ensure_finite(x: np.ndarray, context: str) -> None:
    """Reject NaN/Inf; kernel outputs must stay finite, never silently bad."""
    if not np.isfinite(x).all():
        raise NumericError(f"non-finite values produced by {context}")


def conv_output_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


@dataclass
class ConvParams:
    """Weights (C_out, C_in, kH, kW), per-output-channel bias, stride, symmetric zero pad."""

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        w = np.asarray(self.weights)
        if w.ndim != 4:
            raise ConfigurationError(f"conv weights must be rank 4, got shape {w.shape}")
        c_out, _, kh, kw = w.shape
        if kh < 1 or kw < 1 or c_out < 1:
            raise ConfigurationError(f"conv kernel extents must be >= 1, got {w.shape}")
        b = np.asarray(self.bias)
        if b.shape != (c_out,):
            raise ConfigurationError(
                f"conv bias shape {b.shape} does not match {c_out} output channels")
        if self.stride < 1:
            raise ConfigurationError(f"conv stride must be positive, got {self.stride}")
        if self.padding < 0:
            raise ConfigurationError(f"conv padding must be >= 0, got {self.padding}")
        self.weights = w
        self.bias = b

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]


@dataclass
class PoolSwitches:
    """Argmax bookkeeping from max pooling, reused to place values when unpooling.

    argmax_index holds, for every pooled output element, the flat (row-major)
    coordinate of its source maximum within that sample/channel's H*W plane.
    """

    window: int
    stride: int
    argmax_index: np.ndarray  # (N, C, H_out, W_out), int64
    input_hw: tuple[int, int]

    def __post_init__(self):
        if self.argmax_index.ndim != 4:
            raise ConfigurationError("pool switches must be rank 4")


@dataclass
class BatchNormParams:
    """Per-channel scale/shift plus running statistics for inference."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99
    epsilon: float = 1e-5

    def __post_init__(self):
        c = np.asarray(self.gamma).shape
        for name in ("beta", "running_mean", "running_var"):
            if np.asarray(getattr(self, name)).shape != c:
                raise ConfigurationError(f"batchnorm {name} shape differs from gamma shape {c}")
        if not 0.0 < self.momentum < 1.0:
            raise ConfigurationError(f"batchnorm momentum must be in (0,1), got {self.momentum}")
        if self.epsilon <= 0.0:
            raise ConfigurationError(f"batchnorm epsilon must be > 0, got {self.epsilon}")
        if np.any(np.asarray(self.running_var) < 0):
            raise ConfigurationError("batchnorm running_var must be non-negative")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


# ---------------------------------------------------------------------------
# convolution


def _im2col(x_padded: np.ndarray, kh: int, kw: int, stride: int,
            out_h: int, out_w: int) -> np.ndarray:
    """Gather sliding windows into rows: (N*out_h*out_w, C*kh*kw), batch-major."""
    n, c, _, _ = x_padded.shape
    s0, s1, s2, s3 = x_padded.strides
    windows = np.lib.stride_tricks.as_strided(
        x_padded,
        shape=(n, c, out_h, out_w, kh, kw),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3),
        writeable=False,
    )
    return np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * out_h * out_w, c * kh * kw)


def _col2im(cols: np.ndarray, n: int, c: int, h_pad: int, w_pad: int,
            kh: int, kw: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """Scatter-add im2col rows back onto the padded input grid."""
    x = np.zeros((n, c, h_pad, w_pad), dtype=cols.dtype)
    windows = cols.reshape(n, out_h, out_w, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for u in range(kh):
        for v in range(kw):
            x[:, :, u:u + out_h * stride:stride, v:v + out_w * stride:stride] += \
                windows[:, :, :, :, u, v]
    return x


def _check_conv_shapes(x: Tensor, params: ConvParams) -> tuple[int, int]:
    require_rank4(x)
    if x.shape[1] != params.in_channels:
        raise ConfigurationError(
            f"conv input channels {x.shape[1]} do not match weights expecting "
            f"{params.in_channels} (input shape {x.shape}, weights {params.weights.shape})")
    kh, kw = params.kernel
    out_h = conv_output_extent(x.shape[2], kh, params.stride, params.padding)
    out_w = conv_output_extent(x.shape[3], kw, params.stride, params.padding)
    if out_h < 1 or out_w < 1:
        raise ConfigurationError(
            f"conv output extent ({out_h}x{out_w}) collapsed below 1 for input {x.shape} "
            f"with kernel {params.kernel}, stride {params.stride}, padding {params.padding}")
    return out_h, out_w


def _pad(x: Tensor, padding: int) -> Tensor:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d_fwd(x: Tensor, params: ConvParams) -> Tensor:
    """Cross-correlation: out[n,o,i,j] = b[o] + sum input[n,c,i*s-p+u,j*s-p+v] * w[o,c,u,v]."""
    out_h, out_w = _check_conv_shapes(x, params)
    n = x.shape[0]
    kh, kw = params.kernel
    cols = _im2col(_pad(x, params.padding), kh, kw, params.stride, out_h, out_w)
    w_mat = params.weights.reshape(params.out_channels, -1)
    out = cols @ w_mat.T + params.bias
    out = out.reshape(n, out_h, out_w, params.out_channels).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    ensure_finite(out, "conv2d_fwd")
    return out


def conv2d_bwd(x: Tensor, params: ConvParams,
               grad_out: Tensor) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Analytic gradients of sum(grad_out * conv2d_fwd(x)) w.r.t. input, weights, bias."""
    out_h, out_w = _check_conv_shapes(x, params)
    n = x.shape[0]
    if grad_out.shape != (n, params.out_channels, out_h, out_w):
        raise ConfigurationError(
            f"grad_out shape {grad_out.shape} does not match conv output "
            f"({n},{params.out_channels},{out_h},{out_w})")
    kh, kw = params.kernel
    pad = params.padding
    x_padded = _pad(x, pad)
    cols = _im2col(x_padded, kh, kw, params.stride, out_h, out_w)
    gout_cols = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1)).reshape(
        -1, params.out_channels)

    grad_bias = gout_cols.sum(axis=0)
    grad_weights = (gout_cols.T @ cols).reshape(params.weights.shape)

    w_mat = params.weights.reshape(params.out_channels, -1)
    gx_cols = gout_cols @ w_mat
    gx_padded = _col2im(gx_cols, n, params.in_channels, x_padded.shape[2],
                        x_padded.shape[3], kh, kw, params.stride, out_h, out_w)
    grad_x = gx_padded[:, :, pad:pad + x.shape[2], pad:pad + x.shape[3]]
    grad_x = np.ascontiguousarray(grad_x)
    ensure_finite(grad_x, "conv2d_bwd grad_input")
    ensure_finite(grad_weights, "conv2d_bwd grad_weights")
    return grad_x, grad_weights, grad_bias


def deconv_project(featmaps: Tensor, params: ConvParams) -> Tensor:
    """Project feature maps back into the layer's input space through its kernels.

    Transposed convolution with the layer's own weights, bias excluded; by
    construction identical to the grad_input branch of conv2d_bwd with
    grad_out := featmaps.
    """
    require_rank4(featmaps, "featmaps")
    if featmaps.shape[1] != params.out_channels:
        raise ConfigurationError(
            f"featmaps channels {featmaps.shape[1]} do not match the layer's "
            f"{params.out_channels} output channels")
    n, _, out_h, out_w = featmaps.shape
    kh, kw = params.kernel
    pad = params.padding
    in_h = (out_h - 1) * params.stride + kh - 2 * pad
    in_w = (out_w - 1) * params.stride + kw - 2 * pad
    gout_cols = np.ascontiguousarray(featmaps.transpose(0, 2, 3, 1)).reshape(
        -1, params.out_channels)
    w_mat = params.weights.reshape(params.out_channels, -1)
    gx_cols = gout_cols @ w_mat
    gx_padded = _col2im(gx_cols, n, params.in_channels, in_h + 2 * pad,
                        in_w + 2 * pad, kh, kw, params.stride, out_h, out_w)
    out = np.ascontiguousarray(gx_padded[:, :, pad:pad + in_h, pad:pad + in_w])
    ensure_finite(out, "deconv_project")
    return out


# ---------------------------------------------------------------------------
# pooling


def maxpool_fwd(x: Tensor, window: int) -> tuple[Tensor, PoolSwitches]:
    """Non-overlapping max pooling; ties go to the first element in row-major order."""
    require_rank4(x)
    n, c, h, w = x.shape
    if window < 1 or h % window != 0 or w % window != 0:
        raise ConfigurationError(
            f"pooling window {window} does not divide spatial extents {h}x{w}")
    oh, ow = h // window, w // window
    tiles = x.reshape(n, c, oh, window, ow, window).transpose(0, 1, 2, 4, 3, 5)
    tiles = tiles.reshape(n, c, oh, ow, window * window)
    local = tiles.argmax(axis=-1)
    pooled = np.take_along_axis(tiles, local[..., None], axis=-1)[..., 0]
    rows = (np.arange(oh)[:, None] * window)[None, None, :, :] + local // window
    cols = (np.arange(ow)[None, :] * window)[None, None, :, :] + local % window
    switches = PoolSwitches(window=window, stride=window,
                            argmax_index=(rows * w + cols).astype(np.int64),
                            input_hw=(h, w))
    return np.ascontiguousarray(pooled), switches


def unpool(pooled: Tensor, switches: PoolSwitches, out_shape: tuple[int, ...]) -> Tensor:
    """Scatter pooled values back to their recorded argmax positions, zeros elsewhere."""
    require_rank4(pooled, "pooled")
    if pooled.shape != switches.argmax_index.shape:
        raise ConfigurationError(
            f"pooled shape {pooled.shape} does not match switches "
            f"{switches.argmax_index.shape}")
    n, c, h, w = out_shape
    if (h, w) != switches.input_hw or (n, c) != pooled.shape[:2]:
        raise ConfigurationError(
            f"out_shape {out_shape} inconsistent with switches recorded for "
            f"{pooled.shape[:2] + switches.input_hw}")
    idx = switches.argmax_index.reshape(n, c, -1)
    if idx.min() < 0 or idx.max() >= h * w:
        raise InternalConsistencyError("pool switch index outside the output plane")
    out = np.zeros((n, c, h * w), dtype=pooled.dtype)
    np.put_along_axis(out, idx, pooled.reshape(n, c, -1), axis=2)
    return out.reshape(n, c, h, w)


# ---------------------------------------------------------------------------
# batch normalization


def batch_moments(x: Tensor) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and (biased) variance over the (N, H, W) axes."""
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    return mean, var


def _check_bn(x: Tensor, params: BatchNormParams) -> None:
    require_rank4(x)
    if x.shape[1] != params.channels:
        raise ConfigurationError(
            f"batchnorm expects {params.channels} channels, input has {x.shape[1]}")


def batchnorm_fwd(x: Tensor, params: BatchNormParams, mode: str = "train") -> Tensor:
    """Normalize per channel; train mode uses batch moments and updates running stats."""
    _check_bn(x, params)
    if mode == "train":
        mean, var = batch_moments(x)
        m = params.momentum
        params.running_mean = m * params.running_mean + (1.0 - m) * mean
        params.running_var = m * params.running_var + (1.0 - m) * var
    elif mode == "infer":
        mean, var = params.running_mean, params.running_var
    else:
        raise ConfigurationError(f"batchnorm mode must be 'train' or 'infer', got {mode!r}")
    scale = (params.gamma / np.sqrt(var + params.epsilon)).astype(x.dtype)
    shift = (params.beta - mean * scale).astype(x.dtype)
    out = x * scale[None, :, None, None] + shift[None, :, None, None]
    ensure_finite(out, "batchnorm_fwd")
    return out


def batchnorm_bwd(x: Tensor, params: BatchNormParams,
                  grad_out: Tensor) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Analytic gradients of the train-mode normalization (batch moments from x)."""
    _check_bn(x, params)
    if grad_out.shape != x.shape:
        raise ConfigurationError(
            f"batchnorm grad_out shape {grad_out.shape} differs from input {x.shape}")
    mean, var = batch_moments(x)
    inv_std = 1.0 / np.sqrt(var + params.epsilon)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    gxhat = grad_out * params.gamma[None, :, None, None]
    term = gxhat - gxhat.mean(axis=(0, 2, 3), keepdims=True) \
        - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
    grad_x = term * inv_std[None, :, None, None]
    ensure_finite(grad_x, "batchnorm_bwd")
    return grad_x.astype(x.dtype, copy=False), grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# pointwise layers and the head


def relu(x: Tensor) -> tuple[Tensor, Tensor]:
    """Elementwise max(0, x); the 0/1 mask feeds the backward pass (grad * mask)."""
    mask = (x > 0).astype(x.dtype)
    return x * mask, mask


def dropout(x: Tensor, rate: float, rng: np.random.Generator,
            mode: str = "train") -> tuple[Tensor, Tensor]:
    """Inverted dropout: survivors are scaled by 1/(1-rate) so inference is identity."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0,1), got {rate}")
    if mode == "infer" or rate == 0.0:
        ones = np.ones_like(x)
        return x.copy(), ones
    if mode != "train":
        raise ConfigurationError(f"dropout mode must be 'train' or 'infer', got {mode!r}")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype)
    mask = keep / x.dtype.type(1.0 - rate)
    return x * mask, mask


def gap(x: Tensor) -> Tensor:
    """Global average pooling: (N,C,H,W) -> (N,C,1,1) spatial means."""
    require_rank4(x)
    return x.mean(axis=(2, 3), keepdims=True)


def softmax_probs(logits: Tensor) -> Tensor:
    """Channel-axis softmax of (N,C,1,1) logits, stabilized by max subtraction."""
    require_rank4(logits, "logits")
    n, c = logits.shape[0], logits.shape[1]
    flat = logits.reshape(n, c)
    shifted = flat - flat.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    probs = expd / expd.sum(axis=1, keepdims=True)
    ensure_finite(probs, "softmax")
    return probs.reshape(logits.shape).astype(logits.dtype, copy=False)


def softmax_xent(logits: Tensor,
                 labels: np.ndarray) -> tuple[Tensor, float, Tensor]:
    """Stabilized softmax + mean NLL; grad_logits = (probs - onehot) / N."""
    require_rank4(logits, "logits")
    n, c = logits.shape[0], logits.shape[1]
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ConfigurationError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise DataError(f"labels must lie in [0,{c}), got range "
                        f"[{labels.min()},{labels.max()}]")
    flat = logits.reshape(n, c)
    shifted = flat - flat.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    denom = expd.sum(axis=1, keepdims=True)
    probs = expd / denom
    log_probs = shifted - np.log(denom)
    loss = float(-log_probs[np.arange(n), labels].mean())
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    ensure_finite(probs, "softmax")
    return (probs.reshape(logits.shape).astype(logits.dtype, copy=False), loss,
            grad.reshape(logits.shape).astype(logits.dtype, copy=False))
