"""Differentiable numeric kernels: convolution, pooling, activation, dense,
fused softmax cross-entropy, and the SGD update.

Every kernel is a pure function of its inputs, uses float64 throughout, and
checks its outputs for non-finite values. Forward/backward pairs return exact
analytic gradients; ``tests/`` and :mod:`pseudolab.gradcheck` verify them
against central finite differences.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericsError, ShapeError, ValidationError
from .tensor import ConvParams, Tensor, as_f64, ensure_finite


# ---------------------------------------------------------------------------
# convolution


def conv2d_output_hw(h: int, w: int, params: ConvParams) -> tuple[int, int]:
    """Output spatial extents; raises unless (H + 2p - Kh) / stride is a whole number."""
    kh, kw = params.kernel_hw
    s, p = params.stride, params.padding
    if h + 2 * p < kh or w + 2 * p < kw:
        raise ShapeError(
            f"kernel {kh}x{kw} exceeds padded input {h + 2 * p}x{w + 2 * p}"
        )
    if (h + 2 * p - kh) % s or (w + 2 * p - kw) % s:
        raise ConfigError(
            f"non-integer output extent for input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {s}, padding {p}"
        )
    return (h + 2 * p - kh) // s + 1, (w + 2 * p - kw) // s + 1


def _check_conv_input(x: np.ndarray, params: ConvParams) -> None:
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-d (N,C,H,W), got shape {x.shape}")
    if x.shape[1] != params.in_channels:
        raise ShapeError(
            f"conv2d input has {x.shape[1]} channels but kernel expects {params.in_channels}"
        )


def _pad_spatial(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> tuple[np.ndarray, int, int]:
    """Flatten sliding windows of a padded batch to rows of length C*kh*kw."""
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = windows.shape[:4]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def _col2im(gcols: np.ndarray, padded_shape, kh: int, kw: int, stride: int,
            ho: int, wo: int) -> np.ndarray:
    n, c, _, _ = padded_shape
    g6 = gcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    gxp = np.zeros(padded_shape)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g6[:, :, i, j]
    return gxp


def conv2d(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Cross-correlate ``x`` (N,C,H,W) with the kernel and add per-channel bias."""
    x = as_f64(x)
    _check_conv_input(x, params)
    n, _, h, w = x.shape
    ho, wo = conv2d_output_hw(h, w, params)
    kh, kw = params.kernel_hw
    cols, _, _ = _im2col(_pad_spatial(x, params.padding), kh, kw, params.stride)
    y = cols @ params.kernel.data.reshape(params.out_channels, -1).T + params.bias.data
    y = y.reshape(n, ho, wo, params.out_channels).transpose(0, 3, 1, 2)
    return ensure_finite("conv2d", np.ascontiguousarray(y))


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray,
                    params: ConvParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of a scalar loss w.r.t. conv input, kernel and bias."""
    x, grad_out = as_f64(x), as_f64(grad_out)
    _check_conv_input(x, params)
    n, _, h, w = x.shape
    ho, wo = conv2d_output_hw(h, w, params)
    if grad_out.shape != (n, params.out_channels, ho, wo):
        raise ShapeError(
            f"conv2d grad_out shape {grad_out.shape} != expected {(n, params.out_channels, ho, wo)}"
        )
    kh, kw = params.kernel_hw
    s, p = params.stride, params.padding
    xp = _pad_spatial(x, p)
    cols, _, _ = _im2col(xp, kh, kw, s)
    grows = grad_out.transpose(0, 2, 3, 1).reshape(-1, params.out_channels)
    grad_kernel = (grows.T @ cols).reshape(params.kernel.shape)
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    gcols = grows @ params.kernel.data.reshape(params.out_channels, -1)
    gxp = _col2im(gcols, xp.shape, kh, kw, s, ho, wo)
    grad_x = gxp[:, :, p:p + h, p:p + w] if p else gxp
    ensure_finite("conv2d_backward", grad_kernel)
    return np.ascontiguousarray(grad_x), grad_kernel, grad_bias


# ---------------------------------------------------------------------------
# pooling


def _pool_windows(x: np.ndarray) -> np.ndarray:
    """View of non-overlapping 2x2 windows, flattened row-major to the last axis."""
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    wins = x[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2)
    return wins.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)


def maxpool2(x: np.ndarray) -> np.ndarray:
    """Max over non-overlapping 2x2 windows; trailing odd row/column is dropped."""
    x = as_f64(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2 input must be 4-d (N,C,H,W), got shape {x.shape}")
    if x.shape[2] < 2 or x.shape[3] < 2:
        raise ConfigError(f"maxpool2 needs spatial extents >= 2, got {x.shape[2]}x{x.shape[3]}")
    return ensure_finite("maxpool2", _pool_windows(x).max(axis=-1))


def maxpool2_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Route each output gradient to its window's argmax (first row-major position on ties)."""
    x, grad_out = as_f64(x), as_f64(grad_out)
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    if grad_out.shape != (n, c, ho, wo):
        raise ShapeError(f"maxpool2 grad_out shape {grad_out.shape} != expected {(n, c, ho, wo)}")
    wins = _pool_windows(x)
    winners = wins.argmax(axis=-1)
    gwin = np.zeros_like(wins)
    np.put_along_axis(gwin, winners[..., None], grad_out[..., None], axis=-1)
    grad_x = np.zeros_like(x)
    grad_x[:, :, :2 * ho, :2 * wo] = (
        gwin.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
    )
    return grad_x


# ---------------------------------------------------------------------------
# activation and dense


def relu(x: np.ndarray) -> np.ndarray:
    """Elementwise max(x, 0)."""
    x = as_f64(x)
    return ensure_finite("relu", np.maximum(x, 0.0))


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Mask by x > 0; the derivative at exactly 0 is 0."""
    x, grad_out = as_f64(x), as_f64(grad_out)
    if grad_out.shape != x.shape:
        raise ShapeError(f"relu grad_out shape {grad_out.shape} != input shape {x.shape}")
    return grad_out * (x > 0.0)


def dense(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map x @ W + b for x (N,Din), W (Din,Dout), b (Dout)."""
    x, weights, bias = as_f64(x), as_f64(weights), as_f64(bias)
    if x.ndim != 2 or weights.ndim != 2:
        raise ShapeError(f"dense expects 2-d operands, got {x.shape} and {weights.shape}")
    if x.shape[1] != weights.shape[0]:
        raise ShapeError(f"dense inner dimensions disagree: input {x.shape} vs weights {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"dense bias shape {bias.shape} != ({weights.shape[1]},)")
    return ensure_finite("dense", x @ weights + bias)


def dense_backward(grad_out: np.ndarray, x: np.ndarray,
                   weights: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of a scalar loss w.r.t. dense input, weights and bias."""
    x, weights, grad_out = as_f64(x), as_f64(weights), as_f64(grad_out)
    if grad_out.shape != (x.shape[0], weights.shape[1]):
        raise ShapeError(
            f"dense grad_out shape {grad_out.shape} != expected {(x.shape[0], weights.shape[1])}"
        )
    return grad_out @ weights.T, x.T @ grad_out, grad_out.sum(axis=0)


# ---------------------------------------------------------------------------
# softmax cross-entropy


def softmax_crossentropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of ``labels`` under row-wise softmax.

    Returns ``(loss, probs)``. Rows of ``probs`` sum to 1; the loss is computed
    in log-sum-exp form after per-row max subtraction, so it is exact and
    non-negative even for extreme logits.
    """
    logits = as_f64(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be 2-d (N,Cclasses), got shape {logits.shape}")
    n, c = logits.shape
    if c < 2:
        raise ConfigError(f"softmax_crossentropy needs >= 2 classes, got {c}")
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValidationError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    ensure_finite("softmax_crossentropy", shifted)
    expd = np.exp(shifted)
    total = expd.sum(axis=1, keepdims=True)
    probs = expd / total
    log_norm = np.log(total[:, 0])
    loss = float(np.mean(log_norm - shifted[np.arange(n), labels]))
    if not np.isfinite(loss):
        raise NumericsError("softmax_crossentropy produced a non-finite loss")
    return loss, probs


def softmax_crossentropy_backward(probs: np.ndarray, labels) -> np.ndarray:
    """Gradient of the mean loss w.r.t. logits: (probs - onehot) / N."""
    probs = as_f64(probs)
    labels = np.asarray(labels, dtype=np.int64)
    n = probs.shape[0]
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return grad / n


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(named_params: Iterable[tuple[str, Tensor]], learning_rate: float) -> None:
    """In-place p <- p - lr * grad for every named parameter tensor."""
    if learning_rate < 0:
        raise ConfigError(f"learning rate must be >= 0, got {learning_rate}")
    for name, param in named_params:
        if param.grad is None:
            raise ValidationError(f"parameter {name!r} has no gradient")
        if param.grad.shape != param.data.shape:
            raise ShapeError(
                f"parameter {name!r}: grad shape {param.grad.shape} != value shape {param.data.shape}"
            )
        if not np.isfinite(param.grad).all():
            raise NumericsError(f"non-finite gradient for parameter {name!r}")
        param.data -= learning_rate * param.grad
