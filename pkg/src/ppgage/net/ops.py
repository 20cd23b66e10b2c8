"""Array operations with explicit backward passes.

Tensors are (batch, channels, length) row-major arrays; ops preserve the
input dtype so the same code runs in float32 for training and float64 for
gradient checks.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import InvalidInputError


def _check_tensor(x: np.ndarray) -> None:
    if x.ndim != 3:
        raise InvalidInputError(f"expected (batch, channels, length), got shape {x.shape}")


def _im2col(x: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
    """(B, C, L) -> (B*Lout, C*K) patch matrix for a single-GEMM convolution."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    windows = sliding_window_view(x, kernel, axis=2)[:, :, ::stride, :]
    n_batch, n_in, out_len, _ = windows.shape
    return windows.transpose(0, 2, 1, 3).reshape(n_batch * out_len, n_in * kernel)


def conv1d(
    x: np.ndarray,
    w: np.ndarray,
    b: np.ndarray,
    stride: int = 1,
    padding: int = 0,
    return_cols: bool = False,
):
    """Cross-correlation of (B, C, L) with kernels (O, C, K) plus bias (O,).

    Output length is floor((L + 2*padding - K) / stride) + 1. With
    ``return_cols`` the patch matrix is also returned so the backward pass
    can skip rebuilding it.
    """
    _check_tensor(x)
    if w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise InvalidInputError(
            f"kernel shape {w.shape} incompatible with input channels {x.shape[1]}"
        )
    if stride < 1:
        raise InvalidInputError("stride must be >= 1")
    n_batch, _, length = x.shape
    n_out, n_in, kernel = w.shape
    if length + 2 * padding < kernel:
        raise InvalidInputError("input shorter than kernel after padding")

    cols = _im2col(x, kernel, stride, padding)
    out_len = cols.shape[0] // n_batch
    y = cols @ w.reshape(n_out, n_in * kernel).T
    y = y.reshape(n_batch, out_len, n_out).transpose(0, 2, 1)
    y = y + b[None, :, None]
    return (y, cols) if return_cols else y


def conv1d_backward(
    dy: np.ndarray,
    x: np.ndarray,
    w: np.ndarray,
    stride: int = 1,
    padding: int = 0,
    cols: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv1d w.r.t. input, kernels, and bias."""
    n_batch, _, length = x.shape
    n_out, n_in, kernel = w.shape
    out_len = dy.shape[2]

    db = dy.sum(axis=(0, 2))

    if cols is None:
        cols = _im2col(x, kernel, stride, padding)
    dy_flat = dy.transpose(0, 2, 1).reshape(n_batch * out_len, n_out)
    dw = (dy_flat.T @ cols).reshape(n_out, n_in, kernel)

    # Input gradient: one GEMM into patch space, then a col2im scatter-add.
    dcols = dy_flat @ w.reshape(n_out, n_in * kernel)
    dcols = dcols.reshape(n_batch, out_len, n_in, kernel).transpose(0, 2, 1, 3)
    dxp = np.zeros(
        (n_batch, n_in, length + 2 * padding), dtype=dy.dtype
    )
    starts = stride * np.arange(out_len)
    for k in range(kernel):
        # Indices starts+k are unique for fixed k, so fancy-index += is safe.
        dxp[:, :, starts + k] += dcols[:, :, :, k]
    dx = dxp[:, :, padding : padding + length] if padding else dxp
    return dx, dw, db


def dense(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Affine map of (B, F) by weights (O, F) and bias (O,)."""
    return x @ w.T + b


def dense_backward(
    dy: np.ndarray, x: np.ndarray, w: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return dy @ w, dy.T @ x, dy.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dy * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """(B, C, L) -> per-channel mean (B, C)."""
    _check_tensor(x)
    return x.mean(axis=2)


def global_avg_pool_backward(dy: np.ndarray, length: int) -> np.ndarray:
    return np.repeat(dy[:, :, None], length, axis=2) / length


def se_block(
    x: np.ndarray,
    reduce_w: np.ndarray,
    reduce_b: np.ndarray,
    expand_w: np.ndarray,
    expand_b: np.ndarray,
) -> tuple[np.ndarray, dict]:
    """Squeeze-and-excitation channel gate.

    Per-channel global average -> bottleneck dense + ReLU -> dense + logistic
    gate in (0, 1) -> channelwise rescale of the input.
    """
    _check_tensor(x)
    channels = x.shape[1]
    if channels != expand_w.shape[0] or channels % reduce_w.shape[0] != 0:
        raise InvalidInputError("SE weights incompatible with channel count")
    squeezed = global_avg_pool(x)
    hidden_pre = dense(squeezed, reduce_w, reduce_b)
    hidden = relu(hidden_pre)
    gate = sigmoid(dense(hidden, expand_w, expand_b))
    y = x * gate[:, :, None]
    cache = {
        "x": x,
        "squeezed": squeezed,
        "hidden_pre": hidden_pre,
        "hidden": hidden,
        "gate": gate,
    }
    return y, cache


def se_block_backward(
    dy: np.ndarray,
    cache: dict,
    reduce_w: np.ndarray,
    expand_w: np.ndarray,
) -> tuple[np.ndarray, dict]:
    """Input gradient and parameter gradients of the SE block."""
    x, gate = cache["x"], cache["gate"]
    length = x.shape[2]

    dx = dy * gate[:, :, None]
    dgate = np.einsum("bcl,bcl->bc", dy, x, optimize=True)
    dgate_pre = dgate * gate * (1.0 - gate)
    dhidden, d_expand_w, d_expand_b = dense_backward(dgate_pre, cache["hidden"], expand_w)
    dhidden_pre = relu_backward(dhidden, cache["hidden_pre"])
    dsqueezed, d_reduce_w, d_reduce_b = dense_backward(
        dhidden_pre, cache["squeezed"], reduce_w
    )
    dx += global_avg_pool_backward(dsqueezed, length)
    grads = {
        "reduce.w": d_reduce_w,
        "reduce.b": d_reduce_b,
        "expand.w": d_expand_w,
        "expand.b": d_expand_b,
    }
    return dx, grads
