"""Differentiable numpy kernels for directional attention modules.

Layout conventions:
    rank-4 tensors are (N, C, H, W), rank-3 tensors are (N, C, L), row-major.
Strip pooling averages over W to produce the height map (N, C, H) and over H
to produce the width map (N, C, W); the divisor is always the pooled extent.
All convolutions are cross-correlations (no kernel flip) with zero
same-padding of floor(k/2) on each side, so spatial lengths are preserved.

Each forward kernel has a matching `*_backward` that is the exact adjoint;
all are pure functions except `batch_norm`, which updates running statistics
in train mode.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Input shapes violate a kernel precondition."""


class UninitializedNormError(RuntimeError):
    """Eval-mode batch norm requested before any running statistics exist."""


def check_nchw(x):
    if x.ndim != 4:
        raise ShapeError(f"expected rank-4 (N,C,H,W) tensor, got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"all dimensions must be >= 1, got {x.shape}")


def check_ncl(x):
    if x.ndim != 3:
        raise ShapeError(f"expected rank-3 (N,C,L) tensor, got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"all dimensions must be >= 1, got {x.shape}")


# ---------------------------------------------------------------------------
# strip pooling and global pooling
# ---------------------------------------------------------------------------

def strip_pool_h(x):
    """Directional average over W: (N,C,H,W) -> (N,C,H)."""
    check_nchw(x)
    return x.mean(axis=3)


def strip_pool_w(x):
    """Directional average over H: (N,C,H,W) -> (N,C,W)."""
    check_nchw(x)
    return x.mean(axis=2)


def strip_pool_backward(dz, orig_shape, pooled_axis):
    """Adjoint of strip pooling: broadcast dz/L along the pooled axis.

    pooled_axis is 3 for strip_pool_h (W was pooled) and 2 for strip_pool_w.
    """
    n, c, h, w = orig_shape
    if pooled_axis == 3:
        if dz.shape != (n, c, h):
            raise ShapeError(f"dz shape {dz.shape} inconsistent with {orig_shape}")
        return np.broadcast_to(dz[:, :, :, None], orig_shape) / w
    if pooled_axis == 2:
        if dz.shape != (n, c, w):
            raise ShapeError(f"dz shape {dz.shape} inconsistent with {orig_shape}")
        return np.broadcast_to(dz[:, :, None, :], orig_shape) / h
    raise ShapeError(f"pooled_axis must be 2 or 3, got {pooled_axis}")


def global_avg_pool(x):
    """Mean over H*W per channel: (N,C,H,W) -> (N,C,1)."""
    check_nchw(x)
    return x.mean(axis=(2, 3))[:, :, None]


def global_avg_pool_backward(dz, orig_shape):
    n, c, h, w = orig_shape
    if dz.shape != (n, c, 1):
        raise ShapeError(f"dz shape {dz.shape} inconsistent with {orig_shape}")
    return np.broadcast_to(dz[:, :, :, None], orig_shape) / (h * w)


# ---------------------------------------------------------------------------
# grouped 1D convolution (same padding)
# ---------------------------------------------------------------------------

def conv1d_grouped(x, weight, bias=None, groups=1):
    """Grouped same-padded 1D cross-correlation on (N,C,L).

    weight has shape (C_out, C_in/groups, k) with odd k; output length == L.
    """
    check_ncl(x)
    n, c_in, length = x.shape
    c_out, cpg, k = weight.shape
    if k % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {k}")
    if c_in % groups != 0 or c_out % groups != 0:
        raise ShapeError(f"groups={groups} must divide C_in={c_in} and C_out={c_out}")
    if cpg != c_in // groups:
        raise ShapeError(
            f"weight expects {cpg} channels per group, input provides {c_in // groups}"
        )
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    win = sliding_window_view(xp, k, axis=2)  # (N, C_in, L, k)
    opg = c_out // groups
    out = np.empty((n, c_out, length), dtype=x.dtype)
    for g in range(groups):
        wg = weight[g * opg:(g + 1) * opg]          # (opg, cpg, k)
        xg = win[:, g * cpg:(g + 1) * cpg]          # (N, cpg, L, k)
        out[:, g * opg:(g + 1) * opg] = np.einsum("nclk,ock->nol", xg, wg)
    if bias is not None:
        out += bias[None, :, None]
    return out


def conv1d_grouped_backward(dy, x, weight, groups=1, with_bias=False):
    """Adjoint of conv1d_grouped: returns (dx, dweight, dbias-or-None)."""
    n, c_in, length = x.shape
    c_out, cpg, k = weight.shape
    if dy.shape != (n, c_out, length):
        raise ShapeError(f"dy shape {dy.shape} inconsistent with forward output")
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    win = sliding_window_view(xp, k, axis=2)
    opg = c_out // groups
    dweight = np.empty_like(weight)
    dxp = np.zeros_like(xp)
    for g in range(groups):
        sl_o = slice(g * opg, (g + 1) * opg)
        sl_i = slice(g * cpg, (g + 1) * cpg)
        dweight[sl_o] = np.einsum("nol,nclk->ock", dy[:, sl_o], win[:, sl_i])
        scatter = np.einsum("nol,ock->nclk", dy[:, sl_o], weight[sl_o])
        for kk in range(k):
            dxp[:, sl_i, kk:kk + length] += scatter[:, :, :, kk]
    dx = dxp[:, :, pad:pad + length] if pad else dxp
    dbias = dy.sum(axis=(0, 2)) if with_bias else None
    return dx, dweight, dbias


# ---------------------------------------------------------------------------
# pointwise (1x1) convolution: pure channel mixing at every position
# ---------------------------------------------------------------------------

def conv2d_1x1(x, weight, bias=None):
    """Per-position channel mixing. x is (N,C,...) with any spatial tail."""
    if x.ndim < 3:
        raise ShapeError(f"expected at least (N,C,L), got shape {x.shape}")
    if weight.shape[1] != x.shape[1]:
        raise ShapeError(
            f"weight expects {weight.shape[1]} input channels, got {x.shape[1]}"
        )
    out = np.einsum("oc,nc...->no...", weight, x)
    if bias is not None:
        out += bias.reshape((1, -1) + (1,) * (x.ndim - 2))
    return out


def conv2d_1x1_backward(dy, x, weight, with_bias=False):
    dyf = dy.reshape(dy.shape[0], dy.shape[1], -1)
    xf = x.reshape(x.shape[0], x.shape[1], -1)
    dx = np.einsum("oc,nop->ncp", weight, dyf).reshape(x.shape)
    dweight = np.einsum("nop,ncp->oc", dyf, xf)
    dbias = dyf.sum(axis=(0, 2)) if with_bias else None
    return dx, dweight, dbias


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

@dataclass
class NormState:
    """Running statistics and mode for batch normalization."""

    num_channels: int
    momentum: float = 0.1
    eps: float = 1e-5
    mode: str = "train"  # train | eval
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)
    initialized: bool = False

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"momentum must be in (0,1), got {self.momentum}")
        if self.eps <= 0.0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.running_mean is None:
            self.running_mean = np.zeros(self.num_channels)
        if self.running_var is None:
            self.running_var = np.ones(self.num_channels)


def batch_norm(x, state, gamma, beta):
    """Per-channel batch normalization; x is (N,C,...).

    Train mode normalizes with batch statistics over (N, spatial) and updates
    the running estimates; eval mode uses running statistics only. Returns
    (out, cache); cache is None in eval mode.
    """
    if x.ndim < 3:
        raise ShapeError(f"expected at least (N,C,L), got shape {x.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    if state.mode == "eval":
        if not state.initialized:
            raise UninitializedNormError(
                "eval-mode batch norm called before running statistics exist"
            )
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x - state.running_mean.reshape(bshape)) * inv_std.reshape(bshape)
        return gamma.reshape(bshape) * xhat + beta.reshape(bshape), None
    count = x.shape[0] * int(np.prod(x.shape[2:]))
    if count < 2:
        raise ShapeError("train-mode batch norm needs N * spatial >= 2")
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)  # population variance
    m = state.momentum
    state.running_mean = (1.0 - m) * state.running_mean + m * mean
    state.running_var = (1.0 - m) * state.running_var + m * var
    state.initialized = True
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.reshape(bshape) * xhat + beta.reshape(bshape)
    return out, (xhat, inv_std, gamma, count)


def batch_norm_backward(dy, cache):
    """Adjoint of train-mode batch_norm: returns (dx, dgamma, dbeta)."""
    xhat, inv_std, gamma, count = cache
    axes = (0,) + tuple(range(2, dy.ndim))
    bshape = (1, -1) + (1,) * (dy.ndim - 2)
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma.reshape(bshape)
    dx = (inv_std.reshape(bshape) / count) * (
        count * dxhat
        - dxhat.sum(axis=axes).reshape(bshape)
        - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
    )
    return dx, dgamma, dbeta


def group_norm(x, num_groups, gamma, beta, eps=1e-5):
    """Per-sample group normalization on (N,C,L); returns (out, cache)."""
    check_ncl(x)
    n, c, length = x.shape
    if c % num_groups != 0:
        raise ShapeError(f"num_groups={num_groups} does not divide C={c}")
    xg = x.reshape(n, num_groups, -1)
    mean = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mean) * inv_std).reshape(n, c, length)
    out = gamma[None, :, None] * xhat + beta[None, :, None]
    return out, (xhat, inv_std, gamma, num_groups)


def group_norm_backward(dy, cache):
    """Adjoint of group_norm: returns (dx, dgamma, dbeta)."""
    xhat, inv_std, gamma, num_groups = cache
    n, c, length = dy.shape
    dgamma = (dy * xhat).sum(axis=(0, 2))
    dbeta = dy.sum(axis=(0, 2))
    dxhat = (dy * gamma[None, :, None]).reshape(n, num_groups, -1)
    xh = xhat.reshape(n, num_groups, -1)
    m = dxhat.shape[2]
    dx = (inv_std / m) * (
        m * dxhat
        - dxhat.sum(axis=2, keepdims=True)
        - xh * (dxhat * xh).sum(axis=2, keepdims=True)
    )
    return dx.reshape(n, c, length), dgamma, dbeta


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def sigmoid_backward(dy, s):
    """dy through sigmoid given the forward output s."""
    return dy * s * (1.0 - s)


def hard_swish(x):
    return x * np.clip(x + 3.0, 0.0, 6.0) / 6.0


def hard_swish_backward(dy, x):
    grad = np.where(x <= -3.0, 0.0, np.where(x >= 3.0, 1.0, (2.0 * x + 3.0) / 6.0))
    return dy * grad


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dy, x):
    return dy * (x > 0.0)


# ---------------------------------------------------------------------------
# gating and spatial concatenation
# ---------------------------------------------------------------------------

def broadcast_mul_hw(x, ah, aw):
    """Y[n,c,i,j] = x[n,c,i,j] * ah[n,c,i] * aw[n,c,j]."""
    check_nchw(x)
    n, c, h, w = x.shape
    if ah.shape != (n, c, h) or aw.shape != (n, c, w):
        raise ShapeError(
            f"gate shapes {ah.shape}/{aw.shape} inconsistent with input {x.shape}"
        )
    return x * ah[:, :, :, None] * aw[:, :, None, :]


def broadcast_mul_hw_backward(dy, x, ah, aw):
    """Adjoint of broadcast_mul_hw: returns (dx, dah, daw)."""
    dx = dy * ah[:, :, :, None] * aw[:, :, None, :]
    dah = (dy * x * aw[:, :, None, :]).sum(axis=3)
    daw = (dy * x * ah[:, :, :, None]).sum(axis=2)
    return dx, dah, daw


def concat_spatial(zh, zw):
    """Concatenate (N,C,H) and (N,C,W) along L into (N,C,H+W)."""
    check_ncl(zh)
    check_ncl(zw)
    if zh.shape[:2] != zw.shape[:2]:
        raise ShapeError(f"batch/channel mismatch: {zh.shape} vs {zw.shape}")
    return np.concatenate([zh, zw], axis=2)


def split_spatial(f, first_len):
    """Inverse of concat_spatial: split (N,C,H+W) at first_len."""
    check_ncl(f)
    if not 0 < first_len < f.shape[2]:
        raise ShapeError(f"split index {first_len} out of range for L={f.shape[2]}")
    return f[:, :, :first_len].copy(), f[:, :, first_len:].copy()


# ---------------------------------------------------------------------------
# 2D kernels for the toy CNN (invented plumbing, same conventions)
# ---------------------------------------------------------------------------

def conv2d_same(x, weight, bias=None):
    """Same-padded 2D cross-correlation on (N,C,H,W); odd square kernel."""
    check_nchw(x)
    c_out, c_in, kh, kw = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel dims must be odd, got {kh}x{kw}")
    if c_in != x.shape[1]:
        raise ShapeError(f"weight expects {c_in} channels, got {x.shape[1]}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (N,C,H,W,kh,kw)
    out = np.einsum("nchwij,ocij->nohw", win, weight, optimize=True)
    if bias is not None:
        out += bias[None, :, None, None]
    return out


def conv2d_same_backward(dy, x, weight, with_bias=False):
    n, c_in, h, w = x.shape
    c_out, _, kh, kw = weight.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    dweight = np.einsum("nohw,nchwij->ocij", dy, win, optimize=True)
    scatter = np.einsum("nohw,ocij->nchwij", dy, weight, optimize=True)
    dxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + h, j:j + w] += scatter[:, :, :, :, i, j]
    dx = dxp[:, :, ph:ph + h, pw:pw + w]
    dbias = dy.sum(axis=(0, 2, 3)) if with_bias else None
    return dx, dweight, dbias


def avg_pool_2x2(x):
    """Non-overlapping 2x2 average pooling; H and W must be even."""
    check_nchw(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"H and W must be even for 2x2 pooling, got {h}x{w}")
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avg_pool_2x2_backward(dy, orig_shape):
    n, c, h, w = orig_shape
    out = np.broadcast_to(
        dy[:, :, :, None, :, None], (n, c, h // 2, 2, w // 2, 2)
    ) / 4.0
    return out.reshape(n, c, h, w)
