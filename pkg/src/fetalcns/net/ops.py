"""Array-level layer primitives with explicit backward passes.

Activations are N×C×H×W. Every forward returns a cache tuple holding exactly
what its backward needs; backwards return input gradients and write parameter
gradients into a dict keyed by parameter name. Convolutions are lowered to
matrix multiplication via im2col.
"""

from __future__ import annotations

import threading

import numpy as np

from .config import BN_EPS


class _ScratchPool(threading.local):
    """Per-thread reusable scratch arrays keyed by (shape, dtype).

    Large fresh allocations page-fault on first touch, which dominates conv
    lowering cost; training repeats identical shapes every step, so buffers
    are recycled. Arrays handed out are owned by the caller until given back.
    """

    def __init__(self):
        self.free: dict[tuple, list] = {}

    def take(self, shape: tuple, dtype) -> np.ndarray:
        key = (shape, np.dtype(dtype))
        stack = self.free.get(key)
        if stack:
            return stack.pop()
        return np.empty(shape, dtype)

    def give(self, arr: np.ndarray | None) -> None:
        if arr is not None:
            self.free.setdefault((arr.shape, arr.dtype), []).append(arr)


_pool = _ScratchPool()


def _phase_grids(xp: np.ndarray, stride: int):
    """Contiguous stride-phase subgrids of a padded (C, N, Hp, Wp) tensor.

    Within a phase every kernel-offset slab is a plain block copy, which is
    what keeps im2col/col2im memory-bandwidth-bound instead of gather-bound.
    """
    if stride == 1:
        return {(0, 0): xp}
    return {
        (di, dj): np.ascontiguousarray(xp[:, :, di::stride, dj::stride])
        for di in range(stride)
        for dj in range(stride)
    }


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int):
    """Patch matrix of shape (kh*kw*C, N*OH*OW) from padded (C,N,Hp,Wp) input."""
    c, n = xp.shape[:2]
    cols = _pool.take((kh * kw * c, n * oh * ow), xp.dtype)
    view = cols.reshape(kh, kw, c, n, oh, ow)
    phases = _phase_grids(xp, stride)
    for i in range(kh):
        for j in range(kw):
            ph = phases[(i % stride, j % stride)] if stride > 1 else phases[(0, 0)]
            qi, qj = i // stride, j // stride
            view[i, j] = ph[:, :, qi : qi + oh, qj : qj + ow]
    return cols


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int, keep_cols: bool = True):
    """Cross-correlation via im2col + GEMM.

    ``keep_cols=False`` recycles the patch matrix immediately (forward-only
    paths); the returned cache then cannot feed conv2d_backward.
    """
    n, c, h, wdt = x.shape
    cout, cin, kh, kw = w.shape
    hp, wp = h + 2 * pad, wdt + 2 * pad
    xp = _pool.take((c, n, hp, wp), x.dtype)
    if pad:
        xp[:, :, :pad, :] = 0
        xp[:, :, pad + h :, :] = 0
        xp[:, :, :, :pad] = 0
        xp[:, :, :, pad + wdt :] = 0
    xp[:, :, pad : pad + h, pad : pad + wdt] = x.transpose(1, 0, 2, 3)
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    cols = _im2col(xp, kh, kw, stride, oh, ow)  # (kh*kw*C, N*OH*OW)
    _pool.give(xp)
    w_mat = w.transpose(2, 3, 1, 0).reshape(kh * kw * cin, cout)
    out = w_mat.T @ cols  # (Cout, N*OH*OW)
    out = np.ascontiguousarray(out.reshape(cout, n, oh, ow).transpose(1, 0, 2, 3))
    if not keep_cols:
        _pool.give(cols)
        cols = None
    cache = (cols, x.shape, w.shape, stride, pad, oh, ow)
    return out, cache


def conv2d_backward(dout: np.ndarray, w: np.ndarray, cache, need_dx: bool = True):
    """Weight and (optionally) input gradients; ``need_dx=False`` skips the
    col2im scatter, which the first layer never needs. Consumes the cached
    patch matrix: the cache must not be reused."""
    cols, x_shape, w_shape, stride, pad, oh, ow = cache
    n, c, h, wdt = x_shape
    cout, cin, kh, kw = w_shape
    dmat = np.ascontiguousarray(dout.transpose(1, 0, 2, 3)).reshape(cout, n * oh * ow)
    dw = (dmat @ cols.T).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
    dw = np.ascontiguousarray(dw)
    _pool.give(cols)
    if not need_dx:
        return None, dw
    w_mat = w.transpose(2, 3, 1, 0).reshape(kh * kw * cin, cout)
    dcols = _pool.take((kh * kw * cin, n * oh * ow), dout.dtype)
    np.matmul(w_mat, dmat, out=dcols)
    hp, wp = h + 2 * pad, wdt + 2 * pad
    dxp = np.zeros((c, n, hp, wp), dtype=dout.dtype)
    view = dcols.reshape(kh, kw, c, n, oh, ow)
    if stride == 1:
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + oh, j : j + ow] += view[i, j]
    else:
        acc = {
            (di, dj): np.zeros(dxp[:, :, di::stride, dj::stride].shape, dtype=dout.dtype)
            for di in range(stride)
            for dj in range(stride)
        }
        for i in range(kh):
            for j in range(kw):
                qi, qj = i // stride, j // stride
                acc[(i % stride, j % stride)][:, :, qi : qi + oh, qj : qj + ow] += view[i, j]
        for (di, dj), a in acc.items():
            dxp[:, :, di::stride, dj::stride] = a
    _pool.give(dcols)
    dx = dxp[:, :, pad : pad + h, pad : pad + wdt] if pad else dxp
    return np.ascontiguousarray(dx.transpose(1, 0, 2, 3)), dw


def batchnorm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    want_batch_stats: bool = False,
    reuse_input: bool = False,
):
    """Per-channel normalization by the running statistics.

    Normalization always uses the stored running mean/variance, so the layer
    is an affine map of its input and gradients carry no batch-statistics
    term. Batch statistics are computed only on request, to feed the
    momentum-based running update between training steps. ``reuse_input``
    writes the output into the input buffer (valid when the caller is done
    with ``x``).
    """
    if want_batch_stats:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        stats = (x.mean(axis=(0, 2, 3)), x.var(axis=(0, 2, 3)), count)
    else:
        stats = None
    inv_std = 1.0 / np.sqrt(running_var + BN_EPS)
    xhat = (x - running_mean[None, :, None, None]) * inv_std[None, :, None, None]
    out_buf = x if reuse_input else None
    out = np.multiply(xhat, gamma[None, :, None, None], out=out_buf)
    out += beta[None, :, None, None]
    cache = (xhat, inv_std, gamma)
    return out, cache, stats


def batchnorm_backward(dout: np.ndarray, cache):
    xhat, inv_std, gamma = cache
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dx = dout * (gamma * inv_std)[None, :, None, None]
    return dx, dgamma, dbeta


def batchnorm_stat_update(
    stats, running_mean: np.ndarray, running_var: np.ndarray, momentum: float
) -> tuple[np.ndarray, np.ndarray]:
    """New running statistics from one batch.

    The running variance tracks the unbiased batch variance, the usual
    convention, while the stored mean tracks the plain batch mean.
    """
    mean, var, count = stats
    unbiased = var * (count / (count - 1)) if count > 1 else var
    new_mean = (1.0 - momentum) * running_mean + momentum * mean
    new_var = (1.0 - momentum) * running_var + momentum * unbiased
    return new_mean, new_var


def relu_forward(x: np.ndarray, inplace: bool = False):
    mask = x > 0.0
    out = np.maximum(x, 0.0, out=x if inplace else None)
    return out, mask


def relu_backward(dout: np.ndarray, mask: np.ndarray):
    return dout * mask


def _pool_slabs(xp: np.ndarray, oh: int, ow: int):
    """Strided (N,C,OH,OW) views of the 9 kernel offsets, row-major order."""
    for i in range(3):
        for j in range(3):
            yield xp[:, :, i : i + 2 * oh : 2, j : j + 2 * ow : 2]


def maxpool3x3s2_forward(x: np.ndarray):
    """3×3 max pooling, stride 2, padding 1. Ties resolve to the first
    window position (row-major), matching where the backward scatters to."""
    n, c, h, w = x.shape
    pad = 1
    fill = np.finfo(x.dtype).min
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=fill)
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - 3) // 2 + 1
    ow = (wp - 3) // 2 + 1
    out = None
    for slab in _pool_slabs(xp, oh, ow):
        out = slab.copy() if out is None else np.maximum(out, slab, out=out)
    cache = (xp, out, pad, x.shape, oh, ow)
    return out, cache


def maxpool3x3s2_backward(dout: np.ndarray, cache):
    xp, out, pad, x_shape, oh, ow = cache
    dxp = np.zeros(xp.shape, dtype=dout.dtype)
    claimed = np.zeros(out.shape, dtype=bool)
    for slab, dslab in zip(_pool_slabs(xp, oh, ow), _pool_slabs(dxp, oh, ow)):
        sel = (slab == out) & ~claimed
        dslab += np.where(sel, dout, 0.0)
        claimed |= sel
    return dxp[:, :, pad : pad + x_shape[2], pad : pad + x_shape[3]]


def global_avgpool_forward(x: np.ndarray):
    n, c, h, w = x.shape
    return x.mean(axis=(2, 3)), (h, w)


def global_avgpool_backward(dout: np.ndarray, cache):
    h, w = cache
    return np.broadcast_to(dout[:, :, None, None], dout.shape + (h, w)).copy() / (h * w)


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    return x @ w.T + b, x


def linear_backward(dout: np.ndarray, w: np.ndarray, cache):
    x = cache
    dw = dout.T @ x
    db = dout.sum(axis=0)
    dx = dout @ w
    return dx, dw, db
