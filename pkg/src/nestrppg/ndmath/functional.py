"""Fused neural-network ops (NCHW layout) with hand-written backward rules."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .tensor import Tensor, _make, as_tensor


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return v, v
    a, b = v
    return int(a), int(b)


def _windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, H, W) -> (N, Ho, Wo, C, kh, kw) patches, copied contiguous."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))


def _scatter(cols: np.ndarray, out_hw: tuple[int, int], sh: int, sw: int) -> np.ndarray:
    """Adjoint of ``_windows``: (N, Ho, Wo, C, kh, kw) -> (N, C, H, W)."""
    n, ho, wo, c, kh, kw = cols.shape
    out = np.zeros((n, c) + out_hw)
    cols = cols.transpose(0, 3, 4, 5, 1, 2)  # N, C, kh, kw, Ho, Wo
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += cols[:, :, i, j]
    return out


def _pad(a: np.ndarray, top: int, bottom: int, left: int, right: int) -> np.ndarray:
    """Zero padding of the two trailing axes (cheaper than np.pad for this fixed case)."""
    if not (top or bottom or left or right):
        return a
    n, c, h, w = a.shape
    out = np.zeros((n, c, h + top + bottom, w + left + right))
    out[:, :, top:top + h, left:left + w] = a
    return out


def _live_taps(size: int, pad: int, k: int, stride: int, out: int) -> tuple[int, int]:
    """Range of kernel taps along one axis that ever land on real (unpadded) input."""
    hits = [i for i in range(k) if any(0 <= i - pad + stride * o < size for o in range(out))]
    return hits[0], hits[-1] + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of ``x`` (N, C, H, W) with ``weight`` (O, C, kh, kw).

    Kernel taps that only ever see zero padding are dropped before the
    patch matrix is built; their weight gradient is exactly zero.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    n, c, h, w = x.shape
    o, c2, kh_full, kw_full = weight.shape
    if c != c2:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {c2}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    ho = (h + 2 * ph - kh_full) // sh + 1
    wo = (w + 2 * pw - kw_full) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {h}x{w} too small for kernel {kh_full}x{kw_full}")
    i0, i1 = _live_taps(h, ph, kh_full, sh, ho)
    j0, j1 = _live_taps(w, pw, kw_full, sw, wo)
    kh, kw = i1 - i0, j1 - j0
    # padding still needed once the dead taps are gone
    pt, pb = max(ph - i0, 0), max((ho - 1) * sh + i1 - ph - h, 0)
    pl, pr = max(pw - j0, 0), max((wo - 1) * sw + j1 - pw - w, 0)
    xp = _pad(x.data, pt, pb, pl, pr)
    r0, c0 = i0 - ph + pt, j0 - pw + pl
    cols = _windows(xp[:, :, r0:, c0:], kh, kw, sh, sw, ho, wo).reshape(n * ho * wo, c * kh * kw)
    wlive = weight.data[:, :, i0:i1, j0:j1]
    wmat = wlive.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros(xp.shape)
            gxp[:, :, r0:, c0:] = _scatter(gcols, (xp.shape[2] - r0, xp.shape[3] - c0), sh, sw)
            gx = gxp[:, :, pt : pt + h, pl : pl + w]
        if weight.requires_grad:
            glive = (g2.T @ cols).reshape(wlive.shape)
            if (kh, kw) == (kh_full, kw_full):
                gw = glive
            else:
                gw = np.zeros(weight.shape)
                gw[:, :, i0:i1, j0:j1] = glive
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(np.ascontiguousarray(out), parents, backward, "conv2d")


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Transposed convolution; ``weight`` is (C_in, C_out, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    n, c, h, w = x.shape
    c2, o, kh, kw = weight.shape
    if c != c2:
        raise ShapeError(f"conv_transpose2d: input has {c} channels, weight expects {c2}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    hf, wf = (h - 1) * sh + kh, (w - 1) * sw + kw
    ho, wo = hf - 2 * ph, wf - 2 * pw
    if ho < 1 or wo < 1:
        raise ShapeError("conv_transpose2d: padding removes the whole output")
    x2 = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    wmat = weight.data.reshape(c, -1)
    cols = (x2 @ wmat).reshape(n, h, w, o, kh, kw)
    out = _scatter(cols, (hf, wf), sh, sw)[:, :, ph : ph + ho, pw : pw + wo]
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        gp = _pad(g, ph, ph, pw, pw)
        gcols = _windows(gp, kh, kw, sh, sw, h, w).reshape(n * h * w, o * kh * kw)
        gx = gw = gb = None
        if x.requires_grad:
            gx = (gcols @ wmat.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        if weight.requires_grad:
            gw = (x2.T @ gcols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(np.ascontiguousarray(out), parents, backward, "conv_transpose2d")


def _channel_sum(a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Sum over every axis but 1 (of ``a`` or of ``a * b``)."""
    idx = "abcdefgh"[: a.ndim]
    if b is None:
        return np.einsum(f"{idx}->{idx[1]}", a)
    return np.einsum(f"{idx},{idx}->{idx[1]}", a, b)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5, relu: bool = False) -> Tensor:
    """Per-channel batch normalization over every axis but 1, optionally followed by ReLU.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, as is customary).  The backward
    pass is written as ``A * g + B * (x - mean) + C`` with per-channel
    coefficients, which keeps the number of full-size passes low.
    """
    x = as_tensor(x)
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    col = lambda v: v.reshape(bshape)
    gd = gamma.data
    if training:
        m = x.data.size // x.shape[1]
        mu = _channel_sum(x.data) / m
        xc = x.data - col(mu)
        var = _channel_sum(xc, xc) / m
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        m = None
        mu, var = running_mean.copy(), running_var.copy()
        xc = x.data - col(mu)
    invstd = 1.0 / np.sqrt(var + eps)
    out = xc * col(gd * invstd) + col(beta.data)
    if relu:
        np.maximum(out, 0.0, out=out)

    def backward(g):
        if relu:
            g = np.where(out > 0, g, 0.0)
        gbeta = _channel_sum(g)
        gxc = _channel_sum(g, xc)
        ggamma = gxc * invstd
        gx = None
        if x.requires_grad:
            a = gd * invstd
            if training:
                # d/dx of gamma * (x - mean) * invstd with batch statistics
                gx = col(a) * g - col(a * invstd * ggamma / m) * xc - col(a * gbeta / m)
            else:
                gx = col(a) * g
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), backward, "batch_norm_relu" if relu else "batch_norm")


def avg_pool2d(x: Tensor, kernel) -> Tensor:
    """Non-overlapping average pooling; trailing rows/cols that do not fill a window are dropped."""
    kh, kw = _pair(kernel)
    n, c, h, w = x.shape
    ho, wo = h // kh, w // kw
    if ho < 1 or wo < 1:
        raise ShapeError(f"avg_pool2d: {h}x{w} smaller than kernel {kh}x{kw}")
    if (kh, kw) == (1, 1):
        return x
    xs = x if (ho * kh, wo * kw) == (h, w) else x[:, :, : ho * kh, : wo * kw]
    return xs.reshape(n, c, ho, kh, wo, kw).mean(axis=(3, 5))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = x @ weight.T
    return out if bias is None else out + bias


def upsample_linear1d(x: Tensor, length: int) -> Tensor:
    """Resample the last axis to ``length`` by linear interpolation (fixed matrix)."""
    n_in = x.shape[-1]
    if n_in == length:
        return x
    pos = (np.arange(length) + 0.5) * n_in / length - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    mat = np.zeros((n_in, length))
    mat[lo, np.arange(length)] += 1 - frac
    mat[hi, np.arange(length)] += frac
    return x @ mat
