"""Convolution and batch normalization primitives on the gradient tape.

conv2d is cross-correlation over NCHW inputs with OIHW weights, lowered to a
single GEMM via an im2col buffer that the backward closure reuses.  Padding
takes an explicit fill value: binarized layers pad with -1 so that the float
path agrees bit-for-bit with the bitpacked xnor kernel, real layers pad with 0.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor


def conv_output_size(extent: int, kernel: int, stride: int, pad: int) -> int:
    return (extent + 2 * pad - kernel) // stride + 1


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int,
                   pad_value: float = 0.0):
    """Plain-numpy forward pass; returns (out, im2col buffer)."""
    n, c, h, wd = x.shape
    o, i, kh, kw = w.shape
    if c != i:
        raise ValueError(f"conv2d: input has {c} channels but weight expects {i}")
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(wd, kw, stride, pad)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: non-positive output extent {ho}x{wo} "
                         f"for input {h}x{wd}, kernel {kh}x{kw}, stride {stride}, pad {pad}")
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)),
                   constant_values=pad_value)
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * ho * wo, c * kh * kw)
    wmat = w.reshape(o, c * kh * kw)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0,
           pad_value: float = 0.0) -> Tensor:
    """Differentiable 2-D cross-correlation, NCHW x OIHW -> NCHW."""
    x = as_tensor(x)
    w = as_tensor(w, like=x)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    out_data, cols = conv2d_forward(x.data, w.data, stride, pad, pad_value)
    ho, wo = out_data.shape[2], out_data.shape[3]

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, o)
        if w.requires_grad:
            w._accum((g2.T @ cols).reshape(w.shape))
        if x.requires_grad:
            wmat = w.data.reshape(o, c * kh * kw)
            gcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            gpad = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
            for dy in range(kh):
                for dx in range(kw):
                    gpad[:, :, dy:dy + ho * stride:stride,
                         dx:dx + wo * stride:stride] += gcols[:, :, :, :, dy, dx]
            if pad > 0:
                gpad = gpad[:, :, pad:pad + h, pad:pad + wd]
            x._accum(gpad)

    return Tensor._node(out_data, (x, w), bw)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               eps: float = 1e-5, momentum: float = 0.1,
               training: bool = True) -> Tensor:
    """Per-channel batch normalization over an NCHW (or NC) tensor.

    Train mode normalizes by the batch statistics and updates the running
    buffers in place (biased variance throughout, for train/infer symmetry);
    infer mode reads the running buffers and never mutates them.
    """
    x = as_tensor(x)
    gamma = as_tensor(gamma, like=x)
    beta = as_tensor(beta, like=x)
    if eps <= 0:
        raise ValueError("batch_norm: eps must be positive")
    if x.data.ndim < 2:
        raise ValueError("batch_norm: expected at least 2-D input")
    channels = x.shape[1]
    if gamma.size != channels or beta.size != channels:
        raise ValueError(f"batch_norm: gamma/beta must have {channels} entries")
    if x.shape[0] == 0:
        raise ValueError("batch_norm: zero batch size")

    axes = (0,) + tuple(range(2, x.data.ndim))
    bshape = (1, channels) + (1,) * (x.data.ndim - 2)
    g_ = gamma.data.reshape(bshape)
    b_ = beta.data.reshape(bshape)

    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu.reshape(-1).astype(running_mean.dtype)
        running_var *= (1.0 - momentum)
        running_var += momentum * var.reshape(-1).astype(running_var.dtype)
    else:
        mu = running_mean.reshape(bshape).astype(x.dtype)
        var = running_var.reshape(bshape).astype(x.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out_data = g_ * xhat + b_

    def bw(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accum(g.sum(axis=axes))
        if x.requires_grad:
            dxhat = g * g_
            if training:
                term = dxhat - dxhat.mean(axis=axes, keepdims=True) \
                    - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
                x._accum(term * inv_std)
            else:
                x._accum(dxhat * inv_std)

    return Tensor._node(out_data, (x, gamma, beta), bw)
