"""Strided 3D convolution and its two adjoints.

The three kernels are the partial derivatives of one trilinear form
    B(x, w, g) = sum g[n,o,p] * w[o,c,k] * x[n,c,stride*p + k - pad]
so each one's vector-Jacobian product is another one of the three. That
closure is what makes the convolution twice differentiable.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import ShapeError, Tensor, _make, as_tensor


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _patches(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    x = np.ascontiguousarray(x)
    n, c, d, h, w = x.shape
    do, ho, wo = ((d - k) // stride + 1, (h - k) // stride + 1, (w - k) // stride + 1)
    s = x.strides
    return as_strided(
        x,
        shape=(n, c, do, ho, wo, k, k, k),
        strides=(s[0], s[1], s[2] * stride, s[3] * stride, s[4] * stride, s[2], s[3], s[4]),
        writeable=False,
    )


def _conv_np(x, w, stride, pad):
    k = w.shape[2]
    p = _patches(x, k, stride, pad)
    out = np.tensordot(p, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    return np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))


def _conv_t_np(g, w, stride, pad, in_spatial):
    n = g.shape[0]
    c, k = w.shape[1], w.shape[2]
    d, h, wd = in_spatial
    do, ho, wo = g.shape[2:]
    cols = np.tensordot(g, w, axes=([1], [0]))  # (n, do, ho, wo, c, k, k, k)
    if stride > 1 and k % stride == 0:
        # Split each kernel offset into (block, phase): 8 block-shifted adds
        # instead of k^3 strided ones.
        q = k // stride
        ext = (do + q - 1, ho + q - 1, wo + q - 1)
        out = np.zeros((n, c, ext[0], stride, ext[1], stride, ext[2], stride))
        cols = cols.reshape(n, do, ho, wo, c, q, stride, q, stride, q, stride)
        for a in range(q):
            for b in range(q):
                for e in range(q):
                    out[:, :, a:a + do, :, b:b + ho, :, e:e + wo, :] += \
                        cols[:, :, :, :, :, a, :, b, :, e, :].transpose(0, 4, 1, 5, 2, 6, 3, 7)
        out = out.reshape(n, c, ext[0] * stride, ext[1] * stride, ext[2] * stride)
    else:
        out = np.zeros((n, c, stride * (do - 1) + k, stride * (ho - 1) + k, stride * (wo - 1) + k))
        for a in range(k):
            for b in range(k):
                for e in range(k):
                    out[:, :, a:a + stride * do:stride, b:b + stride * ho:stride, e:e + stride * wo:stride] += \
                        cols[..., a, b, e].transpose(0, 4, 1, 2, 3)
    # rows past the padded input extent only arise when the forward conv
    # dropped trailing input; they receive nothing, so crop or zero-extend
    full = (d + 2 * pad, h + 2 * pad, wd + 2 * pad)
    if out.shape[2:] != full:
        fixed = np.zeros((n, c) + full)
        sl = tuple(slice(0, min(a, b)) for a, b in zip(out.shape[2:], full))
        fixed[(slice(None), slice(None)) + sl] = out[(slice(None), slice(None)) + sl]
        out = fixed
    if pad:
        out = out[:, :, pad:pad + d, pad:pad + h, pad:pad + wd]
    return np.ascontiguousarray(out)


def _wgrad_np(x, g, k, stride, pad):
    p = _patches(x, k, stride, pad)
    out = np.tensordot(p, g, axes=([0, 2, 3, 4], [0, 2, 3, 4]))  # (c, k, k, k, o)
    return np.ascontiguousarray(out.transpose(4, 0, 1, 2, 3))


def conv3d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """x: (N, C, D, H, W); w: (O, C, k, k, k) -> (N, O, D', H', W')."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 5 or w.ndim != 5 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv3d: input {x.shape} incompatible with kernel {w.shape}")
    k = w.shape[2]
    if any(_out_size(n, k, stride, pad) < 1 for n in x.shape[2:]):
        raise ShapeError(f"conv3d: input {x.shape} too small for kernel {k} stride {stride} pad {pad}")
    spatial = x.shape[2:]

    def vjp(g):
        return (conv3d_transpose(g, w, stride, pad, spatial) if x.requires_grad else None,
                conv3d_weight_grad(x, g, k, stride, pad) if w.requires_grad else None)

    return _make("conv3d", _conv_np(x.data, w.data, stride, pad), (x, w), vjp)


def conv3d_transpose(g, w, stride: int, pad: int, in_spatial) -> Tensor:
    """Adjoint of conv3d wrt its input."""
    g, w = as_tensor(g), as_tensor(w)
    in_spatial = tuple(in_spatial)
    k = w.shape[2]

    def vjp(v):
        return (conv3d(v, w, stride, pad) if g.requires_grad else None,
                conv3d_weight_grad(v, g, k, stride, pad) if w.requires_grad else None)

    return _make("conv3d_transpose", _conv_t_np(g.data, w.data, stride, pad, in_spatial), (g, w), vjp)


def conv3d_weight_grad(x, g, k: int, stride: int, pad: int) -> Tensor:
    """Adjoint of conv3d wrt its kernel, summed over the batch."""
    x, g = as_tensor(x), as_tensor(g)
    spatial = x.shape[2:]

    def vjp(v):
        return (conv3d_transpose(g, v, stride, pad, spatial) if x.requires_grad else None,
                conv3d(x, v, stride, pad) if g.requires_grad else None)

    return _make("conv3d_weight_grad", _wgrad_np(x.data, g.data, k, stride, pad), (x, g), vjp)
