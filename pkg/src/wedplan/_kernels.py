"""Fused layer-norm + ReLU kernels.

The numpy versions are the reference; when numba is importable the jitted
loops are used instead (same arithmetic, one pass per row instead of a dozen
temporary arrays).
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover
    njit = None


def ln_relu_forward_numpy(a, g, s, eps):
    w = a.shape[1]
    xhat = a - a.mean(axis=1, keepdims=True)
    var = np.einsum("ij,ij->i", xhat, xhat) / w
    inv = 1.0 / np.sqrt(var + eps)
    xhat *= inv[:, None]
    y = xhat * g
    y += s
    return xhat, inv, y, np.maximum(y, 0.0)


def ln_relu_backward_numpy(d, g, xhat, inv, y, need_params=True):
    """Returns (d_pre_norm, d_gain, d_shift) for upstream d w.r.t. the ReLU output."""
    dy = np.where(y > 0, d, 0.0)
    dg = np.einsum("ij,ij->j", dy, xhat) if need_params else None
    ds = dy.sum(axis=0) if need_params else None
    dxhat = dy * g
    w = dxhat.shape[1]
    c1 = dxhat.sum(axis=1, keepdims=True) / w
    c2 = np.einsum("ij,ij->i", dxhat, xhat)[:, None] / w
    dxhat -= c1
    dxhat -= xhat * c2
    dxhat *= inv[:, None]
    return dxhat, dg, ds


if njit is not None:

    @njit(cache=True)
    def _fwd(a, g, s, eps, xhat, inv, y, h):
        n, w = a.shape
        for i in range(n):
            mu = 0.0
            for j in range(w):
                mu += a[i, j]
            mu /= w
            var = 0.0
            for j in range(w):
                c = a[i, j] - mu
                xhat[i, j] = c
                var += c * c
            r = 1.0 / np.sqrt(var / w + eps)
            inv[i] = r
            for j in range(w):
                xh = xhat[i, j] * r
                xhat[i, j] = xh
                v = g[j] * xh + s[j]
                y[i, j] = v
                h[i, j] = v if v > 0.0 else 0.0

    @njit(cache=True)
    def _bwd(d, g, xhat, inv, y, out, dg, ds, need_params):
        n, w = d.shape
        for i in range(n):
            c1 = 0.0
            c2 = 0.0
            for j in range(w):
                dy = d[i, j] if y[i, j] > 0.0 else 0.0
                if need_params:
                    dg[j] += dy * xhat[i, j]
                    ds[j] += dy
                v = dy * g[j]
                out[i, j] = v
                c1 += v
                c2 += v * xhat[i, j]
            c1 /= w
            c2 /= w
            for j in range(w):
                out[i, j] = inv[i] * (out[i, j] - c1 - xhat[i, j] * c2)

    def ln_relu_forward_numba(a, g, s, eps):
        a = np.ascontiguousarray(a)
        xhat = np.empty_like(a)
        inv = np.empty(a.shape[0])
        y = np.empty_like(a)
        h = np.empty_like(a)
        _fwd(a, g, s, eps, xhat, inv, y, h)
        return xhat, inv, y, h

    def ln_relu_backward_numba(d, g, xhat, inv, y, need_params=True):
        d = np.ascontiguousarray(d)
        out = np.empty_like(d)
        dg = np.zeros(d.shape[1])
        ds = np.zeros(d.shape[1])
        _bwd(d, g, xhat, inv, y, out, dg, ds, need_params)
        return out, (dg if need_params else None), (ds if need_params else None)


USE_NUMBA = njit is not None and os.environ.get("WEDPLAN_NO_NUMBA", "") == ""

if USE_NUMBA:
    ln_relu_forward = ln_relu_forward_numba
    ln_relu_backward = ln_relu_backward_numba
else:
    ln_relu_forward = ln_relu_forward_numpy
    ln_relu_backward = ln_relu_backward_numpy
