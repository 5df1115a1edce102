"""Pure-numpy kernels for the per-joint encoder (conv + GRU).

Every function here has a compiled twin in ``_core.pyx`` with the same
signature and return structure; ``kernels.py`` picks one at import time.
Computation runs in float32 when the input is float32 and in float64
otherwise.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _dtype(x):
    return np.float32 if np.asarray(x).dtype == np.float32 else np.float64


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def conv_forward(x, W, b):
    """Valid 1-D convolution, ReLU, max-pool of width 2.

    x: (B, T); W: (C, k); b: (C,). Returns (out (B, T2, C), cache).
    """
    x = np.ascontiguousarray(x, dtype=_dtype(x))
    W = np.asarray(W, dtype=x.dtype)
    b = np.asarray(b, dtype=x.dtype)
    k = W.shape[1]
    cols = sliding_window_view(x, k, axis=1)            # (B, T1, k)
    pre = cols @ W.T + b                                 # (B, T1, C)
    act = np.maximum(pre, 0.0)
    B, T1, C = act.shape
    T2 = T1 // 2
    pairs = act[:, : 2 * T2].reshape(B, T2, 2, C)
    pick = pairs[:, :, 1] > pairs[:, :, 0]                 # first index wins ties
    out = np.where(pick, pairs[:, :, 1], pairs[:, :, 0])
    return out, (cols, pre, pick, T1)


def conv_backward(dout, cache):
    cols, pre, pick, T1 = cache
    B, T2, C = dout.shape
    dact = np.zeros((B, T1, C), dtype=pre.dtype)
    view = dact[:, : 2 * T2].reshape(B, T2, 2, C)
    view[:, :, 0] = np.where(pick, 0.0, dout)
    view[:, :, 1] = np.where(pick, dout, 0.0)
    dpre = dact * (pre > 0.0)
    dW = np.einsum("btc,btk->ck", dpre, cols)
    db = dpre.sum(axis=(0, 1))
    return dW, db


def gru_forward(x, Wx, Wh, b):
    """Gated recurrent unit over a batch of sequences, zero initial state.

    x: (B, L, D); Wx: (D, 3H); Wh: (H, 3H); b: (3H,), gate blocks ordered
    (update, reset, candidate). Returns (h_L (B, H), cache).
    """
    dt = _dtype(x)
    x = np.asarray(x, dtype=dt)
    Wx, Wh, b = (np.asarray(a, dtype=dt) for a in (Wx, Wh, b))
    B, L, _ = x.shape
    H = Wh.shape[0]
    xp = x @ Wx + b                                       # (B, L, 3H)
    Wzr, Wn = Wh[:, : 2 * H], Wh[:, 2 * H :]
    hs = np.zeros((L + 1, B, H), dtype=dt)
    zs = np.empty((L, B, H), dtype=dt)
    rs = np.empty((L, B, H), dtype=dt)
    ns = np.empty((L, B, H), dtype=dt)
    h = hs[0]
    for t in range(L):
        a = xp[:, t]
        zr = _sigmoid(a[:, : 2 * H] + h @ Wzr)
        z, r = zr[:, :H], zr[:, H:]
        n = np.tanh(a[:, 2 * H :] + (r * h) @ Wn)
        h = n + (1.0 - z) * (h - n)
        hs[t + 1], zs[t], rs[t], ns[t] = h, z, r, n
    return h.copy(), (x, Wx, Wh, hs, zs, rs, ns)


def gru_backward(dh, cache, need_dx=True):
    x, Wx, Wh, hs, zs, rs, ns = cache
    L, B, H = zs.shape
    Wzr, Wn = Wh[:, : 2 * H], Wh[:, 2 * H :]
    dxp = np.empty((B, L, 3 * H), dtype=x.dtype)
    dWh = np.zeros_like(Wh)
    dh = np.array(dh, dtype=x.dtype)
    for t in range(L - 1, -1, -1):
        hp, z, r, n = hs[t], zs[t], rs[t], ns[t]
        dan = dh * z * (1.0 - n * n)
        daz = dh * (n - hp) * z * (1.0 - z)
        rh = r * hp
        dWh[:, 2 * H :] += rh.T @ dan
        drh = dan @ Wn.T
        dar = drh * hp * r * (1.0 - r)
        dzr = np.concatenate([daz, dar], axis=1)
        dWh[:, : 2 * H] += hp.T @ dzr
        dh = dh * (1.0 - z) + drh * r + dzr @ Wzr.T
        dxp[:, t, : 2 * H] = dzr
        dxp[:, t, 2 * H :] = dan
    flat = dxp.reshape(B * L, 3 * H)
    dWx = x.reshape(B * L, -1).T @ flat
    db = flat.sum(axis=0)
    dx = (dxp @ Wx.T) if need_dx else None
    return dx, dWx, dWh, db
