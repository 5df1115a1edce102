# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled conv/GRU kernels; same interface and dtype rules as ``_fallback``.

Recurrence loops, im2col and the pooling bookkeeping run in C with BLAS
calls for the small matrix products. The gate nonlinearities still go
through numpy's vectorized ``tanh`` on whole (batch, gate) blocks, which
beats scalar libm calls by a wide margin.
"""

import numpy as np
cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm, sgemm

cnp.import_array()

ctypedef fused real:
    float
    double


cdef inline void mm(bint ta, bint tb, int m, int n, int k, real alpha,
                    real* A, int lda, real* B, int ldb,
                    real beta, real* C, int ldc) noexcept nogil:
    # row-major C (m x n) = alpha * op(A) @ op(B) + beta * C
    cdef char cta = b'T' if ta else b'N'
    cdef char ctb = b'T' if tb else b'N'
    if real is float:
        sgemm(&ctb, &cta, &n, &m, &k, &alpha, B, &ldb, A, &lda, &beta, C, &ldc)
    else:
        dgemm(&ctb, &cta, &n, &m, &k, &alpha, B, &ldb, A, &lda, &beta, C, &ldc)


def _dtype(x):
    return np.float32 if np.asarray(x).dtype == np.float32 else np.float64


def conv_forward(x, W, b):
    dt = _dtype(x)
    xc = np.ascontiguousarray(x, dtype=dt)
    B, T = xc.shape
    C, k = W.shape
    T1 = T - k + 1
    T2 = T1 // 2
    pre = np.empty((B, T1, C), dtype=dt)
    out = np.empty((B, T2, C), dtype=dt)
    pick = np.zeros((B, T2, C), dtype=np.uint8)
    _conv_fwd(xc, np.ascontiguousarray(W, dtype=dt), np.ascontiguousarray(b, dtype=dt),
              np.empty((B * T1, k), dtype=dt), pre, out, pick)
    return out, (xc, pre, pick, k)


def _conv_fwd(real[:, ::1] xv, real[:, ::1] Wv, real[::1] bv, real[:, ::1] cols,
              real[:, :, ::1] pre, real[:, :, ::1] out, unsigned char[:, :, ::1] pick):
    cdef Py_ssize_t B = xv.shape[0], C = Wv.shape[0], k = Wv.shape[1]
    cdef Py_ssize_t T1 = pre.shape[1], T2 = out.shape[1]
    cdef Py_ssize_t i, t, c, j
    cdef real a0, a1
    with nogil:
        for i in range(B):
            for t in range(T1):
                for j in range(k):
                    cols[i * T1 + t, j] = xv[i, t + j]
                for c in range(C):
                    pre[i, t, c] = bv[c]
        mm(False, True, <int>(B * T1), <int>C, <int>k, <real>1.0, &cols[0, 0], <int>k,
           &Wv[0, 0], <int>k, <real>1.0, &pre[0, 0, 0], <int>C)
        for i in range(B):
            for t in range(T2):
                for c in range(C):
                    a0 = pre[i, 2 * t, c]
                    a1 = pre[i, 2 * t + 1, c]
                    if a0 < 0:
                        a0 = 0
                    if a1 < 0:
                        a1 = 0
                    if a1 > a0:
                        out[i, t, c] = a1
                        pick[i, t, c] = 1
                    else:
                        out[i, t, c] = a0


def conv_backward(dout, cache):
    x, pre, pick, k = cache
    C = pre.shape[2]
    dW = np.zeros((C, k), dtype=x.dtype)
    db = np.zeros(C, dtype=x.dtype)
    _conv_bwd(x, pre, pick, np.ascontiguousarray(dout, dtype=x.dtype), dW, db)
    return dW, db


def _conv_bwd(real[:, ::1] xv, real[:, :, ::1] pre, unsigned char[:, :, ::1] pick,
              real[:, :, ::1] dv, real[:, ::1] dW, real[::1] db):
    cdef Py_ssize_t B = dv.shape[0], T2 = dv.shape[1], C = dv.shape[2], k = dW.shape[1]
    cdef Py_ssize_t i, t, c, j, tt
    cdef real g
    with nogil:
        for i in range(B):
            for t in range(T2):
                for c in range(C):
                    g = dv[i, t, c]
                    if g == 0:
                        continue
                    tt = 2 * t + pick[i, t, c]
                    if pre[i, tt, c] <= 0:
                        continue
                    db[c] += g
                    for j in range(k):
                        dW[c, j] += g * xv[i, tt + j]


def gru_forward(x, Wx, Wh, b):
    dt = _dtype(x)
    x = np.ascontiguousarray(x, dtype=dt)
    Wx = np.ascontiguousarray(Wx, dtype=dt)
    Wh = np.ascontiguousarray(Wh, dtype=dt)
    B, L, D = x.shape
    H = Wh.shape[0]
    # time-major input projections so each step reads one contiguous block
    xp = np.ascontiguousarray(x.transpose(1, 0, 2)) @ Wx + np.asarray(b, dtype=dt)
    hs = np.zeros((L + 1, B, H), dtype=dt)
    zs = np.empty((L, B, H), dtype=dt)
    rs = np.empty((L, B, H), dtype=dt)
    ns = np.empty((L, B, H), dtype=dt)
    _gru_fwd(xp, hs, Wh, zs, rs, ns, np.empty((B, 2 * H), dtype=dt),
             np.empty((B, H), dtype=dt), np.empty((B, H), dtype=dt), np.tanh)
    return hs[L].copy(), (x, Wx, Wh, hs, zs, rs, ns)


def _gru_fwd(real[:, :, ::1] xp, real[:, :, ::1] hs, real[:, ::1] Wh,
             real[:, :, ::1] zs, real[:, :, ::1] rs, real[:, :, ::1] ns,
             real[:, ::1] zr, real[:, ::1] rh, real[:, ::1] an, vtanh):
    cdef Py_ssize_t L = xp.shape[0], B = xp.shape[1], H = hs.shape[2], H2 = 2 * H, H3 = 3 * H
    cdef Py_ssize_t t, i, j
    cdef real z, r, n, hp
    zr_arr, an_arr = np.asarray(zr), np.asarray(an)
    # sigmoid(a) = (1 + tanh(a / 2)) / 2, matching the fallback
    for t in range(L):
        with nogil:
            for i in range(B):
                for j in range(H2):
                    zr[i, j] = xp[t, i, j]
            mm(False, False, <int>B, <int>H2, <int>H, <real>1.0, &hs[t, 0, 0], <int>H,
               &Wh[0, 0], <int>H3, <real>1.0, &zr[0, 0], <int>H2)
            for i in range(B):
                for j in range(H2):
                    zr[i, j] = <real>0.5 * zr[i, j]
        vtanh(zr_arr, out=zr_arr)
        with nogil:
            for i in range(B):
                for j in range(H):
                    r = <real>0.5 * (1 + zr[i, H + j])
                    rs[t, i, j] = r
                    zs[t, i, j] = <real>0.5 * (1 + zr[i, j])
                    rh[i, j] = r * hs[t, i, j]
                    an[i, j] = xp[t, i, H2 + j]
            mm(False, False, <int>B, <int>H, <int>H, <real>1.0, &rh[0, 0], <int>H,
               &Wh[0, H2], <int>H3, <real>1.0, &an[0, 0], <int>H)
        vtanh(an_arr, out=an_arr)
        with nogil:
            for i in range(B):
                for j in range(H):
                    z = zs[t, i, j]
                    n = an[i, j]
                    hp = hs[t, i, j]
                    ns[t, i, j] = n
                    hs[t + 1, i, j] = n + (1 - z) * (hp - n)


def gru_backward(dh_in, cache, need_dx=True):
    x, Wx, Wh, hs, zs, rs, ns = cache
    dt = x.dtype
    L, B, H = zs.shape
    D = x.shape[2]
    dxp = np.empty((L, B, 3 * H), dtype=dt)
    dWh = np.zeros((H, 3 * H), dtype=dt)
    dh = np.array(dh_in, dtype=dt, order="C", copy=True)
    _gru_bwd(hs, zs, rs, ns, Wh, dh, dxp, dWh,
             np.empty((B, H), dtype=dt), np.empty((B, H), dtype=dt),
             np.empty((B, H), dtype=dt), np.empty((B, 2 * H), dtype=dt))
    flat = dxp.reshape(L * B, 3 * H)
    dWx = np.ascontiguousarray(x.transpose(1, 0, 2)).reshape(L * B, D).T @ flat
    db = flat.sum(axis=0)
    dx = np.ascontiguousarray((dxp @ Wx.T).transpose(1, 0, 2)) if need_dx else None
    return dx, dWx, dWh, db


def _gru_bwd(real[:, :, ::1] hs, real[:, :, ::1] zs, real[:, :, ::1] rs, real[:, :, ::1] ns,
             real[:, ::1] whv, real[:, ::1] dh, real[:, :, ::1] dxp, real[:, ::1] dWh,
             real[:, ::1] dhn, real[:, ::1] drh, real[:, ::1] rh, real[:, ::1] dzr):
    cdef Py_ssize_t L = zs.shape[0], B = zs.shape[1], H = zs.shape[2], H3 = 3 * H
    cdef Py_ssize_t t, i, j
    cdef real z, r, n, hp, g
    with nogil:
        for t in range(L - 1, -1, -1):
            for i in range(B):
                for j in range(H):
                    g = dh[i, j]
                    z = zs[t, i, j]
                    n = ns[t, i, j]
                    hp = hs[t, i, j]
                    dxp[t, i, 2 * H + j] = g * z * (1 - n * n)
                    dzr[i, j] = g * (n - hp) * z * (1 - z)
                    rh[i, j] = rs[t, i, j] * hp
                    dhn[i, j] = g * (1 - z)
            # dWh[:, 2H:] += rh^T @ dan ; drh = dan @ Wn^T
            mm(True, False, <int>H, <int>H, <int>B, <real>1.0, &rh[0, 0], <int>H,
               &dxp[t, 0, 2 * H], <int>H3, <real>1.0, &dWh[0, 2 * H], <int>H3)
            mm(False, True, <int>B, <int>H, <int>H, <real>1.0, &dxp[t, 0, 2 * H], <int>H3,
               &whv[0, 2 * H], <int>H3, <real>0.0, &drh[0, 0], <int>H)
            for i in range(B):
                for j in range(H):
                    r = rs[t, i, j]
                    hp = hs[t, i, j]
                    dzr[i, H + j] = drh[i, j] * hp * r * (1 - r)
                    dh[i, j] = dhn[i, j] + drh[i, j] * r
                    dxp[t, i, j] = dzr[i, j]
                    dxp[t, i, H + j] = dzr[i, H + j]
            # dWh[:, :2H] += hp^T @ dzr ; dh += dzr @ Wzr^T
            mm(True, False, <int>H, <int>(2 * H), <int>B, <real>1.0, &hs[t, 0, 0], <int>H,
               &dzr[0, 0], <int>(2 * H), <real>1.0, &dWh[0, 0], <int>H3)
            mm(False, True, <int>B, <int>H, <int>(2 * H), <real>1.0, &dzr[0, 0], <int>(2 * H),
               &whv[0, 0], <int>H3, <real>1.0, &dh[0, 0], <int>H)
