# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled fused training kernels (contract of ``_kernels_py``).

Matrix products go through BLAS ``dgemm`` from scipy; activation, slope
and penalty loops are fused C loops over row-major buffers.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, fabs
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

DEF LINEAR = 0
DEF LEAKY = 1
DEF SIGMOID = 2


cdef void _gemm(bint ta, bint tb, double[:, ::1] A, double[:, ::1] B,
                double[:, ::1] C, double alpha, double beta) noexcept nogil:
    # Row-major C = alpha * op(A) @ op(B) + beta * C, via the column-major
    # identity C^T = op(B)^T op(A)^T.
    cdef int m = C.shape[0]
    cdef int n = C.shape[1]
    cdef int k = A.shape[0] if ta else A.shape[1]
    cdef int lda = A.shape[1]
    cdef int ldb = B.shape[1]
    cdef int ldc = n
    cdef char ca = b'T' if tb else b'N'
    cdef char cb = b'T' if ta else b'N'
    if m == 0 or n == 0:
        return
    dgemm(&ca, &cb, &n, &m, &k, &alpha, &B[0, 0], &ldb, &A[0, 0], &lda, &beta, &C[0, 0], &ldc)


cdef void _affine_act(double[:, ::1] a, const double[::1] b, int code, double alpha) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double v, e
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            v = a[i, j] + b[j]
            if code == LEAKY:
                if v < 0:
                    v = alpha * v
            elif code == SIGMOID:
                e = exp(-fabs(v))
                v = 1.0 / (1.0 + e) if v >= 0 else e / (1.0 + e)
            a[i, j] = v


def mlp_forward(weights, biases, codes, double alpha, x):
    """Return the output and the per-layer (input, post-activation) cache."""
    cdef double[:, ::1] h = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, ::1] out
    cache = []
    h_obj = np.asarray(h)
    for w, b, code in zip(weights, biases, codes):
        out_obj = np.empty((h.shape[0], w.shape[1]))
        out = out_obj
        _gemm(False, False, h, np.ascontiguousarray(w), out, 1.0, 0.0)
        _affine_act(out, np.ascontiguousarray(b), code, alpha)
        cache.append((h_obj, out_obj))
        h = out
        h_obj = out_obj
    return h_obj, cache


cdef void _scale_slope(double[:, ::1] d, double[:, ::1] out, int code, double alpha) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double o
    for i in range(d.shape[0]):
        for j in range(d.shape[1]):
            o = out[i, j]
            if code == LEAKY:
                if not o > 0:
                    d[i, j] = d[i, j] * alpha
            elif code == SIGMOID:
                d[i, j] = d[i, j] * o * (1.0 - o)


cdef void _colsum(double[:, ::1] d, Py_ssize_t rows, double[::1] out) noexcept nogil:
    cdef Py_ssize_t i, j
    for j in range(d.shape[1]):
        out[j] = 0.0
    for i in range(rows):
        for j in range(d.shape[1]):
            out[j] += d[i, j]


def _backprop(weights, codes, double alpha, cache, upstream, bint want_params, bint want_input):
    cdef Py_ssize_t n = len(weights), k
    cdef double[:, ::1] d = np.array(upstream, dtype=np.float64, order="C")
    cdef double[:, ::1] h_in, nxt
    dws = [None] * n
    dbs = [None] * n
    for k in range(n - 1, -1, -1):
        h_in_obj, out_obj = cache[k]
        _scale_slope(d, out_obj, codes[k], alpha)
        if want_params:
            h_in = h_in_obj
            dw = np.empty((h_in.shape[1], d.shape[1]))
            _gemm(True, False, h_in, d, dw, 1.0, 0.0)
            db = np.empty(d.shape[1])
            _colsum(d, d.shape[0], db)
            dws[k] = dw
            dbs[k] = db
        if k > 0 or want_input:
            w = np.ascontiguousarray(weights[k])
            nxt_obj = np.empty((d.shape[0], w.shape[0]))
            nxt = nxt_obj
            _gemm(False, True, d, w, nxt, 1.0, 0.0)
            d = nxt
    return dws, dbs, (np.asarray(d) if want_input else None)


def critic_step(weights, biases, codes, double alpha, real, fake, x_tilde, double lam, double eps):
    """WGAN-GP critic loss and parameter gradients; see ``_kernels_py``."""
    cdef Py_ssize_t nf = fake.shape[0], nr = real.shape[0], nt = x_tilde.shape[0]
    cdef Py_ssize_t nl = nf + nr, rows = nl + nt
    cdef Py_ssize_t n = len(weights), k, i, j
    cdef double[:, ::1] d, h_in, dt, gx, bigg, adj, r, w
    cdef double[:, ::1] scores
    cdef double s_f = 0.0, s_r = 0.0, acc, nrm, gap, coef, penalty = 0.0
    cdef int code
    for code in codes:
        if code == SIGMOID:
            raise ValueError("critic kernel supports linear and leaky ReLU layers only")

    x = np.concatenate([fake, real, x_tilde], axis=0)
    scores_obj, cache = mlp_forward(weights, biases, codes, alpha, x)
    scores = scores_obj
    for i in range(nf):
        s_f += scores[i, 0]
    for i in range(nf, nl):
        s_r += scores[i, 0]
    cdef double wdist = s_f / nf - s_r / nr

    up = np.empty((rows, 1))
    up[:nf] = 1.0 / nf
    up[nf:nl] = -1.0 / nr
    up[nl:] = 1.0
    d = up

    wts = [np.ascontiguousarray(wk) for wk in weights]
    dws = [None] * n
    dbs = [None] * n
    deltas = [None] * n
    slopes = [None] * n
    for k in range(n - 1, -1, -1):
        h_in_obj, out_obj = cache[k]
        if codes[k] == LEAKY:
            slopes[k] = np.where(out_obj[nl:] > 0, 1.0, alpha)
        _scale_slope(d, out_obj, codes[k], alpha)
        deltas[k] = np.asarray(d)[nl:]
        h_in = h_in_obj
        dw = np.empty((h_in.shape[1], d.shape[1]))
        _gemm(True, False, h_in[:nl], d[:nl], dw, 1.0, 0.0)
        db = np.empty(d.shape[1])
        _colsum(d, nl, db)
        dws[k] = dw
        dbs[k] = db
        w = wts[k]
        nxt = np.empty((rows if k > 0 else nt, w.shape[0]))
        if k > 0:
            _gemm(False, True, d, w, nxt, 1.0, 0.0)
        else:
            _gemm(False, True, d[nl:], w, nxt, 1.0, 0.0)
        d = nxt

    gx = d
    bigg_obj = np.empty((nt, gx.shape[1]))
    bigg = bigg_obj
    for i in range(nt):
        acc = 0.0
        for j in range(gx.shape[1]):
            acc += gx[i, j] * gx[i, j]
        nrm = sqrt(acc + eps)
        gap = nrm - 1.0
        penalty += gap * gap
        coef = (2.0 * lam / nt) * gap / nrm
        for j in range(gx.shape[1]):
            bigg[i, j] = coef * gx[i, j]
    penalty = lam * penalty / nt

    dt = deltas[0]
    _gemm(True, False, bigg, dt, dws[0], 1.0, 1.0)
    adj_obj = np.empty((nt, wts[0].shape[1]))
    _gemm(False, False, bigg, wts[0], adj_obj, 1.0, 0.0)
    adj = adj_obj
    for k in range(n - 1):
        if slopes[k] is not None:
            adj_obj = adj_obj * slopes[k]
            adj = adj_obj
        dt = deltas[k + 1]
        _gemm(True, False, adj, dt, dws[k + 1], 1.0, 1.0)
        if k + 1 < n - 1:
            w = wts[k + 1]
            nxt = np.empty((nt, w.shape[1]))
            _gemm(False, False, adj, w, nxt, 1.0, 0.0)
            adj_obj = nxt
            adj = adj_obj

    return wdist + penalty, wdist, penalty, dws, dbs


def generator_step(g_weights, g_biases, g_codes, d_weights, d_biases, d_codes, double alpha, z):
    """Generator loss ``-mean D(G(z))`` and generator-parameter gradients."""
    fake, g_cache = mlp_forward(g_weights, g_biases, g_codes, alpha, z)
    scores, d_cache = mlp_forward(d_weights, d_biases, d_codes, alpha, fake)
    b = z.shape[0]
    upstream = np.full((b, 1), -1.0 / b)
    _, _, dx = _backprop(d_weights, d_codes, alpha, d_cache, upstream, False, True)
    dws, dbs, _ = _backprop(g_weights, g_codes, alpha, g_cache, dx, True, False)
    return float(-np.asarray(scores).mean()), dws, dbs


cdef void _adam_1d(double[::1] p, const double[::1] g, double[::1] m, double[::1] v,
                   double lr, double b1, double b2, double c1, double c2, double eps) noexcept nogil:
    cdef Py_ssize_t i
    cdef double gi
    for i in range(p.shape[0]):
        gi = g[i]
        m[i] = b1 * m[i] + (1.0 - b1) * gi
        v[i] = b2 * v[i] + (1.0 - b2) * (gi * gi)
        p[i] = p[i] - lr * (m[i] / c1) / (sqrt(v[i] / c2) + eps)


def adam_update(params, grads, m, v, int step, double lr, double beta1, double beta2, double eps):
    """In-place Adam update of ``params``, ``m`` and ``v`` for step number ``step``."""
    cdef double c1 = 1.0 - beta1 ** step
    cdef double c2 = 1.0 - beta2 ** step
    for p, g, mk, vk in zip(params, grads, m, v):
        _adam_1d(p.reshape(-1), np.ascontiguousarray(g).reshape(-1), mk.reshape(-1), vk.reshape(-1),
                 lr, beta1, beta2, c1, c2, eps)


def sgd_update(params, grads, double lr):
    cdef double[::1] pv
    cdef const double[::1] gv
    cdef Py_ssize_t i
    for p, g in zip(params, grads):
        pv = p.reshape(-1)
        gv = np.ascontiguousarray(g).reshape(-1)
        for i in range(pv.shape[0]):
            pv[i] = pv[i] - lr * gv[i]
