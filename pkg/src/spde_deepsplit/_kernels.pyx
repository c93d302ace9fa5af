# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled network kernels.

Same functions and argument conventions as ``_kernels_py``.  Matrix products
go through the BLAS bound by scipy; everything else is plain C loops over
row-major buffers, which removes the per-operation interpreter overhead that
dominates for these small (J=64, width ~60) networks.
"""

import numpy as np
from libc.math cimport sqrt, fabs, pow
from scipy.linalg.cython_blas cimport dgemm

BACKEND = "cython"

_tanh = np.tanh

DEF MAXL = 16


cdef struct Lay:
    int L
    int bn
    int n_stats
    int sizes[MAXL + 1]
    int w_off[MAXL]
    int b_off[MAXL]
    int sc_off[MAXL]
    int sh_off[MAXL]
    int st_off[MAXL]


cdef Lay _unpack(lay) except *:
    cdef Lay c
    cdef int i
    c.L = lay.n_layers
    if c.L > MAXL:
        raise ValueError("too many layers for the compiled kernels")
    c.bn = 1 if lay.batch_norm else 0
    c.n_stats = lay.n_stats
    for i in range(c.L + 1):
        c.sizes[i] = lay.sizes[i]
    for i in range(c.L):
        c.w_off[i] = lay.w_off[i]
        c.b_off[i] = lay.b_off[i]
        c.sc_off[i] = lay.sc_off[i]
        c.sh_off[i] = lay.sh_off[i]
        c.st_off[i] = lay.st_off[i]
    return c


cdef inline void _gemm(bint ta, bint tb, int m, int n, int k, double alpha,
                       const double* A, int lda, const double* B, int ldb,
                       double beta, double* C, int ldc) noexcept nogil:
    # row-major C(m,n) = alpha op(A) op(B) + beta C via column-major dgemm on transposes
    cdef char ca = b'T' if ta else b'N'
    cdef char cb = b'T' if tb else b'N'
    dgemm(&cb, &ca, &n, &m, &k, &alpha, <double*>B, &ldb, <double*>A, &lda,
          &beta, C, &ldc)


cdef inline int _a_total(Lay* c, int J) noexcept nogil:
    cdef int i, tot = 0
    for i in range(c.L):
        tot += J * c.sizes[i]
    return tot


cdef int _max_width(Lay* c) noexcept nogil:
    cdef int i, w = 0
    for i in range(c.L + 1):
        if c.sizes[i] > w:
            w = c.sizes[i]
    return w


cdef void _bn_train(const double* P, int J, int f, const double* scale,
                    const double* shift, double eps, double* xhat, double* inv_std,
                    double* mean, double* var, double* out) noexcept nogil:
    cdef int j, c
    cdef double t, invJ = 1.0 / J
    for c in range(f):
        mean[c] = 0.0
        var[c] = 0.0
    for j in range(J):
        for c in range(f):
            mean[c] += P[j * f + c]
    for c in range(f):
        mean[c] *= invJ
    for j in range(J):
        for c in range(f):
            t = P[j * f + c] - mean[c]
            var[c] += t * t
    for c in range(f):
        var[c] *= invJ
        inv_std[c] = 1.0 / sqrt(var[c] + eps)
    for j in range(J):
        for c in range(f):
            t = (P[j * f + c] - mean[c]) * inv_std[c]
            xhat[j * f + c] = t
            out[j * f + c] = t * scale[c] + shift[c]


cdef int _forward_train(const double* th, Lay* c, const double* X, int J, double eps,
                        double* A, double* xhat, double* inv_std, double* P,
                        double* mean, double* var, double* out, object A_arr) except -1:
    """Fills A (inputs to every affine layer), xhat, inv_std, batch stats and out."""
    cdef int i, j, r, k, l, so
    cdef int a_off = 0, a_next
    cdef int d = c.sizes[0]
    cdef double* dst
    if c.bn:
        _bn_train(X, J, d, th + c.sc_off[0], th + c.sh_off[0], eps, xhat, inv_std,
                  mean, var, A)
    else:
        for j in range(J * d):
            A[j] = X[j]
    for i in range(c.L):
        k = c.sizes[i]
        l = c.sizes[i + 1]
        dst = out if i == c.L - 1 else P
        for j in range(J):
            for r in range(l):
                dst[j * l + r] = th[c.b_off[i] + r]
        _gemm(0, 1, J, l, k, 1.0, A + a_off, k, th + c.w_off[i], k, 1.0, dst, l)
        if i == c.L - 1:
            break
        a_next = a_off + J * k
        if c.bn:
            so = c.st_off[i + 1]
            _bn_train(P, J, l, th + c.sc_off[i + 1], th + c.sh_off[i + 1], eps,
                      xhat + J * so, inv_std + so, mean + so, var + so, A + a_next)
        else:
            for j in range(J * l):
                A[a_next + j] = P[j]
        # numpy's vectorized tanh is several times faster than scalar libm here
        seg = A_arr[a_next:a_next + J * l]
        _tanh(seg, out=seg)
        a_off = a_next
    return 0


cdef void _backward_train(const double* th, Lay* c, int J, const double* A,
                          const double* xhat, const double* inv_std,
                          const double* upstream, double* grad,
                          double* buf1, double* buf2, double* m1, double* m2) noexcept nogil:
    cdef int i, j, r, k, l, so
    cdef int a_off = _a_total(c, J)
    cdef double* dP = buf1
    cdef double* dA = buf2
    cdef double* tmp
    cdef double t, x, invJ = 1.0 / J
    cdef const double* Ai
    cdef const double* xh
    cdef const double* inv
    cdef const double* scale
    for j in range(J):
        dP[j] = upstream[j]
    for i in range(c.L - 1, -1, -1):
        k = c.sizes[i]
        l = c.sizes[i + 1]
        a_off -= J * k
        Ai = A + a_off
        _gemm(1, 0, l, k, J, 1.0, dP, l, Ai, k, 0.0, grad + c.w_off[i], k)
        for r in range(l):
            grad[c.b_off[i] + r] = 0.0
        for j in range(J):
            for r in range(l):
                grad[c.b_off[i] + r] += dP[j * l + r]
        if i == 0 and not c.bn:
            break
        _gemm(0, 0, J, k, l, 1.0, dP, l, th + c.w_off[i], k, 0.0, dA, k)
        if i > 0:
            for j in range(J * k):
                x = Ai[j]
                dA[j] *= 1.0 - x * x
        if c.bn:
            so = c.st_off[i]
            xh = xhat + J * so
            inv = inv_std + so
            scale = th + c.sc_off[i]
            for r in range(k):
                grad[c.sc_off[i] + r] = 0.0
                grad[c.sh_off[i] + r] = 0.0
            for j in range(J):
                for r in range(k):
                    grad[c.sc_off[i] + r] += dA[j * k + r] * xh[j * k + r]
                    grad[c.sh_off[i] + r] += dA[j * k + r]
            if i == 0:
                break
            # grad wrt xhat = dA * scale; mean terms of the BN backward formula
            for r in range(k):
                m1[r] = grad[c.sh_off[i] + r] * scale[r] * invJ
                m2[r] = grad[c.sc_off[i] + r] * scale[r] * invJ
            for j in range(J):
                for r in range(k):
                    t = dA[j * k + r] * scale[r]
                    dA[j * k + r] = inv[r] * (t - m1[r] - xh[j * k + r] * m2[r])
        tmp = dP
        dP = dA
        dA = tmp


def param_grad(double[::1] theta, lay, double[:, ::1] X, double[::1] upstream, double eps):
    cdef Lay c = _unpack(lay)
    cdef int J = X.shape[0]
    cdef int w = _max_width(&c)
    cdef int a_tot = _a_total(&c, J)
    cdef int ns = c.n_stats if c.bn else 0
    A = np.empty(a_tot)
    xhat = np.empty(max(J * ns, 1))
    inv_std = np.empty(max(ns, 1))
    P = np.empty(J * w)
    b1 = np.empty(J * w)
    b2 = np.empty(J * w)
    m1 = np.empty(w)
    m2 = np.empty(w)
    mean = np.zeros(ns)
    var = np.zeros(ns)
    out = np.empty(J)
    grad = np.zeros(theta.shape[0])
    cdef double[::1] vA = A, vx = xhat, vi = inv_std, vP = P, vb1 = b1, vb2 = b2
    cdef double[::1] vm1 = m1, vm2 = m2, vout = out, vg = grad
    cdef double[::1] vmean = mean if ns else np.empty(1)
    cdef double[::1] vvar = var if ns else np.empty(1)
    if upstream.shape[0] != J:
        raise ValueError("upstream weights must have one entry per row")
    _forward_train(&theta[0], &c, &X[0, 0], J, eps, &vA[0], &vx[0], &vi[0], &vP[0],
                   &vmean[0], &vvar[0], &vout[0], A)
    with nogil:
        _backward_train(&theta[0], &c, J, &vA[0], &vx[0], &vi[0], &upstream[0], &vg[0],
                        &vb1[0], &vb2[0], &vm1[0], &vm2[0])
    return out, grad, mean, var


def loss_grad(double[::1] theta, lay, double[:, ::1] X, double[::1] y, double eps):
    cdef Lay c = _unpack(lay)
    cdef int J = X.shape[0]
    cdef int j
    cdef int w = _max_width(&c)
    cdef int a_tot = _a_total(&c, J)
    cdef int ns = c.n_stats if c.bn else 0
    cdef double loss = 0.0, rr
    A = np.empty(a_tot)
    xhat = np.empty(max(J * ns, 1))
    inv_std = np.empty(max(ns, 1))
    P = np.empty(J * w)
    b1 = np.empty(J * w)
    b2 = np.empty(J * w)
    m1 = np.empty(w)
    m2 = np.empty(w)
    mean = np.zeros(ns)
    var = np.zeros(ns)
    out = np.empty(J)
    up = np.empty(J)
    grad = np.zeros(theta.shape[0])
    cdef double[::1] vA = A, vx = xhat, vi = inv_std, vP = P, vb1 = b1, vb2 = b2
    cdef double[::1] vm1 = m1, vm2 = m2, vout = out, vg = grad, vup = up
    cdef double[::1] vmean = mean if ns else np.empty(1)
    cdef double[::1] vvar = var if ns else np.empty(1)
    if y.shape[0] != J:
        raise ValueError("targets must have one entry per row")
    _forward_train(&theta[0], &c, &X[0, 0], J, eps, &vA[0], &vx[0], &vi[0], &vP[0],
                   &vmean[0], &vvar[0], &vout[0], A)
    with nogil:
        for j in range(J):
            rr = vout[j] - y[j]
            loss += rr * rr
            vup[j] = 2.0 * rr / J
        loss /= J
        _backward_train(&theta[0], &c, J, &vA[0], &vx[0], &vi[0], &vup[0], &vg[0],
                        &vb1[0], &vb2[0], &vm1[0], &vm2[0])
    return loss, grad, out, mean, var


cdef void _site_stats(const double* P, int J, int f, double* mean, double* var) noexcept nogil:
    # biased batch mean and variance of each column
    cdef int j, r
    cdef double t
    for r in range(f):
        mean[r] = 0.0
        var[r] = 0.0
    for j in range(J):
        for r in range(f):
            mean[r] += P[j * f + r]
    for r in range(f):
        mean[r] /= J
    for j in range(J):
        for r in range(f):
            t = P[j * f + r] - mean[r]
            var[r] += t * t
    for r in range(f):
        var[r] /= J


def infer(double[::1] theta, lay, double[::1] run_mean, double[::1] run_var,
          double[:, ::1] X, double eps, bint want_grad, bint batch_stats=False):
    cdef Lay c = _unpack(lay)
    cdef int J = X.shape[0]
    cdef int i, j, r, k, l, so
    cdef int w = _max_width(&c)
    cdef int a_tot = _a_total(&c, J)
    cdef int ns = c.n_stats if c.bn else 0
    cdef int a_off = 0, a_next, d = c.sizes[0]
    cdef double x
    A = np.empty(a_tot)
    P = np.empty(J * w)
    mult = np.empty(max(ns, 1))
    out = np.empty(J)
    cdef double[::1] vA = A, vP = P, vm = mult, vout = out
    cdef double* dst
    cdef const double* th = &theta[0]
    if c.bn and (run_mean.shape[0] != ns or run_var.shape[0] != ns):
        raise ValueError("running statistics do not match the layout")
    with nogil:
        if c.bn and batch_stats:
            _site_stats(&X[0, 0], J, d, &run_mean[0], &run_var[0])
        for i in range(c.L if c.bn else 0):
            if batch_stats and i > 0:
                break
            so = c.st_off[i]
            for r in range(c.sizes[i]):
                vm[so + r] = th[c.sc_off[i] + r] / sqrt(run_var[so + r] + eps)
        for j in range(J):
            for r in range(d):
                if c.bn:
                    vA[j * d + r] = (X[j, r] - run_mean[r]) * vm[r] + th[c.sh_off[0] + r]
                else:
                    vA[j * d + r] = X[j, r]
        for i in range(c.L):
            k = c.sizes[i]
            l = c.sizes[i + 1]
            dst = &vout[0] if i == c.L - 1 else &vP[0]
            for j in range(J):
                for r in range(l):
                    dst[j * l + r] = th[c.b_off[i] + r]
            _gemm(0, 1, J, l, k, 1.0, &vA[a_off], k, th + c.w_off[i], k, 1.0, dst, l)
            if i == c.L - 1:
                break
            a_next = a_off + J * k
            so = c.st_off[i + 1]
            if c.bn and batch_stats:
                _site_stats(&vP[0], J, l, &run_mean[so], &run_var[so])
                for r in range(l):
                    vm[so + r] = th[c.sc_off[i + 1] + r] / sqrt(run_var[so + r] + eps)
            for j in range(J):
                for r in range(l):
                    x = vP[j * l + r]
                    if c.bn:
                        x = (x - run_mean[so + r]) * vm[so + r] + th[c.sh_off[i + 1] + r]
                    vA[a_next + j * l + r] = x
            with gil:
                seg = A[a_next:a_next + J * l]
                _tanh(seg, out=seg)
            a_off = a_next
    if not want_grad:
        return out, None
    dX = np.empty((J, d))
    b1 = np.empty(J * w)
    b2 = np.empty(J * w)
    cdef double[::1] vb1 = b1, vb2 = b2
    cdef double[:, ::1] vdX = dX
    cdef double* dA = &vb1[0]
    cdef double* dQ = &vb2[0]
    cdef double* tmp
    with nogil:
        l = c.sizes[c.L - 1]
        for j in range(J):
            for r in range(l):
                dA[j * l + r] = th[c.w_off[c.L - 1] + r]
        a_off = _a_total(&c, J)
        for i in range(c.L - 2, -1, -1):
            k = c.sizes[i]
            l = c.sizes[i + 1]
            a_off -= J * l
            so = c.st_off[i + 1]
            for j in range(J):
                for r in range(l):
                    x = vA[a_off + j * l + r]
                    dQ[j * l + r] = dA[j * l + r] * (1.0 - x * x)
                    if c.bn:
                        dQ[j * l + r] *= vm[so + r]
            _gemm(0, 0, J, k, l, 1.0, dQ, l, th + c.w_off[i], k, 0.0, dA, k)
        for j in range(J):
            for r in range(d):
                vdX[j, r] = dA[j * d + r] * (vm[r] if c.bn else 1.0)
    return out, dX


def adam_update(double[::1] theta, double[::1] m, double[::1] v, double[::1] grad,
                double lr, double beta1, double beta2, double eps, long step):
    cdef Py_ssize_t i, n = theta.shape[0]
    cdef double g, c1 = lr / (1.0 - pow(beta1, step))
    cdef double c2 = 1.0 / (1.0 - pow(beta2, step))
    if m.shape[0] != n or v.shape[0] != n or grad.shape[0] != n:
        raise ValueError("Adam buffers must match the parameter length")
    with nogil:
        for i in range(n):
            g = grad[i]
            m[i] = beta1 * m[i] + (1.0 - beta1) * g
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
            theta[i] -= c1 * m[i] / (sqrt(fabs(v[i]) * c2) + eps)
