# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled MLP regression kernels.

Same contract as ``metagrad.kernels._numpy``. Matrix products go straight to
BLAS dgemm through scipy's Cython bindings; elementwise work is plain C loops.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport tanh as c_tanh
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

cdef enum:
    RELU = 0
    TANH = 1


cdef inline void _mm(bint ta, bint tb, int m, int n, int k,
                     double* A, double* B, double beta, double* C) noexcept nogil:
    # row-major C[m,n] = op(A)[m,k] @ op(B)[k,n] + beta * C
    cdef char ca = b'T' if ta else b'N'
    cdef char cb = b'T' if tb else b'N'
    cdef int lda = m if ta else k
    cdef int ldb = k if tb else n
    cdef int ldc = n
    cdef double one = 1.0
    if m == 0 or n == 0:
        return
    dgemm(&cb, &ca, &n, &m, &k, &one, B, &ldb, A, &lda, &beta, C, &ldc)


cdef inline void _colsum(const double* a, int rows, int cols, double* out) noexcept nogil:
    cdef int i, j
    for j in range(cols):
        out[j] = 0.0
    for i in range(rows):
        for j in range(cols):
            out[j] += a[i * cols + j]


cdef class _Net:
    cdef int L, n, maxw, nparams
    cdef int[:] sizes, woff, boff, hoff
    cdef double[::1] Z, H

    def __init__(self, long[::1] sizes, int nparams, int n):
        cdef int l, off = 0, hsum = 0
        self.L = sizes.shape[0] - 1
        self.n = n
        self.sizes = np.asarray(sizes, dtype=np.intc)
        self.woff = np.empty(self.L, dtype=np.intc)
        self.boff = np.empty(self.L, dtype=np.intc)
        self.hoff = np.empty(self.L, dtype=np.intc)
        self.maxw = 0
        for l in range(self.L + 1):
            if sizes[l] > self.maxw:
                self.maxw = sizes[l]
        for l in range(self.L):
            self.woff[l] = off
            off += sizes[l] * sizes[l + 1]
            self.boff[l] = off
            off += sizes[l + 1]
            self.hoff[l] = hsum
            hsum += n * sizes[l + 1]
        if off != nparams:
            raise ValueError(f"parameter vector has {nparams} entries, layer sizes need {off}")
        self.nparams = nparams
        self.Z = np.empty(hsum)
        self.H = np.empty(hsum)

    cdef double* inp(self, double* x, int l) noexcept nogil:
        if l == 0:
            return x
        return &self.H[self.hoff[l - 1]]

    cdef void forward(self, double* theta, double* x, int act) noexcept nogil:
        cdef int l, i, j, din, dout
        cdef double* z
        cdef double* h
        cdef double* b
        for l in range(self.L):
            din = self.sizes[l]
            dout = self.sizes[l + 1]
            z = &self.Z[self.hoff[l]]
            h = &self.H[self.hoff[l]]
            b = theta + self.boff[l]
            for i in range(self.n):
                for j in range(dout):
                    z[i * dout + j] = b[j]
            _mm(False, False, self.n, dout, din, self.inp(x, l), theta + self.woff[l], 1.0, z)
            if l < self.L - 1:
                if act == RELU:
                    for i in range(self.n * dout):
                        h[i] = z[i] if z[i] > 0.0 else 0.0
                else:
                    for i in range(self.n * dout):
                        h[i] = c_tanh(z[i])
            else:
                for i in range(self.n * dout):
                    h[i] = z[i]

    cdef double residual(self, double* y, double* dz) noexcept nogil:
        # dz <- 2/n (out - y); returns mean squared error
        cdef int i, dout = self.sizes[self.L]
        cdef double* out = &self.H[self.hoff[self.L - 1]]
        cdef double r, total = 0.0
        for i in range(self.n * dout):
            r = out[i] - y[i]
            total += r * r
            dz[i] = 2.0 * r / self.n
        return total / self.n


cdef inline double _dact(int act, double z, double h) noexcept nogil:
    if act == RELU:
        return 1.0 if z > 0.0 else 0.0
    return 1.0 - h * h


def _check(theta, x, y):
    if x.shape[0] != y.shape[0]:
        raise ValueError("x and y must have the same number of rows")


def loss(double[::1] theta, long[::1] sizes, int act, double[:, ::1] x, double[:, ::1] y):
    cdef _Net net = _Net(sizes, theta.shape[0], x.shape[0])
    cdef double[::1] dz = np.empty(x.shape[0] * sizes[sizes.shape[0] - 1])
    _check(theta, x, y)
    net.forward(&theta[0], &x[0, 0], act)
    return net.residual(&y[0, 0], &dz[0])


def loss_grad(double[::1] theta, long[::1] sizes, int act, double[:, ::1] x, double[:, ::1] y):
    cdef _Net net = _Net(sizes, theta.shape[0], x.shape[0])
    cdef int n = x.shape[0]
    cdef double[::1] dz = np.empty(n * net.maxw)
    cdef double[::1] dh = np.empty(n * net.maxw)
    out_arr = np.empty(theta.shape[0])
    cdef double[::1] out = out_arr
    cdef double value
    cdef int l, i, j, din, dout
    cdef double* zprev
    cdef double* hprev
    cdef double* xp = &x[0, 0]
    cdef double* tp = &theta[0]
    _check(theta, x, y)
    net.forward(tp, xp, act)
    value = net.residual(&y[0, 0], &dz[0])
    for l in range(net.L - 1, -1, -1):
        din = net.sizes[l]
        dout = net.sizes[l + 1]
        _mm(True, False, din, dout, n, net.inp(xp, l), &dz[0], 0.0, &out[net.woff[l]])
        _colsum(&dz[0], n, dout, &out[net.boff[l]])
        if l > 0:
            _mm(False, True, n, din, dout, &dz[0], tp + net.woff[l], 0.0, &dh[0])
            zprev = &net.Z[net.hoff[l - 1]]
            hprev = &net.H[net.hoff[l - 1]]
            for i in range(n * din):
                dz[i] = dh[i] * _dact(act, zprev[i], hprev[i])
    return value, out_arr


def hvp(double[::1] theta, long[::1] sizes, int act, double[:, ::1] x, double[:, ::1] y, double[::1] v):
    if v.shape[0] != theta.shape[0]:
        raise ValueError("v must have the same length as theta")
    cdef _Net net = _Net(sizes, theta.shape[0], x.shape[0])
    cdef int n = x.shape[0]
    cdef double[::1] RZ = np.empty(net.Z.shape[0])
    cdef double[::1] RH = np.empty(net.Z.shape[0])
    cdef double[::1] dz = np.empty(n * net.maxw)
    cdef double[::1] dh = np.empty(n * net.maxw)
    cdef double[::1] rdz = np.empty(n * net.maxw)
    cdef double[::1] rdh = np.empty(n * net.maxw)
    out_arr = np.empty(theta.shape[0])
    cdef double[::1] out = out_arr
    cdef int l, i, j, din, dout, last = net.L - 1
    cdef double d1, hv
    cdef double* xp = &x[0, 0]
    cdef double* tp = &theta[0]
    cdef double* vp = &v[0]
    cdef double* rz
    cdef double* rh
    cdef double* vb
    cdef double* zprev
    cdef double* hprev
    _check(theta, x, y)
    net.forward(tp, xp, act)
    net.residual(&y[0, 0], &dz[0])

    for l in range(net.L):
        din = net.sizes[l]
        dout = net.sizes[l + 1]
        rz = &RZ[net.hoff[l]]
        rh = &RH[net.hoff[l]]
        vb = vp + net.boff[l]
        for i in range(n):
            for j in range(dout):
                rz[i * dout + j] = vb[j]
        _mm(False, False, n, dout, din, net.inp(xp, l), vp + net.woff[l], 1.0, rz)
        if l > 0:
            _mm(False, False, n, dout, din, &RH[net.hoff[l - 1]], tp + net.woff[l], 1.0, rz)
        if l < last:
            for i in range(n * dout):
                rh[i] = rz[i] * _dact(act, net.Z[net.hoff[l] + i], net.H[net.hoff[l] + i])
        else:
            for i in range(n * dout):
                rh[i] = rz[i]

    dout = net.sizes[net.L]
    for i in range(n * dout):
        rdz[i] = 2.0 * RH[net.hoff[last] + i] / n

    for l in range(last, -1, -1):
        din = net.sizes[l]
        dout = net.sizes[l + 1]
        _mm(True, False, din, dout, n, net.inp(xp, l), &rdz[0], 0.0, &out[net.woff[l]])
        if l > 0:
            _mm(True, False, din, dout, n, &RH[net.hoff[l - 1]], &dz[0], 1.0, &out[net.woff[l]])
        _colsum(&rdz[0], n, dout, &out[net.boff[l]])
        if l > 0:
            _mm(False, True, n, din, dout, &dz[0], tp + net.woff[l], 0.0, &dh[0])
            _mm(False, True, n, din, dout, &rdz[0], tp + net.woff[l], 0.0, &rdh[0])
            _mm(False, True, n, din, dout, &dz[0], vp + net.woff[l], 1.0, &rdh[0])
            zprev = &net.Z[net.hoff[l - 1]]
            hprev = &net.H[net.hoff[l - 1]]
            rz = &RZ[net.hoff[l - 1]]
            for i in range(n * din):
                d1 = _dact(act, zprev[i], hprev[i])
                hv = rdh[i] * d1
                if act == TANH:
                    hv = hv - dh[i] * 2.0 * hprev[i] * d1 * rz[i]
                rdz[i] = hv
                dz[i] = dh[i] * d1
    return out_arr
