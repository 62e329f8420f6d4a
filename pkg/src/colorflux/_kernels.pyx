# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels: per-image im2col in C plus BLAS dgemm.

Stride 1, zero "same" padding, odd square kernels, NCHW float64 layout.
Same contract as ``_kernels_py``; results agree to rounding.
"""
import numpy as np
cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

BACKEND = "cython"


cdef void _im2col(const double* x, double* cols, int cin, int H, int W, int k) noexcept nogil:
    # cols is (cin*k*k, H*W), row-major
    cdef int p = k // 2, hw = H * W
    cdef int ci, i, j, h, w, hh, ww
    cdef double* row
    cdef const double* xc
    for ci in range(cin):
        xc = x + ci * hw
        for i in range(k):
            for j in range(k):
                row = cols + ((ci * k + i) * k + j) * hw
                for h in range(H):
                    hh = h + i - p
                    if hh < 0 or hh >= H:
                        for w in range(W):
                            row[h * W + w] = 0.0
                        continue
                    for w in range(W):
                        ww = w + j - p
                        row[h * W + w] = xc[hh * W + ww] if 0 <= ww < W else 0.0


cdef void _col2im(const double* cols, double* x, int cin, int H, int W, int k) noexcept nogil:
    cdef int p = k // 2, hw = H * W
    cdef int ci, i, j, h, w, hh, ww
    cdef const double* row
    cdef double* xc
    for ci in range(cin):
        xc = x + ci * hw
        for i in range(k):
            for j in range(k):
                row = cols + ((ci * k + i) * k + j) * hw
                for h in range(H):
                    hh = h + i - p
                    if hh < 0 or hh >= H:
                        continue
                    for w in range(W):
                        ww = w + j - p
                        if 0 <= ww < W:
                            xc[hh * W + ww] += row[h * W + w]


cdef inline void _gemm_rm(char* ta, char* tb, int m, int n, int kk, double alpha,
                          const double* a, int lda, const double* b, int ldb,
                          double beta, double* c, int ldc) noexcept nogil:
    # row-major C(m,n) = alpha * op(A) @ op(B) + beta * C, via column-major C^T = op(B)^T op(A)^T
    dgemm(tb, ta, &n, &m, &kk, &alpha, <double*>b, &ldb, <double*>a, &lda, &beta, c, &ldc)


def conv2d_forward(x, w, b):
    cdef cnp.ndarray[double, ndim=4, mode="c"] xa = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=4, mode="c"] wa = np.ascontiguousarray(w, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1, mode="c"] ba = np.ascontiguousarray(b, dtype=np.float64)
    cdef int B = xa.shape[0], cin = xa.shape[1], H = xa.shape[2], W = xa.shape[3]
    cdef int cout = wa.shape[0], k = wa.shape[2]
    if wa.shape[1] != cin or wa.shape[3] != k or k % 2 == 0 or ba.shape[0] != cout:
        raise ValueError("conv2d_forward: inconsistent shapes")
    cdef int hw = H * W, ckk = cin * k * k
    cdef cnp.ndarray[double, ndim=4, mode="c"] ya = np.empty((B, cout, H, W), dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2, mode="c"] cols = np.empty((ckk, hw), dtype=np.float64)
    cdef int n, co, t
    cdef double* yp
    cdef char* nt = b"N"
    with nogil:
        for n in range(B):
            _im2col(&xa[n, 0, 0, 0], &cols[0, 0], cin, H, W, k)
            yp = &ya[n, 0, 0, 0]
            for co in range(cout):
                for t in range(hw):
                    yp[co * hw + t] = ba[co]
            # y(cout, hw) += W(cout, ckk) @ cols(ckk, hw)
            _gemm_rm(nt, nt, cout, hw, ckk, 1.0, &wa[0, 0, 0, 0], ckk, &cols[0, 0], hw, 1.0, yp, hw)
    return ya


def conv2d_backward(x, w, dy):
    """Return ``(dx, dw, db)``."""
    cdef cnp.ndarray[double, ndim=4, mode="c"] xa = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=4, mode="c"] wa = np.ascontiguousarray(w, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=4, mode="c"] ga = np.ascontiguousarray(dy, dtype=np.float64)
    cdef int B = xa.shape[0], cin = xa.shape[1], H = xa.shape[2], W = xa.shape[3]
    cdef int cout = wa.shape[0], k = wa.shape[2]
    if wa.shape[1] != cin or ga.shape[1] != cout or ga.shape[0] != B:
        raise ValueError("conv2d_backward: inconsistent shapes")
    cdef int hw = H * W, ckk = cin * k * k
    cdef cnp.ndarray[double, ndim=4, mode="c"] dx = np.zeros((B, cin, H, W), dtype=np.float64)
    cdef cnp.ndarray[double, ndim=4, mode="c"] dw = np.zeros((cout, cin, k, k), dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1, mode="c"] db = np.zeros(cout, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2, mode="c"] cols = np.empty((ckk, hw), dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2, mode="c"] dcols = np.empty((ckk, hw), dtype=np.float64)
    cdef int n, co, t
    cdef double acc
    cdef const double* gp
    cdef char* nt = b"N"
    cdef char* tt = b"T"
    with nogil:
        for n in range(B):
            gp = &ga[n, 0, 0, 0]
            for co in range(cout):
                acc = 0.0
                for t in range(hw):
                    acc += gp[co * hw + t]
                db[co] += acc
            _im2col(&xa[n, 0, 0, 0], &cols[0, 0], cin, H, W, k)
            # dW(cout, ckk) += dy(cout, hw) @ cols(ckk, hw)^T
            _gemm_rm(nt, tt, cout, ckk, hw, 1.0, gp, hw, &cols[0, 0], hw, 1.0, &dw[0, 0, 0, 0], ckk)
            # dcols(ckk, hw) = W(cout, ckk)^T @ dy(cout, hw)
            _gemm_rm(tt, nt, ckk, hw, cout, 1.0, &wa[0, 0, 0, 0], ckk, gp, hw, 0.0, &dcols[0, 0], hw)
            _col2im(&dcols[0, 0], &dx[n, 0, 0, 0], cin, H, W, k)
    return dx, dw, db
