# cython: boundscheck=False, cdivision=True, initializedcheck=False
"""Compiled row kernels: softmax, layer norm and GELU, forward and backward.

Every public function takes arrays of any rank and treats the last axis as
the row. Accumulation is done in double precision for both float types.
"""
import numpy as np
cimport numpy as cnp
cimport cython
from cython cimport floating
from libc.math cimport exp, erf, sqrt

cnp.import_array()

cdef double SQRT_HALF = 0.70710678118654752440
cdef double INV_SQRT_2PI = 0.39894228040143267794


def _rows(a):
    a = np.ascontiguousarray(a)
    n = a.shape[-1] if a.ndim else 1
    return a.reshape(-1, n)


@cython.wraparound(False)
cdef void _softmax_rows(floating[:, ::1] x, floating[:, ::1] y) noexcept nogil:
    cdef Py_ssize_t r, j, n = x.shape[1]
    cdef double m, s, e
    for r in range(x.shape[0]):
        m = x[r, 0]
        for j in range(1, n):
            if x[r, j] > m:
                m = x[r, j]
        s = 0.0
        for j in range(n):
            e = exp(x[r, j] - m)
            y[r, j] = <floating>e
            s += e
        for j in range(n):
            y[r, j] = <floating>(y[r, j] / s)


def softmax_lastdim(x):
    x2 = _rows(x)
    out = np.empty_like(x2)
    if x2.dtype == np.float32:
        _softmax_rows[float](x2, out)
    else:
        _softmax_rows[double](x2, out)
    return out.reshape(np.shape(x))


@cython.wraparound(False)
cdef void _softmax_back_rows(floating[:, ::1] y, floating[:, ::1] gy,
                             floating[:, ::1] gx) noexcept nogil:
    cdef Py_ssize_t r, j, n = y.shape[1]
    cdef double dot
    for r in range(y.shape[0]):
        dot = 0.0
        for j in range(n):
            dot += gy[r, j] * y[r, j]
        for j in range(n):
            gx[r, j] = <floating>(y[r, j] * (gy[r, j] - dot))


def softmax_lastdim_backward(y, gy):
    y2 = _rows(y)
    g2 = _rows(gy).astype(y2.dtype, copy=False)
    out = np.empty_like(y2)
    if y2.dtype == np.float32:
        _softmax_back_rows[float](y2, g2, out)
    else:
        _softmax_back_rows[double](y2, g2, out)
    return out.reshape(np.shape(y))


@cython.wraparound(False)
cdef void _ln_rows(floating[:, ::1] x, floating[::1] gain, floating[::1] bias, double eps,
                   floating[:, ::1] out, floating[:, ::1] xhat,
                   floating[::1] rstd) noexcept nogil:
    cdef Py_ssize_t r, j, n = x.shape[1]
    cdef double mean, var, c, inv
    for r in range(x.shape[0]):
        mean = 0.0
        for j in range(n):
            mean += x[r, j]
        mean /= n
        var = 0.0
        for j in range(n):
            c = x[r, j] - mean
            var += c * c
        var /= n
        inv = 1.0 / sqrt(var + eps)
        rstd[r] = <floating>inv
        for j in range(n):
            c = (x[r, j] - mean) * inv
            xhat[r, j] = <floating>c
            out[r, j] = <floating>(c * gain[j] + bias[j])


def layer_norm(x, gain, bias, double eps):
    x2 = _rows(x)
    dt = x2.dtype
    g = np.ascontiguousarray(gain, dtype=dt)
    b = np.ascontiguousarray(bias, dtype=dt)
    out = np.empty_like(x2)
    xhat = np.empty_like(x2)
    rstd = np.empty(x2.shape[0], dtype=dt)
    if dt == np.float32:
        _ln_rows[float](x2, g, b, eps, out, xhat, rstd)
    else:
        _ln_rows[double](x2, g, b, eps, out, xhat, rstd)
    shape = np.shape(x)
    return out.reshape(shape), xhat.reshape(shape), rstd.reshape(shape[:-1] + (1,))


@cython.wraparound(False)
cdef void _ln_back_rows(floating[:, ::1] gy, floating[:, ::1] xhat, floating[::1] rstd,
                        floating[::1] gain, floating[:, ::1] gx,
                        double[::1] ggain, double[::1] gbias) noexcept nogil:
    cdef Py_ssize_t r, j, n = gy.shape[1]
    cdef double m1, m2, gh
    for r in range(gy.shape[0]):
        m1 = 0.0
        m2 = 0.0
        for j in range(n):
            gh = gy[r, j] * gain[j]
            m1 += gh
            m2 += gh * xhat[r, j]
            ggain[j] += gy[r, j] * xhat[r, j]
            gbias[j] += gy[r, j]
        m1 /= n
        m2 /= n
        for j in range(n):
            gh = gy[r, j] * gain[j]
            gx[r, j] = <floating>(rstd[r] * (gh - m1 - xhat[r, j] * m2))


def layer_norm_backward(gy, xhat, rstd, gain):
    x2 = _rows(xhat)
    dt = x2.dtype
    g2 = _rows(gy).astype(dt, copy=False)
    r1 = np.ascontiguousarray(rstd, dtype=dt).reshape(-1)
    gn = np.ascontiguousarray(gain, dtype=dt)
    gx = np.empty_like(x2)
    ggain = np.zeros(x2.shape[1], dtype=np.float64)
    gbias = np.zeros(x2.shape[1], dtype=np.float64)
    if dt == np.float32:
        _ln_back_rows[float](g2, x2, r1, gn, gx, ggain, gbias)
    else:
        _ln_back_rows[double](g2, x2, r1, gn, gx, ggain, gbias)
    return gx.reshape(np.shape(xhat)), ggain.astype(dt), gbias.astype(dt)


@cython.wraparound(False)
cdef void _gelu_flat(floating[::1] x, floating[::1] y) noexcept nogil:
    cdef Py_ssize_t i
    cdef double v
    for i in range(x.shape[0]):
        v = x[i]
        y[i] = <floating>(0.5 * v * (1.0 + erf(v * SQRT_HALF)))


def gelu(x):
    x1 = np.ascontiguousarray(x).reshape(-1)
    out = np.empty_like(x1)
    if x1.dtype == np.float32:
        _gelu_flat[float](x1, out)
    else:
        _gelu_flat[double](x1, out)
    return out.reshape(np.shape(x))


@cython.wraparound(False)
cdef void _gelu_back_flat(floating[::1] x, floating[::1] gy, floating[::1] gx) noexcept nogil:
    cdef Py_ssize_t i
    cdef double v
    for i in range(x.shape[0]):
        v = x[i]
        gx[i] = <floating>(gy[i] * (0.5 * (1.0 + erf(v * SQRT_HALF))
                                    + v * INV_SQRT_2PI * exp(-0.5 * v * v)))


def gelu_backward(x, gy):
    x1 = np.ascontiguousarray(x).reshape(-1)
    g1 = np.ascontiguousarray(gy, dtype=x1.dtype).reshape(-1)
    out = np.empty_like(x1)
    if x1.dtype == np.float32:
        _gelu_back_flat[float](x1, g1, out)
    else:
        _gelu_back_flat[double](x1, g1, out)
    return out.reshape(np.shape(x))
