# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels (see ``_pykernels`` for the contract)."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline double _basis(int local, double t, double h, bint deriv) nogil:
    if deriv:
        return (1.0 / h) if local else (-1.0 / h)
    return t if local else 1.0 - t


def q1_cell_matrices(const double[:, :, :, ::1] coef,
                     const double[::1] hx, const double[::1] hz,
                     const double[::1] gp, const double[::1] gw,
                     bint dx_test, bint dz_test, bint dx_trial, bint dz_trial):
    cdef Py_ssize_t ncx = hx.shape[0], ncz = hz.shape[0], nq = gp.shape[0]
    cdef Py_ssize_t i, j, p, q, a, b
    cdef double w, tx, tz, s
    cdef double xt[2], zt[2], xr[2], zr[2]
    out = np.zeros((ncx, ncz, 4, 4))
    cdef double[:, :, :, ::1] o = out
    with nogil:
        for i in range(ncx):
            for j in range(ncz):
                for p in range(nq):
                    tx = gp[p]
                    for a in range(2):
                        xt[a] = _basis(a, tx, hx[i], dx_test)
                        xr[a] = _basis(a, tx, hx[i], dx_trial)
                    for q in range(nq):
                        tz = gp[q]
                        for a in range(2):
                            zt[a] = _basis(a, tz, hz[j], dz_test)
                            zr[a] = _basis(a, tz, hz[j], dz_trial)
                        w = gw[p] * gw[q] * hx[i] * hz[j] * coef[i, j, p, q]
                        for a in range(4):
                            s = w * xt[a >> 1] * zt[a & 1]
                            for b in range(4):
                                o[i, j, a, b] += s * xr[b >> 1] * zr[b & 1]
    return out


def csr_matvec(const cnp.int32_t[::1] indptr, const cnp.int32_t[::1] indices,
               const double[::1] data, const double[::1] x):
    cdef Py_ssize_t n = indptr.shape[0] - 1, r, k
    cdef double acc
    y = np.empty(n)
    cdef double[::1] yv = y
    with nogil:
        for r in range(n):
            acc = 0.0
            for k in range(indptr[r], indptr[r + 1]):
                acc += data[k] * x[indices[k]]
            yv[r] = acc
    return y
