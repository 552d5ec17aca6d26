"""Pure numpy implementations of the hot kernels.

Same signatures and results as the compiled ``_ckernels`` module; used when
the extension is not built or ``ANISOAP_PURE_PYTHON`` is set.
"""

import numpy as np


def _basis_table(h, gp, deriv):
    # (ncells, 2 local nodes, nq points)
    nc = h.size
    if deriv:
        tab = np.empty((nc, 2, gp.size))
        tab[:, 0, :] = (-1.0 / h)[:, None]
        tab[:, 1, :] = (1.0 / h)[:, None]
        return tab
    tab = np.empty((nc, 2, gp.size))
    tab[:, 0, :] = 1.0 - gp
    tab[:, 1, :] = gp
    return tab


def q1_cell_matrices(coef, hx, hz, gp, gw, dx_test, dz_test, dx_trial, dz_trial):
    """Local 4x4 matrices of a Q1 bilinear form on every cell.

    ``coef[i, j, p, q]`` is the coefficient at Gauss point ``(p, q)`` of cell
    ``(i, j)``; local node ``a = 2*ix + iz``.  Entry ``[i, j, a, b]`` pairs test
    node ``a`` with trial node ``b``.
    """
    coef = np.asarray(coef, dtype=float)
    hx = np.asarray(hx, dtype=float)
    hz = np.asarray(hz, dtype=float)
    gp = np.asarray(gp, dtype=float)
    gw = np.asarray(gw, dtype=float)
    ncx, ncz = hx.size, hz.size
    wc = coef * (gw[:, None] * gw[None, :]) * (hx[:, None] * hz[None, :])[:, :, None, None]
    xt = _basis_table(hx, gp, dx_test)
    zt = _basis_table(hz, gp, dz_test)
    xr = _basis_table(hx, gp, dx_trial)
    zr = _basis_table(hz, gp, dz_trial)
    out = np.einsum("ijpq,iap,jcq,ibp,jdq->ijacbd", wc, xt, zt, xr, zr, optimize=True)
    return np.ascontiguousarray(out.reshape(ncx, ncz, 4, 4))


def csr_matvec(indptr, indices, data, x):
    """``y = A @ x`` for a CSR matrix given by its three arrays."""
    nrows = indptr.size - 1
    prod = data * x[indices]
    y = np.zeros(nrows)
    nonempty = indptr[:-1] < indptr[1:]
    if prod.size:
        sums = np.add.reduceat(prod, indptr[:-1][nonempty])
        y[nonempty] = sums
    return y
