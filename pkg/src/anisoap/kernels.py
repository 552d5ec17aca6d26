"""Kernel backend selection.

The compiled extension is used when it was built; otherwise the numpy
fallback.  Setting ``ANISOAP_PURE_PYTHON=1`` forces the fallback.
"""

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if not os.environ.get("ANISOAP_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def available_backends():
    out = {"python": _pykernels}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out


def q1_cell_matrices(coef, hx, hz, gp, gw, dx_test, dz_test, dx_trial, dz_trial):
    return _impl.q1_cell_matrices(
        np.ascontiguousarray(coef, dtype=float),
        np.ascontiguousarray(hx, dtype=float),
        np.ascontiguousarray(hz, dtype=float),
        np.ascontiguousarray(gp, dtype=float),
        np.ascontiguousarray(gw, dtype=float),
        bool(dx_test), bool(dz_test), bool(dx_trial), bool(dz_trial),
    )


def csr_matvec(m, x):
    """Sparse matrix-vector product for a scipy CSR matrix."""
    return _impl.csr_matvec(
        np.ascontiguousarray(m.indptr, dtype=np.int32),
        np.ascontiguousarray(m.indices, dtype=np.int32),
        np.ascontiguousarray(m.data, dtype=float),
        np.ascontiguousarray(x, dtype=float),
    )
