"""Sparse direct solves, a dense elimination oracle, condition estimates and norms."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .kernels import csr_matvec

__all__ = [
    "SparseMatrix",
    "SingularMatrixError",
    "Factorization",
    "factor",
    "solve",
    "dense_solve",
    "CondEstimate",
    "cond_estimate",
    "NormKind",
    "discrete_norm",
    "to_csr",
]

SparseMatrix = sp.csr_matrix


class SingularMatrixError(np.linalg.LinAlgError):
    def __init__(self, message: str, row: int | None = None):
        self.row = row
        super().__init__(message if row is None else f"{message} (row {row})")


def to_csr(m) -> sp.csr_matrix:
    """CSR copy with sorted, unique column indices per row."""
    out = sp.csr_matrix(m, dtype=float, copy=True)
    out.sum_duplicates()
    out.sort_indices()
    return out


class Factorization:
    """Sparse LU with partial pivoting (SuperLU, threshold 1.0)."""

    def __init__(self, m):
        m = sp.csc_matrix(m, dtype=float)
        if m.shape[0] != m.shape[1]:
            raise ValueError(f"matrix must be square, got {m.shape}")
        self.shape = m.shape
        self.n = m.shape[0]
        try:
            self._lu = spla.splu(m, permc_spec="COLAMD", diag_pivot_thresh=1.0)
        except RuntimeError as exc:
            raise SingularMatrixError(f"factorization failed: {exc}", _first_empty(m)) from None
        udiag = self._lu.U.diagonal()
        zero = np.flatnonzero(udiag == 0.0)
        if zero.size:
            row = int(self._lu.perm_r.argsort()[zero[0]]) if zero[0] < self.n else None
            raise SingularMatrixError("zero pivot in LU factorization", row)
        self.min_pivot_ratio = float(np.abs(udiag).min() / np.abs(udiag).max()) if self.n else 1.0

    def solve(self, rhs, trans: str = "N") -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape[0] != self.n:
            raise ValueError(f"rhs of length {rhs.shape[0]} for a {self.n}x{self.n} system")
        return self._lu.solve(rhs, trans=trans)


def _first_empty(m: sp.csc_matrix) -> int | None:
    r = sp.csr_matrix(m)
    empty = np.flatnonzero(np.diff(r.indptr) == 0)
    return int(empty[0]) if empty.size else None


def factor(m) -> Factorization:
    return Factorization(m)


def solve(f: Factorization, rhs) -> np.ndarray:
    return f.solve(rhs)


def dense_solve(m, rhs) -> np.ndarray:
    """Gaussian elimination with partial pivoting; test oracle for small systems."""
    a = np.array(m.toarray() if sp.issparse(m) else m, dtype=float)
    b = np.array(rhs, dtype=float)
    n = a.shape[0]
    if a.shape != (n, n) or b.shape[0] != n:
        raise ValueError("dense_solve needs a square matrix and a matching rhs")
    if n > 2000:
        raise ValueError("dense_solve is limited to n <= 2000")
    scale = np.abs(a).max() if n else 0.0
    for k in range(n):
        p = k + int(np.argmax(np.abs(a[k:, k])))
        if abs(a[p, k]) <= 1e-14 * scale or scale == 0.0:
            raise SingularMatrixError("singular matrix in dense elimination", k)
        if p != k:
            a[[k, p]] = a[[p, k]]
            b[[k, p]] = b[[p, k]]
        factors = a[k + 1 :, k] / a[k, k]
        a[k + 1 :, k:] -= np.outer(factors, a[k, k:])
        b[k + 1 :] -= np.outer(factors, b[k]).reshape(b[k + 1 :].shape)
    x = np.zeros_like(b)
    for k in range(n - 1, -1, -1):
        x[k] = (b[k] - a[k, k + 1 :] @ x[k + 1 :]) / a[k, k]
    return x


@dataclass(frozen=True)
class CondEstimate:
    value: float
    sigma_max: float
    sigma_min: float
    converged: bool
    singular: bool
    iterations: int

    def __float__(self) -> float:
        return self.value


def _power(apply, n: int, rng, tol: float, max_iter: int) -> tuple[float, bool, int]:
    """Largest eigenvalue of the SPD operator ``apply`` by power iteration."""
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for it in range(1, max_iter + 1):
        w = apply(v)
        new = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0.0 or not np.isfinite(nw):
            return new, False, it
        v = w / nw
        if it > 1 and abs(new - lam) <= tol * abs(new):
            return new, True, it
        lam = new
    return lam, False, max_iter


def cond_estimate(m, tol: float = 1e-2, max_iter: int = 10000, seed: int = 0) -> CondEstimate:
    """2-norm condition number ``σ_max/σ_min``.

    ``σ_max²`` comes from power iteration on ``mᵀm``; ``σ_min²`` from inverse
    power iteration through an LU factorization of ``m``.  Convergence is on the
    relative change of the Rayleigh quotient.  A singular factorization gives
    ``inf`` with ``singular=True``; hitting the cap sets ``converged=False``.
    """
    m = to_csr(m)
    mt = to_csr(m.T)
    n = m.shape[0]
    rng = np.random.default_rng(seed)
    smax2, ok_max, it1 = _power(lambda v: csr_matvec(mt, csr_matvec(m, v)), n, rng, tol, max_iter)
    try:
        lu = Factorization(m)
    except SingularMatrixError:
        return CondEstimate(np.inf, float(np.sqrt(smax2)), 0.0, ok_max, True, it1)

    def inv_normal(v):
        return lu.solve(lu.solve(v, trans="T"))

    with np.errstate(all="ignore"):
        inv_min2, ok_min, it2 = _power(inv_normal, n, rng, tol, max_iter)
    if not np.isfinite(inv_min2) or inv_min2 <= 0:
        return CondEstimate(np.inf, float(np.sqrt(smax2)), 0.0, False, True, it1 + it2)
    smin = 1.0 / np.sqrt(inv_min2)
    smax = np.sqrt(smax2)
    return CondEstimate(float(smax / smin), float(smax), float(smin), ok_max and ok_min, False, it1 + it2)


class NormKind(enum.Enum):
    GRID_L2 = "grid_l2"
    GRID_LINF = "grid_linf"
    U = "U"
    V = "V"
    STAR = "star"


def discrete_norm(g, u, kind, problem=None, eps: float | None = None, disc=None) -> float:
    """Norms of a nodal field on the unknowns of ``g``.

    ``grid_l2`` averages over every grid point including the Dirichlet nodes,
    where a difference of two admissible fields vanishes.  ``U``, ``V`` and
    ``star`` are energy norms integrated with the assembly quadrature.
    """
    kind = NormKind(kind)
    u = np.asarray(u, dtype=float).ravel()
    if u.size == g.n_dofs_2d:
        n_points = (g.Nx + 2) * g.Nz
        is_2d = True
    elif u.size == g.n_dofs_1d:
        n_points = g.Nx + 2
        is_2d = False
    else:
        raise ValueError(f"field of size {u.size} does not conform to {g}")
    if kind is NormKind.GRID_L2:
        return float(np.sqrt(np.sum(u * u) / n_points))
    if kind is NormKind.GRID_LINF:
        return float(np.abs(u).max()) if u.size else 0.0
    if not is_2d:
        raise ValueError(f"{kind.value} norm is defined for 2D fields only")

    from .fem import Discretization, FormKind

    if kind is NormKind.STAR:
        if problem is None and disc is None:
            raise ValueError("star norm needs the problem coefficients")
        d = disc if disc is not None else Discretization(problem, g)
        e = d.problem.eps if eps is None else eps
        val = u @ (d.matrix(FormKind.A0) @ u) + e * (u @ (d.matrix(FormKind.A1) @ u))
        return float(np.sqrt(max(val, 0.0)))
    ops = _unit_stiffness(g)
    val = u @ (ops[1] @ u)
    if kind is NormKind.V:
        if eps is None:
            if problem is None:
                raise ValueError("V norm needs eps")
            eps = problem.eps
        val += eps * (u @ (ops[0] @ u))
    return float(np.sqrt(max(val, 0.0)))


_UNIT_CACHE: dict = {}


def _unit_stiffness(g):
    """(∫∂xψ∂xφ, ∫∂zψ∂zφ) on the grid, cached per grid object."""
    key = id(g)
    hit = _UNIT_CACHE.get(key)
    if hit is not None and hit[0] is g:
        return hit[1]
    from . import expr as ex
    from .fem import Discretization
    from .problem import ProblemSpec

    one = ex.Num(1.0)
    p = ProblemSpec(g.x_nodes[0], g.x_nodes[-1], g.z_nodes[0], g.z_nodes[-1], 1.0, one, one, ex.Num(0.0))
    d = Discretization(p, g)
    ops = (d.stiffness(d.unit_coef, "x"), d.stiffness(d.unit_coef, "z"))
    if len(_UNIT_CACHE) > 16:
        _UNIT_CACHE.clear()
    _UNIT_CACHE[key] = (g, ops)
    return ops
