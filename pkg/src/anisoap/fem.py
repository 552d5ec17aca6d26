"""Q1 assembly of the bilinear forms and load vectors of the three schemes.

Row index = test function, column index = trial function.  All forms are
integrated with the same tensor Gauss rule, and the z-mean of a coefficient at
an x-quadrature abscissa uses that same z-rule, so that the identities linking
the mean and fluctuation equations hold to round-off at the matrix level.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from . import expr as ex
from .grid import Grid
from .kernels import q1_cell_matrices
from .problem import ProblemSpec

__all__ = [
    "FormKind",
    "LoadVariant",
    "AssembledOperator",
    "Discretization",
    "HypothesisAViolation",
    "CoefficientError",
    "gauss_rule",
    "assemble_form",
    "assemble_load",
    "interpolate",
    "QUAD_ORDER",
]

# Three points per direction integrate products of two Q1 factors with a
# cubic coefficient exactly.
QUAD_ORDER = 3


class CoefficientError(ValueError):
    pass


class HypothesisAViolation(CoefficientError):
    """A diffusion coefficient is not strictly positive at some quadrature point."""


class FormKind(enum.Enum):
    A0 = "a0"  # A_z dz.dz on 2D
    A1 = "a1"  # A_perp dx.dx on 2D
    A2 = "a2"  # mean(A_perp) dx.dx on 1D
    C = "c"  # fluct(A_perp) couples 2D dx to 1D dx
    C_FULL = "c_full"  # as C with the full A_perp (AP2' right-hand side)
    D = "d"  # z-dense double integral
    B = "b"  # mean constraint pairing
    MSTAB = "mstab"  # coercifying term


class LoadVariant(enum.Enum):
    P = "P"
    L = "L"
    AP1 = "AP1"
    AP2 = "AP2"
    AP2PRIME = "AP2prime"


@dataclass(frozen=True)
class AssembledOperator:
    kind: FormKind
    matrix: sp.csr_matrix
    row_space: str
    col_space: str

    @property
    def shape(self):
        return self.matrix.shape


def gauss_rule(order: int = QUAD_ORDER) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre points and weights mapped to [0, 1]."""
    pts, wts = np.polynomial.legendre.leggauss(order)
    return (pts + 1.0) / 2.0, wts / 2.0


def _csr(m) -> sp.csr_matrix:
    out = sp.csr_matrix(m)
    out.sum_duplicates()
    out.sort_indices()
    return out


class Discretization:
    """Assembled operators and loads of one problem on one grid (cached)."""

    def __init__(self, problem: ProblemSpec, grid: Grid, quad_order: int = QUAD_ORDER):
        if not np.isclose(grid.Lx, problem.Lx) or not np.isclose(grid.Lz, problem.Lz):
            raise ValueError("grid does not cover the problem domain")
        self.problem = problem
        self.grid = grid
        self.gp, self.gw = gauss_rule(quad_order)
        self.a_perp_q = self._sample(problem.A_perp, "A_perp")
        self.a_z_q = self._sample(problem.A_z, "A_z")
        for name, vals in (("A_perp", self.a_perp_q), ("A_z", self.a_z_q)):
            if not np.all(vals > 0):
                i, j, p, q = np.unravel_index(np.argmin(vals), vals.shape)
                raise HypothesisAViolation(
                    f"{name} = {vals[i, j, p, q]:.3g} <= 0 at x={self.xq[i, p]:.6g}, z={self.zq[j, q]:.6g}"
                )
        self._ops: dict[FormKind, AssembledOperator] = {}

    # quadrature data -------------------------------------------------------

    @cached_property
    def xq(self) -> np.ndarray:
        g = self.grid
        return g.x_nodes[:-1, None] + g.hx[:, None] * self.gp[None, :]

    @cached_property
    def zq(self) -> np.ndarray:
        g = self.grid
        return g.z_nodes[:-1, None] + g.hz[:, None] * self.gp[None, :]

    def _sample(self, e, what: str) -> np.ndarray:
        X = self.xq[:, None, :, None]
        Z = self.zq[None, :, None, :]
        b = dict(self.problem.bindings(), x=X, z=Z)
        try:
            vals = ex.evaluate(e, b)
        except ex.ExprEvalError as exc:
            raise CoefficientError(f"cannot evaluate {what}: {exc}") from None
        shape = (self.xq.shape[0], self.zq.shape[0], self.gp.size, self.gp.size)
        vals = np.broadcast_to(np.asarray(vals, dtype=float), shape)
        if not np.all(np.isfinite(vals)):
            raise CoefficientError(f"{what} is not finite at some quadrature point")
        return np.ascontiguousarray(vals)

    @cached_property
    def a_perp_mean_q(self) -> np.ndarray:
        """z-mean of A_perp at each x abscissa, shape (ncx, nq)."""
        wz = self.grid.hz[:, None] * self.gw[None, :]
        return np.einsum("ijpq,jq->ip", self.a_perp_q, wz) / self.grid.Lz

    @cached_property
    def a_perp_fluct_q(self) -> np.ndarray:
        return self.a_perp_q - self.a_perp_mean_q[:, None, :, None]

    @cached_property
    def m_perp(self) -> float:
        return float(self.a_perp_q.max())

    # DOF bookkeeping -------------------------------------------------------

    @cached_property
    def _cell_dofs(self) -> np.ndarray:
        """(ncx, ncz, 4) DOF ids of each cell's nodes, -1 on Dirichlet nodes."""
        g = self.grid
        i = np.arange(g.Nx + 1)[:, None, None]
        j = np.arange(g.Nz - 1)[None, :, None]
        loc = np.arange(4)[None, None, :]
        node_x = i + (loc >> 1)
        node_z = j + (loc & 1)
        dof = (node_x - 1) * g.Nz + node_z
        return np.where((node_x >= 1) & (node_x <= g.Nx), dof, -1)

    def _scatter_2d(self, local: np.ndarray) -> sp.csr_matrix:
        dofs = self._cell_dofs
        rows = np.broadcast_to(dofs[..., :, None], local.shape)
        cols = np.broadcast_to(dofs[..., None, :], local.shape)
        keep = (rows >= 0) & (cols >= 0)
        n = self.grid.n_dofs_2d
        return _csr(sp.coo_matrix((local[keep], (rows[keep], cols[keep])), shape=(n, n)))

    def stiffness(self, coef: np.ndarray, direction: str) -> sp.csr_matrix:
        """2D form ``∫∫ coef ∂ψ ∂φ`` with the derivative along ``direction``."""
        dx = direction == "x"
        local = q1_cell_matrices(coef, self.grid.hx, self.grid.hz, self.gp, self.gw, dx, not dx, dx, not dx)
        return self._scatter_2d(local)

    @cached_property
    def unit_coef(self) -> np.ndarray:
        return np.ones_like(self.a_perp_q)

    @cached_property
    def sum_z(self) -> sp.csr_matrix:
        """(Nx, Nx*Nz) matrix summing over z; its transpose lifts z-constant fields."""
        g = self.grid
        return _csr(sp.kron(sp.identity(g.Nx), np.ones((1, g.Nz))))

    @cached_property
    def mass_x(self) -> sp.csr_matrix:
        """1D mass matrix on the interior hats."""
        h = self.grid.hx
        main = (h[:-1] + h[1:]) / 3.0
        off = h[1:-1] / 6.0
        return _csr(sp.diags([off, main, off], [-1, 0, 1]))

    def _x_derivative_incidence(self) -> tuple[sp.csr_matrix, np.ndarray]:
        """(Nx, ncx*nq) values of the hat derivatives at x abscissae, plus weights."""
        g = self.grid
        ncx, nq = g.Nx + 1, self.gp.size
        q = np.arange(ncx * nq)
        cell = q // nq
        inv_h = 1.0 / g.hx[cell]
        rows = np.concatenate([cell - 1, cell])
        cols = np.concatenate([q, q])
        vals = np.concatenate([-inv_h, inv_h])
        keep = (rows >= 0) & (rows < g.Nx)
        hmat = _csr(sp.coo_matrix((vals[keep], (rows[keep], cols[keep])), shape=(g.Nx, ncx * nq)))
        weights = (g.hx[:, None] * self.gw[None, :]).ravel()
        return hmat, weights

    def _z_moments(self, coef: np.ndarray) -> np.ndarray:
        """``∫ coef(x_q, z) κ_k(z) dz`` at every x abscissa: shape (ncx*nq, Nz)."""
        g = self.grid
        wz = g.hz[:, None] * self.gw[None, :]
        left = np.einsum("ijpq,jq,q->ipj", coef, wz, 1.0 - self.gp)
        right = np.einsum("ijpq,jq,q->ipj", coef, wz, self.gp)
        out = np.zeros(left.shape[:2] + (g.Nz,))
        out[:, :, :-1] += left
        out[:, :, 1:] += right
        return out.reshape(-1, g.Nz)

    @staticmethod
    def _khatri_rao(hmat: sp.csr_matrix, zfac: np.ndarray) -> sp.csr_matrix:
        """Column-wise Kronecker: ``[(n, k), q] = hmat[n, q] * zfac[q, k]``."""
        coo = hmat.tocoo()
        nz = zfac.shape[1]
        rows = (coo.row[:, None] * nz + np.arange(nz)[None, :]).ravel()
        cols = np.repeat(coo.col, nz)
        vals = (coo.data[:, None] * zfac[coo.col, :]).ravel()
        return _csr(sp.coo_matrix((vals, (rows, cols)), shape=(hmat.shape[0] * nz, hmat.shape[1])))

    # forms -----------------------------------------------------------------

    def operator(self, kind: FormKind) -> AssembledOperator:
        kind = FormKind(kind)
        if kind not in self._ops:
            self._ops[kind] = self._assemble(kind)
        return self._ops[kind]

    def matrix(self, kind: FormKind) -> sp.csr_matrix:
        return self.operator(kind).matrix

    def _assemble(self, kind: FormKind) -> AssembledOperator:
        g = self.grid
        if kind is FormKind.A0:
            return AssembledOperator(kind, self.stiffness(self.a_z_q, "z"), "2d", "2d")
        if kind is FormKind.A1:
            return AssembledOperator(kind, self.stiffness(self.a_perp_q, "x"), "2d", "2d")
        if kind is FormKind.A2:
            hmat, w = self._x_derivative_incidence()
            abar = self.a_perp_mean_q.ravel()
            m = hmat @ sp.diags(w * abar) @ hmat.T
            return AssembledOperator(kind, _csr(m), "1d", "1d")
        if kind is FormKind.C:
            m = self.stiffness(self.a_perp_fluct_q, "x") @ self.sum_z.T
            return AssembledOperator(kind, _csr(m), "2d", "1d")
        if kind is FormKind.C_FULL:
            m = self.matrix(FormKind.A1) @ self.sum_z.T
            return AssembledOperator(kind, _csr(m), "2d", "1d")
        if kind is FormKind.B:
            m = sp.kron(self.mass_x, g.z_weights[:, None])
            return AssembledOperator(kind, _csr(m), "2d", "1d")
        hmat, w = self._x_derivative_incidence()
        t_w = self._khatri_rao(hmat, np.broadcast_to(g.z_weights, (hmat.shape[1], g.Nz)))
        if kind is FormKind.D:
            t_a = self._khatri_rao(hmat, self._z_moments(self.a_perp_fluct_q))
            m = (t_w @ sp.diags(w) @ t_a.T) / g.Lz
            return AssembledOperator(kind, _csr(m), "2d", "2d")
        if kind is FormKind.MSTAB:
            scale = self.problem.eps * self.m_perp / g.Lz
            m = scale * (t_w @ sp.diags(w) @ t_w.T)
            return AssembledOperator(kind, _csr(m), "2d", "2d")
        raise ValueError(f"unknown form {kind}")

    # loads -----------------------------------------------------------------

    @cached_property
    def full_load(self) -> np.ndarray:
        """``(f, χ_n κ_k)`` on the 2D unknowns."""
        f = self.problem.f
        if hasattr(f, "load_vector"):
            return np.asarray(f.load_vector(self.grid), dtype=float)
        g = self.grid
        if self.problem.load_rule == "interpolated":
            X, Z = np.meshgrid(g.x_nodes, g.z_nodes, indexing="ij")
            try:
                f_nodes = ex.evaluate(f, dict(self.problem.bindings(), x=X, z=Z))
            except ex.ExprEvalError as exc:
                raise CoefficientError(f"cannot evaluate f: {exc}") from None
            f_nodes = np.broadcast_to(np.asarray(f_nodes, dtype=float), X.shape)
            mz = _mass_1d(g.z_nodes)
            mx = _mass_1d(g.x_nodes)[1:-1]
            return (mx @ f_nodes @ mz.T).ravel()
        vals = self._sample(f, "f")
        w = (g.hx[:, None] * self.gw)[:, None, :, None] * (g.hz[:, None] * self.gw)[None, :, None, :]
        bx = np.stack([1.0 - self.gp, self.gp])
        local = np.einsum("ijpq,ap,cq->ijac", vals * w, bx, bx).reshape(g.Nx + 1, g.Nz - 1, 4)
        dofs = self._cell_dofs
        keep = dofs >= 0
        return np.bincount(dofs[keep], weights=local[keep], minlength=g.n_dofs_2d)

    @cached_property
    def mean_load(self) -> np.ndarray:
        """``(f̄, χ_n)``; exact identity with the 2D load since Σ_k κ_k = 1."""
        return (self.sum_z @ self.full_load) / self.grid.Lz

    @cached_property
    def fluct_load(self) -> np.ndarray:
        """``(f', χ_n κ_k)``."""
        return self.full_load - np.kron(self.mean_load, self.grid.z_weights)

    def load(self, variant, mean_part=None, fluct_part=None) -> np.ndarray:
        variant = LoadVariant(variant)
        eps = self.problem.eps
        if variant is LoadVariant.P:
            return self.full_load.copy()
        if variant is LoadVariant.L:
            return self.mean_load.copy()
        if variant is LoadVariant.AP1:
            if fluct_part is None:
                raise ValueError("AP1 load needs the fluctuation part")
            c = self.matrix(FormKind.C)
            return self.mean_load - (c.T @ np.asarray(fluct_part, dtype=float)) / self.grid.Lz
        if mean_part is None:
            raise ValueError(f"{variant.value} load needs the mean part")
        mean_part = np.asarray(mean_part, dtype=float)
        if variant is LoadVariant.AP2:
            return eps * (self.fluct_load - self.matrix(FormKind.C) @ mean_part)
        return eps * (self.full_load - self.matrix(FormKind.C_FULL) @ mean_part)


def _mass_1d(nodes: np.ndarray) -> sp.csr_matrix:
    h = np.diff(nodes)
    main = np.zeros(nodes.size)
    main[:-1] += h / 3.0
    main[1:] += h / 3.0
    return _csr(sp.diags([h / 6.0, main, h / 6.0], [-1, 0, 1]))


def assemble_form(g: Grid, kind, problem: ProblemSpec) -> AssembledOperator:
    return Discretization(problem, g).operator(kind)


def assemble_load(g: Grid, problem: ProblemSpec, variant, mean_part=None, fluct_part=None) -> np.ndarray:
    return Discretization(problem, g).load(variant, mean_part, fluct_part)


def interpolate(g: Grid, e: ex.Expr, consts=None, dim: int = 2) -> np.ndarray:
    """Nodal values on the 2D unknowns (``dim=2``) or interior x nodes (``dim=1``)."""
    b = dict(consts or {})
    if dim == 2:
        X, Z = g.mesh()
        b.update(x=X, z=Z)
        shape = X.shape
    elif dim == 1:
        b["x"] = g.x_interior
        shape = g.x_interior.shape
    else:
        raise ValueError("dim must be 1 or 2")
    try:
        vals = ex.evaluate(e, b)
    except ex.ExprEvalError as exc:
        raise CoefficientError(f"interpolation failed: {exc}") from None
    return np.broadcast_to(np.asarray(vals, dtype=float), shape).ravel().copy()
