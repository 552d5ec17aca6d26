"""P-, L- and AP-scheme solves.

The AP scheme alternates between the 1D mean equation and the constrained
fluctuation equation.  Both matrices are factorised once; each fixed-point
step is two triangular solves.  The zero-mean constraint on the fluctuation is
imposed through a Lagrange multiplier (bordered system) by default, or through
the coercive penalised form for cross-validation.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from . import grid as gr
from .fem import Discretization, FormKind, LoadVariant
from .grid import Grid
from .linalg import Factorization, SingularMatrixError, discrete_norm
from .problem import ProblemSpec

__all__ = [
    "Variant",
    "APOptions",
    "APSolution",
    "SolverError",
    "p_solve",
    "l_solve",
    "ap_solve",
    "ap_solve_monolithic",
    "bordered_matrix",
    "p_matrix",
]

log = logging.getLogger(__name__)

STALL_LEVEL = 1e-6
STALL_COUNT = 3


class SolverError(RuntimeError):
    pass


class Variant(enum.Enum):
    AP2 = "ap2"
    AP2PRIME = "ap2prime"


@dataclass(frozen=True)
class APOptions:
    variant: Variant = Variant.AP2PRIME
    tol: float = 1e-12
    max_iters: int = 200
    initial_fluct: np.ndarray | None = None
    constraint: str = "lagrange"  # or "coercive"

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.constraint not in ("lagrange", "coercive"):
            raise ValueError("constraint must be 'lagrange' or 'coercive'")
        if self.constraint == "coercive" and self.variant is not Variant.AP2:
            raise ValueError("the coercive form is only equivalent for the AP2 variant")


@dataclass
class APSolution:
    grid: Grid
    mean: np.ndarray
    fluct: np.ndarray
    multiplier: np.ndarray
    iterations: int
    converged: bool
    trace: list[float] = field(default_factory=list)
    stalled: bool = False
    constraint_residual: float = 0.0
    multiplier_norm: float = 0.0
    load_norm: float = 0.0

    @property
    def combined(self) -> np.ndarray:
        return gr.expand_mean(self.grid, self.mean) + self.fluct


def _check_eps(problem: ProblemSpec) -> None:
    if not problem.eps > 0:
        raise ValueError(f"eps must be positive, got {problem.eps}")


def p_matrix(disc: Discretization) -> sp.csr_matrix:
    """``A0 + eps*A1``: the P-scheme matrix in scaled form."""
    return (disc.matrix(FormKind.A0) + disc.problem.eps * disc.matrix(FormKind.A1)).tocsr()


def p_solve(problem: ProblemSpec, g: Grid, disc: Discretization | None = None) -> np.ndarray:
    """Direct Q1 solve of the anisotropic problem, ``(A0 + εA1) φ = ε F``."""
    _check_eps(problem)
    disc = disc or Discretization(problem, g)
    lu = Factorization(p_matrix(disc))
    return lu.solve(problem.eps * disc.load(LoadVariant.P))


def l_solve(problem: ProblemSpec, g: Grid, disc: Discretization | None = None) -> np.ndarray:
    """Limit model: ``A2 φ̄ = (f̄, χ)``."""
    disc = disc or Discretization(problem, g)
    lu = Factorization(disc.matrix(FormKind.A2))
    return lu.solve(disc.load(LoadVariant.L))


def fluct_matrix(disc: Discretization, variant: Variant) -> sp.csr_matrix:
    eps = disc.problem.eps
    k = disc.matrix(FormKind.A0) + eps * disc.matrix(FormKind.A1)
    if Variant(variant) is Variant.AP2:
        k = k - eps * disc.matrix(FormKind.D)
    return k.tocsr()


def _inf_norm(m) -> float:
    return float(abs(m).sum(axis=1).max())


def constraint_scale(disc: Discretization, variant: Variant = Variant.AP2PRIME) -> float:
    """Factor ``s`` applied to the constraint block, ``s = ‖K‖∞ / ‖B‖∞``.

    The multiplier has no physical unit, so the constraint rows may be scaled
    freely.  Without this the smallest singular value of the bordered matrix
    behaves like ``σ_min(B)² / ‖K‖`` and the conditioning degrades as ``1/eps``
    once ``eps*A1`` dominates ``K``.
    """
    return _inf_norm(fluct_matrix(disc, variant)) / _inf_norm(disc.matrix(FormKind.B))


def bordered_matrix(disc: Discretization, variant: Variant = Variant.AP2PRIME) -> sp.csr_matrix:
    """``[[K, sB], [sBᵀ, 0]]`` for the fluctuation equation, ``s`` from `constraint_scale`."""
    b = constraint_scale(disc, variant) * disc.matrix(FormKind.B)
    return sp.bmat([[fluct_matrix(disc, variant), b], [b.T, None]], format="csr")


def _star(disc: Discretization, u: np.ndarray) -> float:
    return discrete_norm(disc.grid, u, "star", disc=disc)


def ap_solve(
    problem: ProblemSpec,
    g: Grid,
    opts: APOptions | None = None,
    disc: Discretization | None = None,
    callback: Callable[[int, np.ndarray, np.ndarray], None] | None = None,
) -> APSolution:
    """Fixed-point iteration between the mean and fluctuation equations.

    ``callback(k, mean_k, fluct_k)`` is called with the initial state
    (``k = 0``, zero mean) and after every iteration.  Stops when the star-norm
    update falls below ``tol`` times the star norm of the iterate; reaching
    ``max_iters`` returns an unconverged solution rather than raising.

    Once the relative update is below ``STALL_LEVEL`` and has failed to decrease
    for ``STALL_COUNT`` consecutive iterations, the iteration is at round-off and
    stops early with ``stalled=True`` (and ``converged=False``).
    """
    _check_eps(problem)
    opts = opts or APOptions()
    disc = disc or Discretization(problem, g)
    nx, n2 = g.n_dofs_1d, g.n_dofs_2d
    eps = problem.eps
    variant = LoadVariant.AP2 if opts.variant is Variant.AP2 else LoadVariant.AP2PRIME

    lu_mean = Factorization(disc.matrix(FormKind.A2))
    scale = 1.0
    if opts.constraint == "lagrange":
        scale = constraint_scale(disc, opts.variant)
        lu_fluct = Factorization(bordered_matrix(disc, opts.variant))
    else:
        m = fluct_matrix(disc, Variant.AP2) + disc.matrix(FormKind.MSTAB)
        lu_fluct = Factorization(m)

    alpha = np.zeros(n2) if opts.initial_fluct is None else np.asarray(opts.initial_fluct, float).copy()
    if callback is not None:
        callback(0, np.zeros(nx), alpha.copy())
    trace: list[float] = []
    gamma = np.zeros(nx)
    converged = False
    load = np.zeros(n2)
    it = 0
    stalled = False
    flat = 0
    for it in range(1, opts.max_iters + 1):
        beta = lu_mean.solve(disc.load(LoadVariant.AP1, fluct_part=alpha))
        load = disc.load(variant, mean_part=beta)
        if opts.constraint == "lagrange":
            sol = lu_fluct.solve(np.concatenate([load, np.zeros(nx)]))
            new_alpha, gamma = sol[:n2], scale * sol[n2:]
        else:
            new_alpha = lu_fluct.solve(load)
        update = _star(disc, new_alpha - alpha)
        size = _star(disc, new_alpha)
        trace.append(update)
        alpha = new_alpha
        if callback is not None:
            callback(it, beta, alpha.copy())
        if update <= opts.tol * max(size, 1e-300):
            converged = True
            break
        if len(trace) > 1 and trace[-1] >= trace[-2] and update <= STALL_LEVEL * size:
            flat += 1
            if flat >= STALL_COUNT:
                stalled = True
                log.info("AP fixed point stalled at round-off after %d iterations (eps=%g)", it, eps)
                break
        else:
            flat = 0
    if not converged and not stalled:
        log.warning("AP fixed point not converged after %d iterations (eps=%g)", it, eps)
    beta = lu_mean.solve(disc.load(LoadVariant.AP1, fluct_part=alpha))
    return _finish(disc, beta, alpha, gamma, it, converged, trace, load, stalled)


def _finish(disc, beta, alpha, gamma, iterations, converged, trace, load, stalled=False) -> APSolution:
    b = disc.matrix(FormKind.B)
    return APSolution(
        grid=disc.grid,
        mean=beta,
        fluct=alpha,
        multiplier=gamma,
        iterations=iterations,
        converged=converged,
        trace=trace,
        stalled=stalled,
        constraint_residual=float(np.linalg.norm(b.T @ alpha)),
        multiplier_norm=float(np.linalg.norm(gamma)),
        load_norm=float(np.linalg.norm(load)),
    )


def monolithic_matrix(disc: Discretization, variant: Variant = Variant.AP2PRIME) -> sp.csr_matrix:
    """Coupled system in the unknowns ``(β, α, γ)``."""
    g = disc.grid
    eps = disc.problem.eps
    variant = Variant(variant)
    a2 = disc.matrix(FormKind.A2)
    c = disc.matrix(FormKind.C)
    coupling = disc.matrix(FormKind.C if variant is Variant.AP2 else FormKind.C_FULL)
    b = constraint_scale(disc, variant) * disc.matrix(FormKind.B)
    return sp.bmat(
        [
            [a2, c.T / g.Lz, None],
            [eps * coupling, fluct_matrix(disc, variant), b],
            [None, b.T, None],
        ],
        format="csr",
    )


def ap_solve_monolithic(
    problem: ProblemSpec, g: Grid, variant: Variant = Variant.AP2PRIME, disc: Discretization | None = None
) -> APSolution:
    """Single bordered solve of the coupled mean/fluctuation system."""
    _check_eps(problem)
    variant = Variant(variant)
    disc = disc or Discretization(problem, g)
    nx, n2 = g.n_dofs_1d, g.n_dofs_2d
    eps = problem.eps
    rhs2 = eps * (disc.fluct_load if variant is Variant.AP2 else disc.full_load)
    rhs = np.concatenate([disc.mean_load, rhs2, np.zeros(nx)])
    sol = Factorization(monolithic_matrix(disc, variant)).solve(rhs)
    beta, alpha = sol[:nx], sol[nx : nx + n2]
    gamma = constraint_scale(disc, variant) * sol[nx + n2 :]
    loadv = LoadVariant.AP2 if variant is Variant.AP2 else LoadVariant.AP2PRIME
    return _finish(disc, beta, alpha, gamma, 1, True, [], disc.load(loadv, mean_part=beta))


def solve_scheme(scheme: str, problem: ProblemSpec, g: Grid, opts: APOptions | None = None):
    """Dispatch by scheme name; returns the 2D nodal solution and the AP result if any."""
    scheme = scheme.lower()
    disc = Discretization(problem, g)
    if scheme == "p":
        return p_solve(problem, g, disc), None
    if scheme == "l":
        return gr.expand_mean(g, l_solve(problem, g, disc)), None
    if scheme == "ap":
        res = ap_solve(problem, g, opts, disc)
        return res.combined, res
    raise ValueError(f"unknown scheme {scheme!r}")


__all__ += ["solve_scheme", "fluct_matrix", "constraint_scale", "monolithic_matrix", "SingularMatrixError"]
