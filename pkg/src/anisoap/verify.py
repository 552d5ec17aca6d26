"""Numerical studies on the manufactured case and the delta-source case.

Each study returns a `StudyReport`: a table with a fixed column order per
study kind, rows sorted by their keys, and a metadata dict.  Errors are
measured against the nodal interpolant of the exact solution on the unknowns
of the grid (the Dirichlet nodes carry no error).
"""

from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import expr as ex
from . import grid as gr
from .fem import Discretization, LoadVariant, interpolate
from .linalg import Factorization, SingularMatrixError, cond_estimate, discrete_norm
from .problem import BoxSource, ProblemSpec
from .solver import (
    APOptions,
    SolverError,
    Variant,
    ap_solve,
    bordered_matrix,
    l_solve,
    p_matrix,
    p_solve,
)

__all__ = [
    "MANUFACTURED_F",
    "MANUFACTURED_EXACT",
    "StudyReport",
    "manufactured_case",
    "exact_parts",
    "delta_case",
    "grid_errors",
    "eps_sweep",
    "convergence_study",
    "interpolation_errors",
    "condition_study",
    "iteration_study",
    "plateau_iteration",
    "positivity_study",
    "perturbation_study",
    "valid_range",
]

SCHEMES = ("P", "L", "AP")

MANUFACTURED_EXACT = "sin(2*pi*x/Lx) + eps*cos(2*pi*z/Lz)*sin(2*pi*x/Lx)"
MANUFACTURED_MEAN = "sin(2*pi*x/Lx)"
MANUFACTURED_FLUCT = "eps*cos(2*pi*z/Lz)*sin(2*pi*x/Lx)"
# -dx(A_perp dx u) - (1/eps) dz(A_z dz u) for the exact solution above,
# with A_perp = c1 + x z^2 and A_z = c2 + x z.
MANUFACTURED_F = (
    "(1 + eps*cos(2*pi*z/Lz)) * ((c1 + x*z^2)*(2*pi/Lx)^2*sin(2*pi*x/Lx)"
    " - z^2*(2*pi/Lx)*cos(2*pi*x/Lx))"
    " + (2*pi/Lz)*sin(2*pi*x/Lx)*(x*sin(2*pi*z/Lz) + (c2 + x*z)*(2*pi/Lz)*cos(2*pi*z/Lz))"
)


def manufactured_case(eps: float = 1e-2, load_rule: str = "interpolated") -> ProblemSpec:
    """Variable-coefficient test case on ``[0,10]²`` with a known solution."""
    return ProblemSpec.from_strings(
        (0.0, 10.0, 0.0, 10.0),
        eps,
        "c1 + x*z^2",
        "c2 + x*z",
        MANUFACTURED_F,
        MANUFACTURED_EXACT,
        {"c1": 10.0, "c2": 10.0},
        name="manufactured",
        load_rule=load_rule,
    )


def exact_parts(problem: ProblemSpec) -> tuple[ex.Expr, ex.Expr]:
    """Exact z-mean and fluctuation of the manufactured solution."""
    if problem.name != "manufactured":
        raise ValueError("exact decomposition is only known for the manufactured case")
    return ex.parse(MANUFACTURED_MEAN), ex.parse(MANUFACTURED_FLUCT)


def delta_case(a: float, eps: float) -> ProblemSpec:
    """Unit coefficients on ``[-1,1]²`` with a unit-mass box source of half-width ``a``."""
    one = ex.Num(1.0)
    return ProblemSpec(-1.0, 1.0, -1.0, 1.0, float(eps), one, one, BoxSource.centered(a), name=f"delta_a={a!r}")


@dataclass
class StudyReport:
    """Table of study results.

    ``columns`` fixes the CSV column order; every row is a dict holding at
    least those keys (extra keys such as ``flag`` stay out of the CSV).
    ``scheme`` must be one of P, L, AP and error columns must be nonnegative
    (``inf`` marks a failed solve).
    """

    kind: str
    columns: tuple[str, ...]
    rows: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for r in self.rows:
            self._check(r)

    def _check(self, row: dict) -> None:
        missing = set(self.columns) - set(row)
        if missing:
            raise ValueError(f"row is missing columns {sorted(missing)}")
        if row["scheme"] not in SCHEMES:
            raise ValueError(f"unknown scheme {row['scheme']!r}")
        for k in ("l2_err", "linf_err", "mean_err", "fluct_err"):
            if k in row and not (row[k] >= 0):
                raise ValueError(f"{k} must be nonnegative, got {row[k]}")

    def add(self, **row) -> None:
        self._check(row)
        self.rows.append(row)

    def sort(self, *keys: str) -> "StudyReport":
        order = {s: i for i, s in enumerate(SCHEMES)}

        def key(r):
            out = []
            for k in keys:
                v = r[k]
                out.append(order[v] if k == "scheme" else (-v if k == "eps" else v))
            return tuple(out)

        self.rows.sort(key=key)
        return self

    def column(self, name: str, **where) -> list:
        return [r[name] for r in self.select(**where)]

    def select(self, **where) -> list[dict]:
        return [r for r in self.rows if all(r[k] == v for k, v in where.items())]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in self.columns])
        return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        # repr is the shortest string that round-trips
        return repr(float(v))
    return str(v)


def _metadata(spec: ProblemSpec | None, **extra) -> dict:
    md = {"timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z")}
    if spec is not None:
        problem = spec
        md["problem"] = problem.name
        md["load_rule"] = problem.load_rule
    md.update(extra)
    return md


def _map(fn, items, workers: int):
    items = list(items)
    if workers <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _as_grid(problem: ProblemSpec, spec) -> gr.Grid:
    if isinstance(spec, gr.Grid):
        return spec
    nx, nz = spec
    return gr.build(problem.x_lo, problem.x_hi, problem.z_lo, problem.z_hi, int(nx), int(nz))


def grid_errors(g: gr.Grid, u: np.ndarray, exact: np.ndarray) -> tuple[float, float]:
    d = np.asarray(u) - exact
    if not np.all(np.isfinite(d)):
        return math.inf, math.inf
    return discrete_norm(g, d, "grid_l2"), discrete_norm(g, d, "grid_linf")


def _solve(scheme: str, problem: ProblemSpec, g: gr.Grid, opts: APOptions | None):
    """Returns (solution or None, AP result or None, flag)."""
    disc = Discretization(problem, g)
    try:
        if scheme == "P":
            return p_solve(problem, g, disc), None, ""
        if scheme == "L":
            return gr.expand_mean(g, l_solve(problem, g, disc)), None, ""
        res = ap_solve(problem, g, opts, disc)
        flag = "" if res.converged else ("stalled" if res.stalled else "not_converged")
        return res.combined, res, flag
    except (SingularMatrixError, SolverError, FloatingPointError) as exc:
        return None, None, f"failed: {type(exc).__name__}"


def eps_sweep(
    problem: ProblemSpec,
    grids: Sequence,
    eps_list: Iterable[float],
    schemes: Sequence[str] = SCHEMES,
    opts: APOptions | None = None,
    workers: int = 1,
) -> StudyReport:
    """Error of each scheme per (eps, grid).  Failed solves give ``inf`` errors."""
    if problem.exact is None:
        raise ValueError("eps_sweep needs a problem with an exact solution")
    schemes = [s.upper() for s in schemes]
    cells = [(s, float(e), gspec) for gspec in grids for e in eps_list for s in schemes]

    def run(cell):
        scheme, eps, gspec = cell
        p = problem.with_eps(eps)
        g = _as_grid(p, gspec)
        u, res, flag = _solve(scheme, p, g, opts)
        exact = interpolate(g, p.exact, p.bindings())
        l2, linf = (math.inf, math.inf) if u is None else grid_errors(g, u, exact)
        return dict(
            scheme=scheme,
            eps=eps,
            Nx=g.Nx,
            Nz=g.Nz,
            l2_err=l2,
            linf_err=linf,
            iterations=res.iterations if res is not None else None,
            flag=flag,
        )

    cols = ("scheme", "eps", "Nx", "Nz", "l2_err", "linf_err")
    rep = StudyReport("eps_sweep", cols, _map(run, cells, workers), _metadata(problem))
    return rep.sort("Nx", "Nz", "scheme", "eps")


def _order(e1: float, e2: float, h1: float, h2: float) -> float:
    if not (e1 > 0 and e2 > 0) or not np.isfinite(e1) or not np.isfinite(e2):
        return math.nan
    return math.log(e1 / e2) / math.log(h1 / h2)


def convergence_study(
    problem: ProblemSpec,
    eps: float,
    grid_sequence: Sequence,
    scheme: str = "AP",
    opts: APOptions | None = None,
) -> StudyReport:
    """Errors on a sequence of grids and the observed order between consecutive grids.

    The order is ``log(e1/e2) / log(h1/h2)`` with ``h`` the largest cell size,
    which reduces to ``log2(e1/e2)`` when the spacing halves.
    """
    scheme = scheme.upper()
    p = problem.with_eps(eps)
    cols = ("scheme", "eps", "Nx", "Nz", "h", "l2_err", "linf_err", "l2_order", "linf_order", "flag")
    rep = StudyReport("convergence", cols, metadata=_metadata(p, scheme=scheme))
    prev = None
    for gspec in grid_sequence:
        g = _as_grid(p, gspec)
        u, _, flag = _solve(scheme, p, g, opts)
        exact = interpolate(g, p.exact, p.bindings())
        l2, linf = (math.inf, math.inf) if u is None else grid_errors(g, u, exact)
        h = g.max_h()
        if prev is None:
            o2 = oinf = math.nan
        else:
            o2 = _order(prev[1], l2, prev[0], h)
            oinf = _order(prev[2], linf, prev[0], h)
        rep.add(scheme=scheme, eps=float(eps), Nx=g.Nx, Nz=g.Nz, h=h, l2_err=l2, linf_err=linf,
                l2_order=o2, linf_order=oinf, flag=flag)
        prev = (h, l2, linf)
    return rep


def interpolation_errors(problem: ProblemSpec, grid_sequence: Sequence, n_fine: int = 8) -> list[tuple[float, float]]:
    """``(h, max error)`` of the Q1 interpolant of the exact solution.

    The error is sampled at ``n_fine`` points per cell and direction, so it
    sees the interpolant between nodes (at nodes it is exact by construction).
    """
    out = []
    b = problem.bindings()
    t = (np.arange(n_fine) + 0.5) / n_fine
    for gspec in grid_sequence:
        g = _as_grid(problem, gspec)
        X, Z = np.meshgrid(g.x_nodes, g.z_nodes, indexing="ij")
        nodal = np.broadcast_to(ex.evaluate(problem.exact, dict(b, x=X, z=Z)), X.shape)
        x0, x1 = g.x_nodes[:-1, None], g.x_nodes[1:, None]
        z0, z1 = g.z_nodes[:-1, None], g.z_nodes[1:, None]
        xs = (x0 + (x1 - x0) * t).ravel()
        zs = (z0 + (z1 - z0) * t).ravel()
        XS, ZS = np.meshgrid(xs, zs, indexing="ij")
        exact = np.broadcast_to(ex.evaluate(problem.exact, dict(b, x=XS, z=ZS)), XS.shape)
        # bilinear interpolation of nodal values
        ix = np.repeat(np.arange(g.x_nodes.size - 1), n_fine)
        iz = np.repeat(np.arange(g.z_nodes.size - 1), n_fine)
        tx = np.tile(t, g.x_nodes.size - 1)[:, None]
        tz = np.tile(t, g.z_nodes.size - 1)[None, :]
        v00 = nodal[ix][:, iz]
        v10 = nodal[ix + 1][:, iz]
        v01 = nodal[ix][:, iz + 1]
        v11 = nodal[ix + 1][:, iz + 1]
        interp = (1 - tx) * (1 - tz) * v00 + tx * (1 - tz) * v10 + (1 - tx) * tz * v01 + tx * tz * v11
        out.append((g.max_h(), float(np.abs(interp - exact).max())))
    return out


def condition_study(
    problem: ProblemSpec,
    grids: Sequence,
    eps_list: Iterable[float],
    seed: int = 0,
    variant: Variant = Variant.AP2PRIME,
    workers: int = 1,
) -> StudyReport:
    """Condition estimates of the P matrix and of the bordered fluctuation matrix."""
    cells = [(float(e), gspec) for gspec in grids for e in eps_list]

    def run(cell):
        eps, gspec = cell
        p = problem.with_eps(eps)
        g = _as_grid(p, gspec)
        disc = Discretization(p, g)
        out = []
        for scheme, m in (("P", p_matrix(disc)), ("AP", bordered_matrix(disc, variant))):
            c = cond_estimate(m, seed=seed)
            out.append(dict(scheme=scheme, eps=eps, Nx=g.Nx, Nz=g.Nz, cond=c.value,
                            converged=c.converged, singular=c.singular))
        return out

    rows = [r for rs in _map(run, cells, workers) for r in rs]
    cols = ("scheme", "eps", "Nx", "Nz", "cond", "converged", "singular")
    rep = StudyReport("condition", cols, rows, _metadata(problem, seed=seed, tol=1e-2))
    return rep.sort("Nx", "Nz", "scheme", "eps")


def plateau_iteration(errors: Sequence[float], rel: float = 1e-2) -> int:
    """First index from which every later error stays within ``rel`` of the final one."""
    e = np.asarray(errors, dtype=float)
    if e.size == 0:
        raise ValueError("empty error history")
    off = np.abs(e - e[-1]) > rel * abs(e[-1])
    bad = np.flatnonzero(off)
    return int(bad[-1] + 1) if bad.size else 0


def iteration_study(
    problem: ProblemSpec,
    eps: float,
    grid,
    opts: APOptions | None = None,
) -> StudyReport:
    """Per-iteration errors of the mean and fluctuation iterates against the exact parts.

    Row ``iteration=0`` is the initial state (zero mean, initial fluctuation);
    ``update`` is the star-norm update of the fluctuation (empty at 0).
    """
    p = problem.with_eps(eps)
    g = _as_grid(p, grid)
    mean_e, fluct_e = exact_parts(p)
    b = p.bindings()
    mean_x = interpolate(g, mean_e, b, dim=1)
    fluct_x = interpolate(g, fluct_e, b)
    hist: list[tuple[int, float, float]] = []

    def cb(k, beta, alpha):
        hist.append((k, discrete_norm(g, beta - mean_x, "grid_l2"), discrete_norm(g, alpha - fluct_x, "grid_l2")))

    res = ap_solve(p, g, opts, callback=cb)
    cols = ("scheme", "eps", "Nx", "Nz", "iteration", "mean_err", "fluct_err", "update")
    rep = StudyReport("iteration", cols, metadata=_metadata(p, converged=res.converged, stalled=res.stalled))
    for k, em, ef in hist:
        rep.add(scheme="AP", eps=float(eps), Nx=g.Nx, Nz=g.Nz, iteration=k, mean_err=em, fluct_err=ef,
                update=res.trace[k - 1] if k > 0 else None)
    rep.metadata["plateau"] = max(plateau_iteration(rep.column("mean_err")),
                                  plateau_iteration(rep.column("fluct_err")))
    return rep


def positivity_study(
    a_values: Iterable[float],
    eps_list: Iterable[float],
    grid=(100, 100),
    opts: APOptions | None = None,
) -> StudyReport:
    """Minimum and maximum of the P and AP solutions for a box source."""
    cols = ("scheme", "a", "eps", "Nx", "Nz", "min_value", "max_value", "flag")
    rep = StudyReport("positivity", cols, metadata=_metadata(None, problem="delta_box", domain="[-1,1]^2"))
    for a in a_values:
        for eps in eps_list:
            p = delta_case(a, eps)
            g = _as_grid(p, grid)
            for scheme in ("P", "AP"):
                u, _, flag = _solve(scheme, p, g, opts)
                lo, hi = (math.nan, math.nan) if u is None else (float(u.min()), float(u.max()))
                rep.add(scheme=scheme, a=float(a), eps=float(eps), Nx=g.Nx, Nz=g.Nz,
                        min_value=lo, max_value=hi, flag=flag)
    return rep.sort("a", "scheme", "eps")


def perturbation_study(
    problem: ProblemSpec,
    eps_list: Iterable[float],
    grid,
    noise_amplitude: float = 1e-6,
    seed: int = 0,
) -> StudyReport:
    """Sensitivity of the constrained and unconstrained systems to a load perturbation.

    ``δ`` is a seeded Gaussian vector scaled to ``noise_amplitude·‖v‖₂`` with
    ``v`` the load of the fluctuation system at the converged mean.  The AP row
    reports ``‖Δφ'‖_U / ‖δ‖₂`` for the bordered system; the P row reports
    ``‖Δφ‖_V / ‖δ‖₂`` for ``A0 + εA1`` with the same ``v`` and ``δ``.  With
    ``noise_amplitude = 0`` both solves are compared for an exact match and the
    ratio is reported as ``nan``.
    """
    cols = ("scheme", "eps", "Nx", "Nz", "perturbation_ratio", "flag")
    rep = StudyReport("perturbation", cols, metadata=_metadata(problem, seed=seed, noise=noise_amplitude))
    for eps in eps_list:
        p = problem.with_eps(eps)
        g = _as_grid(p, grid)
        disc = Discretization(p, g)
        res = ap_solve(p, g, disc=disc)
        v = disc.load(LoadVariant.AP2PRIME, mean_part=res.mean)
        rng = np.random.default_rng(seed)
        delta = rng.standard_normal(v.size)
        delta *= noise_amplitude * np.linalg.norm(v) / np.linalg.norm(delta)
        zero = np.zeros(g.Nx)
        n2 = g.n_dofs_2d
        lu_b = Factorization(bordered_matrix(disc))
        lu_p = Factorization(p_matrix(disc))
        a0, a1 = lu_b.solve(np.concatenate([v, zero]))[:n2], lu_b.solve(np.concatenate([v + delta, zero]))[:n2]
        q0, q1 = lu_p.solve(v), lu_p.solve(v + delta)
        nd = float(np.linalg.norm(delta))
        for scheme, d, norm in (("AP", a1 - a0, "U"), ("P", q1 - q0, "V")):
            if nd == 0.0:
                same = bool(np.array_equal(d, np.zeros_like(d)))
                rep.add(scheme=scheme, eps=float(eps), Nx=g.Nx, Nz=g.Nz, perturbation_ratio=math.nan,
                        flag="exact_match" if same else "mismatch")
            else:
                r = discrete_norm(g, d, norm, eps=float(eps)) / nd
                rep.add(scheme=scheme, eps=float(eps), Nx=g.Nx, Nz=g.Nz, perturbation_ratio=r, flag="")
    return rep.sort("scheme", "eps")


def valid_range(report: StudyReport, Nx: int, factor: float = 2.0) -> list[float]:
    """eps values where both the P and L errors are within ``factor`` of the AP error."""
    out = []
    for eps in sorted({r["eps"] for r in report.select(Nx=Nx)}, reverse=True):
        err = {r["scheme"]: r["linf_err"] for r in report.select(Nx=Nx, eps=eps)}
        if all(err[s] <= factor * err["AP"] for s in ("P", "L")):
            out.append(eps)
    return out
