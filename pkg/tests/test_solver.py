import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from anisoap import grid as gr
from anisoap.fem import Discretization, FormKind, LoadVariant, interpolate
from anisoap.linalg import dense_solve, discrete_norm
from anisoap.problem import ProblemSpec
from anisoap.solver import (
    APOptions,
    Variant,
    ap_solve,
    ap_solve_monolithic,
    bordered_matrix,
    constraint_scale,
    fluct_matrix,
    l_solve,
    p_matrix,
    p_solve,
    solve_scheme,
)
from anisoap.verify import exact_parts, manufactured_case

A_PERP = "2 + x*z^2 + 0.5*x^2*z"
A_Z = "1 + x^3 + 0.5*z*x"
F = "x^2*z - 3*z^3 + x + 1"


def small_problem(eps):
    return ProblemSpec.from_strings((0, 1, 0, 1), eps, A_PERP, A_Z, F)


def dense_p(problem, g):
    d = Discretization(problem, g)
    m = (d.matrix(FormKind.A0) + problem.eps * d.matrix(FormKind.A1)).toarray()
    return dense_solve(m, problem.eps * d.full_load)


def test_zero_source_gives_zero():
    g = gr.build(0, 1, 0, 1, 4, 5)
    p = ProblemSpec.from_strings((0, 1, 0, 1), 0.1, A_PERP, A_Z, "0")
    assert not np.any(p_solve(p, g))
    assert not np.any(l_solve(p, g))
    res = ap_solve(p, g)
    assert not np.any(res.combined) and res.converged


@pytest.mark.parametrize("eps", [10.0, 1.0, 1e-3, 1e-8])
def test_p_matches_dense_oracle(eps):
    g = gr.build(0, 1, 0, 1, 4, 4)
    p = small_problem(eps)
    want = dense_p(p, g)
    d = Discretization(p, g)
    cond = np.linalg.cond(p_matrix(d).toarray())
    np.testing.assert_allclose(p_solve(p, g), want, atol=1e-14 * cond * np.abs(want).max())


@pytest.mark.parametrize("eps", [10.0, 1.0, 1e-2, 1e-5])
def test_ap_reproduces_p_solution(eps):
    # the mean/fluctuation splitting is exact at the discrete level
    g = gr.build(0, 1, 0, 1, 4, z_nodes=[0, 0.3, 0.5, 1])
    p = small_problem(eps)
    want = dense_p(p, g)
    res = ap_solve(p, g)
    assert res.converged or res.stalled
    np.testing.assert_allclose(res.combined, want, atol=1e-9 * np.abs(want).max())


def test_ap_decomposition_properties():
    g = gr.build(0, 1, 0, 1, 5, 6)
    res = ap_solve(small_problem(0.05), g)
    # the fluctuation has zero discrete z-mean
    assert np.abs(gr.z_average(g, res.fluct)).max() <= 1e-12 * np.abs(res.fluct).max()
    np.testing.assert_allclose(gr.z_average(g, res.combined), res.mean, atol=1e-12)
    assert res.constraint_residual <= 1e-13 * np.linalg.norm(res.fluct)


def test_z_constant_data_gives_mean_only():
    g = gr.build(0, 2, 0, 1, 9, 7)
    p = ProblemSpec.from_strings((0, 2, 0, 1), 1e-3, "1 + x^2", "1 + x*z", "sin(x) + 2")
    res = ap_solve(p, g)
    mean = l_solve(p, g)
    assert np.abs(res.fluct).max() <= 1e-12 * np.abs(mean).max()
    np.testing.assert_allclose(res.mean, mean, rtol=1e-12, atol=1e-12 * np.abs(mean).max())
    np.testing.assert_allclose(p_solve(p, g), gr.expand_mean(g, mean), atol=1e-10 * np.abs(mean).max())


@pytest.mark.parametrize("eps", [1.0, 1e-8])
@pytest.mark.parametrize("variant", [Variant.AP2PRIME, Variant.AP2])
def test_iteration_matches_monolithic(eps, variant):
    p = manufactured_case(eps)
    g = gr.build(0, 10, 0, 10, 20, 20)
    it = ap_solve(p, g, APOptions(variant=variant))
    mono = ap_solve_monolithic(p, g, variant)
    scale = np.abs(mono.combined).max()
    np.testing.assert_allclose(it.combined, mono.combined, atol=1e-9 * scale)
    # the multiplier vanishes in exact arithmetic; both routes leave round-off
    # only, measured as a backward error of the fluctuation equation
    d = Discretization(p, g)
    k = fluct_matrix(d, variant)
    b_norm = abs(d.matrix(FormKind.B)).sum(axis=1).max()
    for r in (it, mono):
        scale = abs(k).sum(axis=1).max() * np.linalg.norm(r.fluct) + r.load_norm
        assert b_norm * np.linalg.norm(r.multiplier) <= 1e-9 * scale


def test_variants_agree():
    p = manufactured_case(1e-4)
    g = gr.build(0, 10, 0, 10, 20, 20)
    a = ap_solve(p, g, APOptions(variant="ap2prime"))
    b = ap_solve(p, g, APOptions(variant="ap2"))
    c = ap_solve(p, g, APOptions(variant="ap2", constraint="coercive"))
    scale = np.abs(a.combined).max()
    np.testing.assert_allclose(b.combined, a.combined, atol=1e-9 * scale)
    np.testing.assert_allclose(c.combined, a.combined, atol=1e-9 * scale)


def test_bordered_matrix_symmetric_for_ap2prime():
    d = Discretization(small_problem(0.1), gr.build(0, 1, 0, 1, 4, 5))
    m = bordered_matrix(d, Variant.AP2PRIME)
    assert abs(m - m.T).max() <= 1e-13 * abs(m).max()
    n = d.grid.n_dofs_2d
    s = constraint_scale(d)
    np.testing.assert_allclose(m[:n, n:].toarray(), s * d.matrix(FormKind.B).toarray())


def test_bordered_conditioning_is_eps_uniform():
    from anisoap.linalg import cond_estimate

    g = gr.build(0, 10, 0, 10, 16, 16)
    conds = [cond_estimate(bordered_matrix(Discretization(manufactured_case(e), g))).value
             for e in (1.0, 1e-4, 1e-8)]
    assert max(conds) / min(conds) < 10


def test_p_conditioning_grows_as_eps_shrinks():
    from anisoap.linalg import cond_estimate

    g = gr.build(0, 10, 0, 10, 16, 16)
    conds = [cond_estimate(p_matrix(Discretization(manufactured_case(e), g))).value for e in (1.0, 1e-4, 1e-8)]
    assert conds[0] < conds[1] < conds[2]


def test_stall_is_flagged():
    p = manufactured_case(1.0)
    g = gr.build(0, 10, 0, 10, 30, 30)
    res = ap_solve(p, g, APOptions(tol=1e-30, max_iters=500))
    assert res.stalled and not res.converged
    assert res.iterations < 500


def test_iteration_cap_returns_unconverged():
    p = manufactured_case(1.0)
    g = gr.build(0, 10, 0, 10, 10, 10)
    res = ap_solve(p, g, APOptions(max_iters=2))
    assert not res.converged and not res.stalled and res.iterations == 2 and len(res.trace) == 2


def test_callback_sequence():
    p = small_problem(0.1)
    g = gr.build(0, 1, 0, 1, 3, 4)
    seen = []
    res = ap_solve(p, g, callback=lambda k, m, f: seen.append((k, m.copy(), f.copy())))
    assert [k for k, _, _ in seen] == list(range(res.iterations + 1))
    assert not np.any(seen[0][1]) and not np.any(seen[0][2])


def test_initial_guess_used():
    p = small_problem(0.1)
    g = gr.build(0, 1, 0, 1, 3, 4)
    res = ap_solve(p, g)
    again = ap_solve(p, g, APOptions(initial_fluct=res.fluct))
    assert again.iterations <= 2


@pytest.mark.parametrize(
    "kw",
    [dict(tol=0.0), dict(max_iters=0), dict(constraint="penalty"), dict(constraint="coercive"), dict(variant="ap3")],
)
def test_options_validation(kw):
    with pytest.raises(ValueError):
        APOptions(**kw)


def test_nonpositive_eps_rejected():
    g = gr.build(0, 1, 0, 1, 2, 2)
    for solver in (p_solve, ap_solve):
        with pytest.raises(ValueError, match="eps"):
            solver(small_problem(0.0), g)


def test_solve_scheme_dispatch():
    p = small_problem(0.1)
    g = gr.build(0, 1, 0, 1, 3, 4)
    u, res = solve_scheme("L", p, g)
    assert res is None
    np.testing.assert_allclose(gr.fluctuation(g, u), 0.0, atol=1e-15)
    u, res = solve_scheme("ap", p, g)
    assert res is not None and res.converged
    with pytest.raises(ValueError):
        solve_scheme("q", p, g)


def test_l_error_linear_in_eps():
    # the modelling error of the limit solution is first order in eps and
    # dominates the eps-independent discretization error for eps >= 1
    g = gr.build(0, 10, 0, 10, 50, 50)
    errs = {}
    for eps in (10.0, 1.0):
        p = manufactured_case(eps)
        u = gr.expand_mean(g, l_solve(p, g))
        exact = interpolate(g, p.exact, p.bindings())
        errs[eps] = discrete_norm(g, u - exact, "grid_l2")
        _, fluct_e = exact_parts(p)
        fluct = interpolate(g, fluct_e, p.bindings())
        assert errs[eps] >= 0.9 * discrete_norm(g, fluct, "grid_l2")
    assert errs[10.0] / errs[1.0] == pytest.approx(10.0, rel=1e-2)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 5), st.integers(2, 6), st.floats(-6, 1))
def test_ap_equals_p_property(nx, nz, log_eps):
    g = gr.build(0, 1, 0, 1, nx, nz)
    p = small_problem(10 ** log_eps)
    want = dense_p(p, g)
    res = ap_solve(p, g)
    np.testing.assert_allclose(res.combined, want, atol=1e-8 * max(np.abs(want).max(), 1e-300))
