import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from anisoap import grid as gr
from anisoap import expr as ex
from anisoap.fem import interpolate
from anisoap.linalg import (
    Factorization,
    NormKind,
    SingularMatrixError,
    cond_estimate,
    dense_solve,
    discrete_norm,
    factor,
    solve,
    to_csr,
)


def test_identity_solve():
    f = factor(sp.identity(5, format="csr"))
    b = np.arange(5.0)
    np.testing.assert_array_equal(solve(f, b), b)


def test_needs_pivoting():
    m = np.array([[0.0, 1.0], [1.0, 0.0]])
    np.testing.assert_allclose(solve(factor(m), [2.0, 3.0]), [3.0, 2.0], rtol=1e-15)
    np.testing.assert_allclose(dense_solve(m, [2.0, 3.0]), [3.0, 2.0], rtol=1e-15)


def test_random_systems_match_dense_oracle():
    rng = np.random.default_rng(11)
    for _ in range(200):
        n = int(rng.integers(2, 40))
        dens = rng.uniform(0.1, 0.5)
        m = sp.random(n, n, density=dens, random_state=rng, format="csr") + sp.diags(rng.uniform(1, 3, n))
        b = rng.standard_normal(n)
        x = Factorization(m).solve(b)
        want = dense_solve(m, b)
        np.testing.assert_allclose(x, want, rtol=1e-9, atol=1e-11 * np.abs(want).max())


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 25), st.integers(0, 10**6))
def test_residual_small(n, seed):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((n, n)) + n * np.eye(n)
    b = rng.standard_normal(n)
    x = Factorization(m).solve(b)
    assert np.linalg.norm(m @ x - b) <= 1e-12 * (np.linalg.norm(m) * np.linalg.norm(x) + np.linalg.norm(b))


def test_singular_reports_row():
    m = sp.csr_matrix(np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 2.0]]))
    with pytest.raises(SingularMatrixError) as info:
        Factorization(m)
    assert info.value.row == 1
    with pytest.raises(SingularMatrixError) as info:
        dense_solve(m, np.ones(3))
    assert info.value.row == 1


def test_structurally_fine_but_singular():
    m = np.array([[1.0, 2.0], [2.0, 4.0]])
    with pytest.raises(SingularMatrixError):
        Factorization(m)


def test_shape_errors():
    with pytest.raises(ValueError):
        Factorization(np.ones((2, 3)))
    with pytest.raises(ValueError):
        Factorization(np.eye(3)).solve(np.ones(2))


def test_to_csr_sorted_unique():
    m = sp.coo_matrix(([1.0, 2.0, 3.0], ([0, 0, 0], [2, 0, 2])), shape=(1, 3))
    c = to_csr(m)
    assert c.has_canonical_format
    np.testing.assert_array_equal(c.toarray(), [[2.0, 0.0, 4.0]])


def test_cond_of_diagonal():
    d = np.logspace(0, 12, 40)
    est = cond_estimate(sp.diags(d))
    assert est.converged and not est.singular
    assert est.value == pytest.approx(1e12, rel=2e-2)


def test_cond_of_known_spd():
    # 1D Laplacian: cond = cot^2(pi / (2(n+1)))
    n = 60
    m = sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1])
    want = 1 / np.tan(np.pi / (2 * (n + 1))) ** 2
    assert cond_estimate(m, tol=1e-6).value == pytest.approx(want, rel=1e-2)


def test_cond_singular():
    est = cond_estimate(sp.diags([1.0, 0.0, 2.0]))
    assert est.singular and est.value == np.inf


def test_cond_cap_flags_non_convergence():
    d = np.linspace(1, 1.001, 50)
    est = cond_estimate(sp.diags(d), tol=1e-16, max_iter=3)
    assert not est.converged


def test_grid_norms_examples():
    g = gr.build(0, 1, 0, 1, 2, 3)
    u = np.ones(g.n_dofs_2d)
    # 6 unknowns among 4*3 = 12 grid points
    assert discrete_norm(g, u, NormKind.GRID_L2) == pytest.approx(np.sqrt(6 / 12), rel=1e-15)
    assert discrete_norm(g, -3 * u, "grid_linf") == 3.0
    assert discrete_norm(g, np.zeros(g.n_dofs_2d), "U") == 0.0
    assert discrete_norm(g, np.array([3.0, 4.0]), "grid_l2") == pytest.approx(5 / 2, rel=1e-15)


def test_energy_norms_closed_form():
    g = gr.build(0, 3, 0, 2, 63, 64)
    Lx, Lz = 3.0, 2.0
    u = interpolate(g, ex.parse("sin(2*pi*x/Lx)*cos(2*pi*z/Lz)"), {"Lx": Lx, "Lz": Lz})
    u_sq = (2 * np.pi / Lz) ** 2 * Lx * Lz / 4
    assert discrete_norm(g, u, "U") ** 2 == pytest.approx(u_sq, rel=1e-2)
    eps = 0.3
    v_sq = u_sq + eps * (2 * np.pi / Lx) ** 2 * Lx * Lz / 4
    assert discrete_norm(g, u, "V", eps=eps) ** 2 == pytest.approx(v_sq, rel=1e-2)


def test_u_norm_vanishes_on_z_constants():
    g = gr.build(0, 1, 0, 1, 4, 5)
    u = gr.expand_mean(g, np.arange(1.0, 5.0))
    assert discrete_norm(g, u, "U") == pytest.approx(0.0, abs=1e-12)
    assert discrete_norm(g, u, "V", eps=1.0) > 0


def test_norm_errors():
    g = gr.build(0, 1, 0, 1, 2, 3)
    with pytest.raises(ValueError):
        discrete_norm(g, np.ones(5), "grid_l2")
    with pytest.raises(ValueError):
        discrete_norm(g, np.ones(2), "U")
    with pytest.raises(ValueError):
        discrete_norm(g, np.ones(6), "V")
    with pytest.raises(ValueError):
        discrete_norm(g, np.ones(6), "star")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(["grid_l2", "grid_linf", "U"]))
def test_norm_axioms(seed, kind):
    g = gr.build(0, 1, 0, 2, 3, 4)
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, g.n_dofs_2d))
    c = rng.uniform(-5, 5)
    na, nb = discrete_norm(g, a, kind), discrete_norm(g, b, kind)
    assert discrete_norm(g, a + b, kind) <= na + nb + 1e-12
    assert discrete_norm(g, c * a, kind) == pytest.approx(abs(c) * na, rel=1e-12, abs=1e-14)
