import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from invpower.errors import GridMismatch, InvalidExponent, KindMismatch, ZeroField
from invpower.grid import DualVector, Field, build_grid, fractional_kernel, pairing, x_norm, y_norm
from invpower.operators import (
    PAIR_KINDS, apply_A, apply_B, check_hypotheses, energy_values, make_pair, parse_kind, residual,
)
from invpower.oracle import dense_eig_p2


def _pair(kind, p, q=2.0, M=9):
    return make_pair(kind, M if kind != "dirichlet-2d" else 6, p, q)


def _rand(pair, seed):
    return Field(pair.grid, np.random.default_rng(seed).standard_normal(pair.grid.n_nodes))


def test_parse_kind():
    assert parse_kind("dirichlet-2d") == ("dirichlet", 2)
    assert parse_kind("dirichlet", 2) == ("dirichlet", 2)
    assert parse_kind("Steklov-1D") == ("steklov", 1)
    with pytest.raises(KindMismatch):
        parse_kind("dirichlet-2d", 1)
    with pytest.raises(KindMismatch):
        parse_kind("dirichlet-xd")


def test_make_pair_validates_exponents():
    with pytest.raises(InvalidExponent):
        make_pair("dirichlet-2d", 8, 1.5, 7)
    with pytest.raises(InvalidExponent):
        make_pair("fractional-1d", 8, 1.5, 2, s=1.5)
    assert make_pair("fractional-1d", 8, 2, 2).s == 0.5


def test_apply_B_examples():
    pair = make_pair("dirichlet-1d", 4, 2, 2)
    g = apply_B(pair, Field(pair.grid, [1.0, 1.0, 1.0]))
    np.testing.assert_allclose(g.values, [0.25, 0.25, 0.25], rtol=1e-15)
    pair3 = make_pair("dirichlet-1d", 4, 2, 3)
    g = apply_B(pair3, Field(pair3.grid, [-2.0, 0.0, 1.0]))
    assert g.values[0] == pytest.approx(-4 * 0.25, rel=1e-15)
    assert g.values[1] == 0.0


def test_apply_B_zero_entries_for_small_q():
    pair = make_pair("dirichlet-1d", 4, 2, 1)
    g = apply_B(pair, Field(pair.grid, [0.0, -3.0, 2.0]))
    np.testing.assert_array_equal(g.values, [0.0, -0.25, 0.25])


def test_apply_B_steklov_lives_on_boundary():
    pair = make_pair("steklov-1d", 4, 2, 3)
    g = apply_B(pair, Field(pair.grid, [2.0, 5.0, 5.0, 5.0, -1.0]))
    np.testing.assert_allclose(g.values, [4.0, 0.0, 0.0, 0.0, -1.0])


def test_apply_B_homogeneity(rng):
    for kind in PAIR_KINDS:
        for q in (1.0, 1.5, 2.0, 3.5):
            pair = _pair(kind, 2.0, q)
            w = _rand(pair, 1)
            t = -2.0
            lhs = apply_B(pair, t * w).values
            rhs = abs(t) ** (q - 2) * t * apply_B(pair, w).values
            np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=0)


def test_apply_A_p2_tridiagonal(rng):
    M = 12
    pair = make_pair("dirichlet-1d", M, 2, 2)
    h = 1.0 / M
    n = M - 1
    T = (np.diag(2 * np.ones(n)) - np.diag(np.ones(n - 1), 1) - np.diag(np.ones(n - 1), -1)) / h
    for _ in range(5):
        u = rng.standard_normal(n)
        np.testing.assert_allclose(apply_A(pair, Field(pair.grid, u)).values, T @ u, rtol=1e-12, atol=1e-12)


def test_apply_A_p2_2d_five_point(rng):
    M = 7
    pair = make_pair("dirichlet-2d", M, 2, 2)
    n = M - 1
    T = sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1])
    L = (sp.kron(T, sp.identity(n)) + sp.kron(sp.identity(n), T)).toarray()  # h^2 * (1/h^2) stencil
    u = rng.standard_normal(n * n)
    np.testing.assert_allclose(apply_A(pair, Field(pair.grid, u)).values, L @ u, rtol=1e-12, atol=1e-12)


def test_apply_A_zero_and_pairing_identity(rng):
    for kind in PAIR_KINDS:
        pair = _pair(kind, 3.0)
        assert np.all(apply_A(pair, Field.zeros(pair.grid)).values == 0)
        u = _rand(pair, 7)
        lhs = pairing(apply_A(pair, u), u)
        assert lhs == pytest.approx(x_norm(u, 3.0, s=pair.s) ** 3, rel=1e-10)


def test_operator_grid_mismatch():
    pair = make_pair("dirichlet-1d", 4, 2, 2)
    other = Field.zeros(build_grid(1, 5, "dirichlet"))
    with pytest.raises(GridMismatch):
        apply_A(pair, other)
    with pytest.raises(GridMismatch):
        apply_B(pair, other)


def test_fractional_kernel_symmetric():
    g = build_grid(1, 16, "fractional")
    K, ext = fractional_kernel(g, 1.5, 0.5)
    assert np.array_equal(K, K.T)
    assert np.all(np.diag(K) == 0)
    off = K[~np.eye(K.shape[0], dtype=bool)]
    assert np.all(off > 0) and np.all(ext > 0)


def test_fractional_exterior_shrinks_with_radius():
    # a wider truncation adds more tail and so more energy
    u = np.sin(np.pi * np.arange(1, 16) / 16)
    e = []
    for R in (0.5, 1.0, 2.0):
        pair = make_pair("fractional-1d", 16, 2, 2, R=R)
        e.append(x_norm(Field(pair.grid, u), 2, s=0.5) ** 2)
    assert e[0] < e[1] < e[2]
    assert e[2] - e[1] < e[1] - e[0]


def test_residual_examples():
    pair = make_pair("dirichlet-1d", 32, 2, 2)
    lam, v = dense_eig_p2(pair)
    assert residual(pair, lam, v) <= 1e-10
    bumped = residual(pair, lam + 1, v)
    assert bumped > 0.5 * np.min(np.abs(apply_B(pair, v).values))
    with pytest.raises(ZeroField):
        residual(pair, lam, Field.zeros(pair.grid))


@pytest.mark.parametrize("kind", PAIR_KINDS)
@pytest.mark.parametrize("p", [1.5, 2.0, 3.0, 4.5])
def test_gradient_matches_finite_difference(kind, p):
    pair = _pair(kind, p)
    r = np.random.default_rng(int(10 * p))
    worst = 0.0
    for _ in range(100):
        u = r.standard_normal(pair.grid.n_nodes)
        v = r.standard_normal(pair.grid.n_nodes)
        # energies with 1 < p < 2 are only C^{1,p-1}; a 1e-6 step keeps truncation below the tolerance
        eps = 1e-6 * np.linalg.norm(u) / np.linalg.norm(v)
        fd = (energy_values(pair, u + eps * v) - energy_values(pair, u - eps * v)) / (2 * eps)
        exact = float(np.dot(apply_A(pair, Field(pair.grid, u)).values, v))
        worst = max(worst, abs(fd - exact) / abs(exact))
    assert worst <= 1e-6


@given(st.sampled_from(PAIR_KINDS), st.floats(1.2, 5.0), st.floats(1.0, 5.0), st.integers(0, 2**32 - 1))
def test_pairing_identities(kind, p, q, seed):
    pair = _pair(kind, p, q)
    u = _rand(pair, seed)
    assert pairing(apply_A(pair, u), u) == pytest.approx(x_norm(u, p, s=pair.s) ** p, rel=1e-10)
    assert pairing(apply_B(pair, u), u) == pytest.approx(y_norm(u, q) ** q, rel=1e-10)


@given(st.sampled_from(PAIR_KINDS), st.floats(1.0, 5.0), st.integers(0, 2**32 - 1))
def test_apply_B_sign(kind, q, seed):
    pair = _pair(kind, 2.0, q)
    w = _rand(pair, seed)
    g = apply_B(pair, w).values
    active = g != 0
    assert np.array_equal(np.sign(g[active]), np.sign(w.values[active]))


@given(st.sampled_from(PAIR_KINDS), st.floats(1.2, 5.0), st.integers(0, 2**32 - 1))
def test_apply_A_odd(kind, p, seed):
    pair = _pair(kind, p)
    u = _rand(pair, seed)
    np.testing.assert_allclose(apply_A(pair, -u).values, -apply_A(pair, u).values, rtol=1e-12, atol=0)


def test_A2_equality_case(rng):
    for kind in PAIR_KINDS:
        pair = _pair(kind, 3.0)
        v = _rand(pair, 3)
        u = 2 * v
        lhs = pairing(apply_A(pair, u), v)
        rhs = x_norm(u, 3.0, s=pair.s) ** 2 * x_norm(v, 3.0, s=pair.s)
        assert abs(lhs - rhs) <= 1e-10 * rhs


def test_check_hypotheses_report():
    pair = make_pair("dirichlet-1d", 8, 3.0, 2.0)
    rep = check_hypotheses(pair, n_samples=10, rng_seed=4)
    assert rep.passed
    assert set(rep.results) == {"A1", "B1", "A2", "A2_equality", "B2", "B2_equality", "AB"}
    assert all(r.worst >= 0 for r in rep.results.values())
    again = check_hypotheses(pair, n_samples=10, rng_seed=4)
    assert rep.to_json() == again.to_json()
    with pytest.raises(ValueError):
        check_hypotheses(pair, n_samples=0)


def test_random_pairs_have_strict_slack():
    pair = make_pair("dirichlet-1d", 8, 3.0, 2.0)
    rep = check_hypotheses(pair, n_samples=5, rng_seed=1)
    assert rep.results["A2"].witness["slack"] > 0
