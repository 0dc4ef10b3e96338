import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from invpower.engine import (
    TRACE_COLUMNS, EngineConfig, IterationState, rayleigh, read_trace_csv, run, seed, step,
)
from invpower.errors import InvariantViolation, ZeroField
from invpower.grid import Field, normalize_y, write_field_csv, y_norm
from invpower.inner import InnerConfig, solve_inner
from invpower.operators import PAIR_KINDS, apply_B, make_pair, residual
from invpower.oracle import dense_eig_p2

ROUNDING = 64 * np.finfo(float).eps


def _small(kind, p, q):
    return make_pair(kind, 24 if kind != "dirichlet-2d" else 12, p, q)


def test_const_seed():
    pair = make_pair("dirichlet-1d", 4, 2, 2)
    w = seed(pair)
    assert np.all(w.values == w.values[0])
    assert y_norm(w, 2) == pytest.approx(1.0, abs=1e-12)


def test_random_seed_deterministic_and_nonnegative():
    pair = make_pair("dirichlet-2d", 8, 3, 2)
    a, b = seed(pair, "random", 7), seed(pair, "random", 7)
    assert np.array_equal(a.values, b.values)
    assert np.all(a.values >= 0)
    assert not np.array_equal(a.values, seed(pair, "random", 8).values)


def test_file_seed(tmp_path):
    pair = make_pair("dirichlet-1d", 6, 3, 2)
    path = write_field_csv(Field.zeros(pair.grid), tmp_path / "zero.csv")
    with pytest.raises(ZeroField):
        seed(pair, "file", path=path)
    path = write_field_csv(Field(pair.grid, np.arange(1.0, 6.0)), tmp_path / "ramp.csv")
    w = seed(pair, "file", path=path)
    assert y_norm(w, 2) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        seed(pair, "gaussian")


def test_step_from_linear_eigenvector():
    pair = make_pair("dirichlet-1d", 4, 2, 2)
    lam, v = dense_eig_p2(pair)
    st_ = step(pair, v)
    assert st_.lam == pytest.approx(64 * math.sin(math.pi / 8) ** 2, rel=1e-12)
    np.testing.assert_allclose(st_.w.values, v.values, atol=1e-8)
    assert st_.n == 0 and not st_.sign_flipped


@pytest.mark.parametrize("kind", PAIR_KINDS)
@pytest.mark.parametrize("p", [1.5, 3.0])
def test_step_scale_invariance(kind, p):
    pair = _small(kind, p, 2.0)
    w0 = seed(pair, "random", 2)
    w5, _ = normalize_y(5 * w0, 2.0)
    a, b = step(pair, w0), step(pair, w5)
    assert a.lam == pytest.approx(b.lam, rel=1e-12)
    np.testing.assert_allclose(a.w.values, b.w.values, rtol=0, atol=1e-12)


def test_run_matches_dense_at_p2():
    pair = make_pair("dirichlet-1d", 200, 2, 2)
    res = run(pair, seed(pair), EngineConfig(rtol=1e-12))
    lam, _ = dense_eig_p2(pair)
    assert res.converged
    assert abs(res.lam - lam) <= 1e-8 * lam


@pytest.mark.parametrize("kind", PAIR_KINDS)
@pytest.mark.parametrize("p,q", [(1.5, 2.0), (3.0, 3.0), (4.0, 1.0)])
def test_restart_from_converged_is_fixed_point(kind, p, q):
    pair = _small(kind, p, q)
    cfg = EngineConfig()
    first = run(pair, seed(pair, "random", 1), cfg)
    again = run(pair, first.w, cfg)
    assert again.converged and again.iterations <= 2
    assert abs(again.trace.states[0].lam - first.lam) <= cfg.rtol * first.lam


def test_iterates_stay_nonnegative():
    pair = make_pair("dirichlet-1d", 100, 3, 2)
    res = run(pair, seed(pair, "random", 4))
    assert res.converged
    for s in res.trace.states:
        assert s.w.values.min() >= -1e-12


def test_rayleigh_examples():
    pair = make_pair("dirichlet-1d", 40, 2, 2)
    lam, v = dense_eig_p2(pair)
    assert rayleigh(pair, v) == pytest.approx(lam, rel=1e-10)
    w = seed(pair, "random", 3)
    assert rayleigh(pair, 7 * w) == pytest.approx(rayleigh(pair, w), rel=1e-12)
    with pytest.raises(ZeroField):
        rayleigh(pair, Field.zeros(pair.grid))


@pytest.mark.parametrize("kind", PAIR_KINDS)
@pytest.mark.parametrize("p,q", [(1.5, 1.5), (2.0, 2.0), (3.0, 2.0), (4.0, 4.0), (3.0, 1.0)])
@pytest.mark.parametrize("seed_kind", ["const-one", "random"])
def test_converged_run_properties(kind, p, q, seed_kind):
    pair = _small(kind, p, q)
    cfg = EngineConfig()
    res = run(pair, seed(pair, seed_kind, 5), cfg)
    assert res.converged and res.trace.termination == "converged"
    assert res.trace.ledger == []
    assert [s.n for s in res.trace.states] == list(range(res.iterations))
    assert res.residual <= 10 * cfg.rtol * res.lam
    assert abs(rayleigh(pair, res.w) - res.lam) <= cfg.rtol * res.lam
    lams = res.trace.lambdas
    assert np.all(np.diff(lams) <= res.trace.slack)
    # Cauchy decay of the sign-aligned sequence, up to rounding
    d = np.array([s.ynorm_diff for s in res.trace.states])[-10:]
    assert np.all(np.diff(d) <= ROUNDING)
    for s in res.trace.states:
        assert y_norm(s.w, q) == pytest.approx(1.0, abs=1e-10)
        assert s.lam > 0


@pytest.mark.parametrize("p", [1.5, 2.0, 3.0, 4.0])
def test_norm_ratio_identity(p):
    """For q = p, lambda_n equals (|U_n| / |U_{n+1}|)^(p-1) for the unnormalized iterates U."""
    pair = make_pair("dirichlet-1d", 24, p, p)
    res = run(pair, seed(pair, "random", 9))
    # unnormalized norms rebuilt from the per-step |u_{n+1}|_Y
    norms = np.concatenate([[1.0], np.cumprod([s.ynorm_u for s in res.trace.states])])
    ratio = (norms[:-1] / norms[1:]) ** (p - 1)
    np.testing.assert_allclose(ratio, res.trace.lambdas, rtol=1e-12)
    # and against a genuinely unnormalized iteration, for the first few steps
    U = seed(pair, "random", 9)
    prev = y_norm(U, p)
    for s in res.trace.states[:6]:
        f = apply_B(pair, U)
        tol = 1e-13 * float(np.max(np.abs(f.values)))
        U = solve_inner(pair, f, InnerConfig(tolerance=tol), warm_start=None).u
        cur = y_norm(U, p)
        assert (prev / cur) ** (p - 1) == pytest.approx(s.lam, rel=1e-8)
        prev = cur


def test_max_outer_returns_unconverged():
    pair = make_pair("dirichlet-1d", 16, 3, 2)
    res = run(pair, seed(pair, "random", 1), EngineConfig(max_outer=1))
    assert not res.converged and res.trace.termination == "max-outer"
    assert res.iterations == 1


def test_run_requires_unit_seed():
    pair = make_pair("dirichlet-1d", 16, 3, 2)
    with pytest.raises(ValueError):
        run(pair, 2 * seed(pair))


def test_mu_hat_too_high_is_recorded_and_strict_aborts():
    pair = make_pair("dirichlet-1d", 16, 2, 2)
    lam, _ = dense_eig_p2(pair)
    res = run(pair, seed(pair), EngineConfig(mu_hat=2 * lam))
    assert res.trace.ledger and all(e.check == "lower_bound" for e in res.trace.ledger)
    with pytest.raises(InvariantViolation) as exc:
        run(pair, seed(pair), EngineConfig(mu_hat=2 * lam, strict=True))
    assert exc.value.entry.check == "lower_bound"


def test_trace_csv_round_trip():
    pair = make_pair("fractional-1d", 16, 3, 2)
    res = run(pair, seed(pair, "random", 0))
    text = res.trace.to_csv()
    assert text.splitlines()[0] == ",".join(TRACE_COLUMNS)
    rows = read_trace_csv(text)
    assert [r["n"] for r in rows] == list(range(len(rows)))
    assert [r["lambda_n"] for r in rows] == list(res.trace.lambdas)
    assert rows[-1]["lambda_n"] == res.lam


def test_engine_config_validation():
    with pytest.raises(ValueError):
        EngineConfig(rtol=0)
    with pytest.raises(ValueError):
        EngineConfig(max_outer=0)


def test_step_accepts_previous_state():
    pair = make_pair("dirichlet-1d", 16, 3, 2)
    s0 = step(pair, seed(pair))
    s1 = step(pair, s0)
    assert isinstance(s1, IterationState) and s1.n == 1
    assert s1.lam <= s0.lam * (1 + 1e-12)


@settings(max_examples=25)
@given(st.sampled_from(PAIR_KINDS), st.sampled_from([1.5, 2.0, 3.0]), st.integers(0, 10_000),
       st.floats(-10, 10).filter(lambda t: abs(t) > 0.1))
def test_trajectories_scale_invariant(kind, p, rng_seed, t):
    pair = make_pair(kind, 10 if kind != "dirichlet-2d" else 6, p, 2.0)
    w0 = seed(pair, "random", rng_seed)
    wt, _ = normalize_y(t * w0, 2.0)
    a = run(pair, w0, EngineConfig(max_outer=6))
    b = run(pair, wt, EngineConfig(max_outer=6))
    for sa, sb in zip(a.trace.states, b.trace.states):
        assert sa.lam == pytest.approx(sb.lam, rel=1e-12)
        sign = 1.0 if np.dot(sa.w.values, sb.w.values) >= 0 else -1.0
        np.testing.assert_allclose(sa.w.values, sign * sb.w.values, rtol=0, atol=1e-12)
