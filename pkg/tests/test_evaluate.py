import json

import numpy as np
import pytest

from mvgame.errors import ConfigError
from mvgame.evaluate import (CheckEntry, VerificationReport, cost_decomposition_test,
                             decoupling_terminal_residual, estimate_cost, fixed_point_check,
                             perturbation_optimality_test, riccati_check, riccati_oracle,
                             stationarity_check, variance_decomposition_test)
from mvgame.game import solve_follower_equilibrium, solve_leader
from mvgame.model import make_spec
from mvgame.sde import open_loop_law, sample_noise, simulate_truth


def test_cost_of_deterministic_run():
    sp = make_spec(N=100, B1=[[1.0]], B2=[[2.0]], R1=[[2.0]], R2=[[0.5]], x0=[0.5],
                   g1=[1.0], g2=[-1.0], theta1=3.0)
    b = simulate_truth(sp, open_loop_law(sp, u1=0.4, u2=0.1), sample_noise(sp, 0, 10))
    xT = 0.5 + 0.4 + 0.2
    j1 = estimate_cost(b, sp, "J1")
    j2 = estimate_cost(b, sp, "J2")
    assert j1.value == pytest.approx(0.5 * 2.0 * 0.16 + xT, abs=1e-12)
    assert j2.value == pytest.approx(0.5 * 0.5 * 0.01 - xT, abs=1e-12)
    assert j1.variance == pytest.approx(0.0, abs=1e-20) and j1.stderr == pytest.approx(0.0, abs=1e-12)
    aux = estimate_cost(b, sp, "aux1", lam=[0.3])
    assert aux.value == pytest.approx(0.16 + 0.3 * xT + 1.5 * xT ** 2, abs=1e-12)


def test_cost_mean_variance_terms():
    # pure noise: X(T) ~ N(0, 0.5^2); J1 = g E X + theta/2 Var X
    sp = make_spec(N=50, C1=[0.5], theta1=2.0, g1=[1.0])
    b = simulate_truth(sp, open_loop_law(sp), sample_noise(sp, 4, 40000))
    j = estimate_cost(b, sp, "J1")
    assert abs(j.value - 0.25) < 3 * j.stderr
    assert j.running == 0.0


def test_unknown_cost_kind(toy):
    b = simulate_truth(toy, open_loop_law(toy), sample_noise(toy, 0, 2))
    with pytest.raises(ConfigError):
        estimate_cost(b, toy, "J3")


@pytest.fixture(scope="module")
def consistent():
    """X-hat = X (no hidden noise for the follower) and Y2 nested in the follower's
    information up to u2, so both splits are exact orthogonal projections."""
    sp = make_spec(N=500, B1=[[1.0]], B2=[[1.0]], C1=[0.3], C2=[0.0], H2=[1.0], x0=[1.0],
                   E1=[("a", 1.0, [0.1], 0.5)], E2=[("b", 1.0, [0.0], 0.5)])
    eq = solve_leader(sp)
    return sp, eq, simulate_truth(sp, eq.law, sample_noise(sp, 1, 40000))


@pytest.mark.parametrize("which", ["follower", "leader"])
def test_splits_on_information_consistent_instance(consistent, which):
    sp, eq, b = consistent
    v = variance_decomposition_test(b, which)
    c = cost_decomposition_test(b, sp, which)
    assert v.passed, v.details
    assert c.passed, c.details


def test_variance_split_residual_is_cross_covariance(toy, toy_eq):
    b = simulate_truth(toy, toy_eq.law, sample_noise(toy, 3, 20000))
    r = variance_decomposition_test(b, "follower")
    X, E = b.terminal("X")[:, 0], b.terminal("Xhat")[:, 0]
    cross = np.cov(E, X - E)[0, 1]
    assert r.statistic == pytest.approx(2 * cross, rel=1e-9)
    assert r.details["se_paired"] <= r.details["se_naive"]


def test_paired_se_matches_bootstrap():
    rng = np.random.default_rng(0)
    sp = make_spec(N=4, C1=[1.0], C2=[0.5], H1=[1.0])
    b = simulate_truth(sp, open_loop_law(sp), sample_noise(sp, 2, 4000), record="terminal")
    r = variance_decomposition_test(b, "follower")
    X, E = b.terminal("X")[:, 0], b.terminal("Xhat")[:, 0]
    boot = []
    for _ in range(300):
        i = rng.integers(0, X.size, X.size)
        x, e = X[i], E[i]
        boot.append(x.var(ddof=1) - e.var(ddof=1) - (x - e).var(ddof=1))
    assert r.details["se_paired"] == pytest.approx(np.std(boot), rel=0.15)


def test_perturbation_coefficients(toy, toy_eq):
    out = perturbation_optimality_test(toy, toy_eq, "follower", seed=5, n_paths=3000)
    out += perturbation_optimality_test(toy, toy_eq, "leader", seed=5, n_paths=3000)
    assert len(out) == 6
    for e in out:
        assert e.passed, (e.name, e.details["a"], e.details["se_a"])
        # every effect of a deterministic direction is deterministic, so b is the running term
        assert e.details["b"] == pytest.approx(e.details["b_running_only"], rel=1e-6)
    # 1/2 int v^2 for v = 1, 2t - 1, cos(pi t)
    assert [round(e.details["b_running_only"], 4) for e in out[:3]] == [0.5, 0.1667, 0.25]


def test_perturbation_resolve_mode_breaks_stationarity(toy, toy_eq):
    # If the follower re-solves its embedding, E X(T) moves one-for-one with int v,
    # so dJ2/deps = int u2 + g2 = -1/2 + 1 = 1/2 along v = 1.
    e = perturbation_optimality_test(toy, toy_eq, "leader", perturbations=[lambda t: np.ones(1)],
                                     seed=5, n_paths=2000, resolve=True)[0]
    assert e.details["a"] == pytest.approx(0.5, abs=3e-3)
    assert not e.passed


def test_perturbation_rejects_degenerate_eps(toy, toy_eq):
    with pytest.raises(ConfigError):
        perturbation_optimality_test(toy, toy_eq, eps=(0.1, 0.1), n_paths=10)


def test_riccati_oracle_values():
    r = riccati_oracle()
    assert r["max_error"] < 1e-8
    assert all(8 <= q <= 32 for q in r["ratios"])
    assert riccati_check().passed


def test_equilibrium_checks(toy, toy_eq):
    assert fixed_point_check(toy_eq).passed
    b = simulate_truth(toy, toy_eq.law, sample_noise(toy, 0, 200), record="full")
    assert stationarity_check(toy_eq, b).passed
    r = decoupling_terminal_residual(toy_eq, b)
    assert r.shape == (200,) and np.sqrt(np.mean(r ** 2)) < 5e-3


def test_follower_only_equilibrium_split():
    # With H1 = 0 and no leader control, X-hat is the exact conditional mean.
    sp = make_spec(N=300, B1=[[1.0]], C1=[0.2], C2=[0.3], x0=[1.0], E2=[("b", 1.0, [0.1], 0.5)])
    fol = solve_follower_equilibrium(sp)
    b = simulate_truth(sp, fol.law, sample_noise(sp, 6, 20000))
    assert variance_decomposition_test(b, "follower").passed


def test_report_serialization():
    rep = VerificationReport(meta={"seed": 1})
    rep.add(CheckEntry("a", "pass", 0.1, 1.0, 10, 1, {"x": np.arange(2)}))
    rep.add(CheckEntry("b", "fail", 2.0, 1.0, 10, 1, {}))
    assert not rep.ok and rep.failed() == ["b"] and rep.names() == ["a", "b"]
    assert rep["a"].passed
    d = json.loads(rep.to_json())
    assert d["checks"][0]["details"]["x"] == [0, 1]
    assert rep.to_json() == rep.to_json()
