import numpy as np
import pytest

from mvgame.errors import ConfigError
from mvgame.evaluate import stationarity_residuals
from mvgame.game import (feedback_controls, fixed_point_lambda1, follower_reaction, solve_follower,
                         solve_follower_equilibrium, solve_leader)
from mvgame.model import load_problem, make_spec
from mvgame.sde import sample_noise, simulate_truth


@pytest.mark.parametrize("c", [0.0, 0.5, -1.0])
def test_follower_fixed_point_closed_form(toy, c):
    # Mean problem: min 1/2 int u^2 + lam m_T + 1/2 m_T^2, m' = u + c, so
    # u = -(lam + m_T) and m_T = (x0 + c - lam)/2; lam = g - m_T gives lam = 2g - x0 - c.
    sol = solve_follower_equilibrium(toy, u2=c)
    assert sol.lambda1[0] == pytest.approx(1.0 - c, abs=1e-10)
    assert sol.mean.terminal[0] == pytest.approx(c, abs=1e-10)
    assert sol.meta["residual_lambda1"] < 1e-10


def test_follower_phi_bar_is_lambda_at_T(toy):
    P, phi, law = solve_follower(toy, u2=0.0, lambda1=[0.7])
    assert phi.terminal[0] == pytest.approx(0.7)
    # phi' = P phi with P = 1/(2 - t): phi = lam (2 - T) / (2 - t)... i.e. phi(t) = 0.7 / (2 - t)
    assert np.allclose(phi.values[:, 0], 0.7 / (2 - toy.grid.times), atol=1e-10)


def test_leader_equilibrium_closed_form(toy_eq):
    # With lambda1 fixed, m_T = (x0 + V - lambda1)/2 for V = int u2; the leader's mean
    # control is -(lambda2 + m_T)/2. Solving gives m_T = -1/2 and lambda1 = lambda2 = 3/2.
    assert toy_eq.lambda1[0] == pytest.approx(1.5, abs=1e-10)
    assert toy_eq.lambda2[0] == pytest.approx(1.5, abs=1e-10)
    assert toy_eq.mean_terminal()[0] == pytest.approx(-0.5, abs=1e-10)
    c = feedback_controls(toy_eq, 0.0, np.ones(1), np.zeros(1), np.ones(1))
    assert c.u1[0] == pytest.approx(-1.0, abs=1e-10)
    assert c.u2[0] == pytest.approx(-0.5, abs=1e-10)
    r = toy_eq.fixed_point_residuals()
    assert max(r.values()) < 1e-12


def test_uncoupled_lambda(problems_dir):
    sp = load_problem(problems_dir / "uncoupled.json")
    eq = solve_leader(sp)
    # no control enters: E X(T) = x0 = 1, lambda = g - theta x0 = 0
    assert np.allclose(eq.lambda1, 0.0, atol=1e-12) and np.allclose(eq.lambda2, 0.0, atol=1e-12)
    assert max(eq.fixed_point_residuals().values()) <= 1e-12


def test_alpha_terminal_condition(toy_eq):
    n = toy_eq.n
    a1T = toy_eq.alpha1.terminal
    assert np.allclose(a1T[:n, :n], toy_eq.spec.cost.theta2 * np.eye(n))
    assert np.allclose(a1T[:, n:], 0.0) and np.allclose(a1T[n:, :n], 0.0)
    assert np.allclose(toy_eq.alpha2.terminal, np.concatenate([toy_eq.lambda2, toy_eq.lambda1]))


def test_two_dim_stationarity():
    sp = make_spec(n=2, N=200, A=[[0.0, 1.0], [-1.0, -0.1]], B1=[[0.0], [1.0]], B2=[[1.0], [0.3]],
                   C1=[0.1, 0.2], C2=[0.2, 0.0], H2=[1.0, 0.5], x0=[0.5, -0.5],
                   E1=[("a", 1.0, [0.1, 0.0], 0.5)], E2=[("b", 0.5, [0.0, 0.1], 1.0)],
                   g1=[1.0, 0.0], g2=[0.0, 1.0], theta1=2.0)
    eq = solve_leader(sp)
    assert max(eq.fixed_point_residuals().values()) < 1e-9
    b = simulate_truth(sp, eq.law, sample_noise(sp, 0, 50), record="full")
    r = stationarity_residuals(eq, b)
    assert r["follower"] < 1e-10 and r["leader"] < 1e-10


def test_follower_reaction_modes(toy_eq, toy):
    v = np.ones((toy.grid.steps + 1, 1))
    d_fixed, lam_fixed = follower_reaction(toy, toy_eq.P, v)
    d_res, lam_res = follower_reaction(toy, toy_eq.P, v, resolve=True)
    assert np.all(lam_fixed == 0.0)
    # re-solving: m_T = x0 + V - 1 moves one-for-one with V, so delta lambda1 = -1
    assert lam_res[0] == pytest.approx(-1.0, abs=1e-9)
    t = toy.grid.times
    P = toy_eq.P.values[:, 0, 0]
    # fixed lambda1: open-loop change -(1-t)/(2-t); the mean moves by t/2, so the
    # total follower change -P t/2 + delta exo is the constant -1/2
    assert np.allclose(d_fixed[:, 0], -(1 - t) / (2 - t), atol=1e-9)
    assert np.allclose(d_fixed[:, 0] - P * t / 2, -0.5, atol=1e-9)
    # re-solved: open-loop change t/(2-t), mean moves by t, total change 0
    assert np.allclose(d_res[:, 0], t / (2 - t), atol=1e-9)
    assert np.allclose(d_res[:, 0] - P * t, 0.0, atol=1e-9)


def test_feedback_controls_interpolation_flag(toy_eq):
    on = feedback_controls(toy_eq, 0.5, np.ones(1), np.zeros(1), np.ones(1))
    off = feedback_controls(toy_eq, 0.5004, np.ones(1), np.zeros(1), np.ones(1))
    assert not on.interpolated and off.interpolated
    with pytest.raises(ConfigError):
        feedback_controls(toy_eq, 1.5, np.ones(1), np.zeros(1), np.ones(1))


def test_unknown_fixed_point_method(toy):
    with pytest.raises(ConfigError):
        fixed_point_lambda1(toy, method="newton")
