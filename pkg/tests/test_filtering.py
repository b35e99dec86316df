import numpy as np
import pytest

from mvgame.errors import DegenerateFilterError, UnsupportedModeError
from mvgame.filtering import (FilterState, follower_filter_step, follower_signal_model,
                              innovation_diagnostics, kalman_filter, leader_filter_step,
                              particle_filter, sigma_closure_ode, systematic_resample)
from mvgame.game import solve_follower_equilibrium
from mvgame.model import make_spec
from mvgame.sde import open_loop_law, sample_noise, simulate_truth


def _observed_spec(N=500):
    # X hidden noise C2 = 0.4, observed through H1 = 1 with K1 = 1, no jumps
    return make_spec(N=N, B1=[[1.0]], C2=[0.4], H1=[1.0], x0=[0.2])


def test_sigma_closure_tanh():
    sp = _observed_spec(1000)
    S = sigma_closure_ode(sp).values[:, 0, 0]
    t = sp.grid.times
    assert np.max(np.abs(S - 0.4 * np.tanh(0.4 * t))) < 1e-10


def test_sigma_closure_includes_hidden_jumps():
    sp = make_spec(N=200, C2=[0.0], E2=[("b", 2.0, [0.3], 0.5)])
    S = sigma_closure_ode(sp).values[:, 0, 0]
    # no information about X: S' = nu D^2
    assert np.allclose(S, 2.0 * 0.09 * sp.grid.times, atol=1e-12)


def test_kernel_filter_matches_kalman():
    sp = make_spec(N=400, A=[[-0.3]], B1=[[1.0]], C1=[0.2], C2=[0.3], H1=[0.8], h11=[0.1],
                   x0=[0.5], E1=[("a", 1.0, [0.1], 0.5)], E2=[("b", 1.0, [0.2], 0.4)])
    law = open_loop_law(sp, u1=0.4)
    law = law.with_gains(gain_f=np.einsum("kij,kj->ki", sigma_closure_ode(sp).values,
                                          sp.cells.H1) / sp.cells.K1[:, None] + sp.cells.C1)
    b = simulate_truth(sp, law, sample_noise(sp, 3, 20), record="full")
    model = follower_signal_model(sp, b["u1"], b["u2"])
    mean, cov = kalman_filter(model, np.diff(b["Y1"], axis=1)[..., None], b.jumps[0].astype(float))
    # Euler covariance in the reference, RK4 closure in the kernel: O(dt) apart
    assert np.max(np.abs(mean[..., 0] - b["Xhat"][..., 0])) < 5e-3
    S = sigma_closure_ode(sp).values[:, 0, 0]
    assert np.max(np.abs(cov[:, 0, 0] - S)) < 2e-3


def test_filter_step_replays_kernel():
    sp = _observed_spec(200)
    fol = solve_follower_equilibrium(sp)
    b = simulate_truth(sp, fol.law, sample_noise(sp, 1, 4), record="full")
    sig = sigma_closure_ode(sp).values
    st = FilterState.initial(sp, 4)
    st = FilterState(0, st.estimate, sig[0], None, st.innovation, st.qv)
    dy = np.diff(b["Y1"], axis=1)
    for k in range(sp.grid.steps):
        st = follower_filter_step(sp, st, b["u1"][:, k], b["u2"][:, k], dy[:, k], cov_next=sig[k + 1])
    assert np.allclose(st.estimate, b["Xhat"][:, -1], atol=1e-12)
    assert np.allclose(st.innovation, b["V_T"], atol=1e-12)


def test_leader_step_rejects_H1():
    sp = make_spec(H1=[1.0])
    st = FilterState.initial(sp, 1, costate=np.zeros(1))
    with pytest.raises(UnsupportedModeError):
        leader_filter_step(sp, st, 0.0, 0.0, xi1=np.zeros((1, 1)), xi2=np.zeros((1, 1)),
                           P=np.ones((1, 1)))


def test_systematic_resample_counts():
    rng = np.random.default_rng(0)
    w = rng.random((3, 50))
    w /= w.sum(axis=1, keepdims=True)
    idx = systematic_resample(w, np.array([0.1, 0.5, 0.9]))
    for r in range(3):
        cnt = np.bincount(idx[r], minlength=50)
        assert np.all(cnt >= np.floor(50 * w[r]) - 1e-9)
        assert np.all(cnt <= np.ceil(50 * w[r]) + 1e-9)


def test_particle_filter_tracks_kalman():
    sp = _observed_spec(200)
    law = open_loop_law(sp, u1=0.3)
    b = simulate_truth(sp, law, sample_noise(sp, 5, 6), record="full")
    model = follower_signal_model(sp, b["u1"], b["u2"])
    mean, cov = kalman_filter(model, np.diff(b["Y1"], axis=1)[..., None], b.jumps[0].astype(float))
    run = particle_filter(sp, b, n_particles=3000, seed=1)
    se = np.sqrt(np.maximum(run.cov[..., 0, 0], 1e-12) / run.ess)
    z = np.abs(run.mean[..., 0] - mean[..., 0])[:, 1:] / se[:, 1:]
    assert np.sqrt(np.mean(z ** 2)) < 3
    # cloud variance follows the Kalman covariance
    assert np.mean(np.abs(run.cov[:, -1, 0, 0] - cov[-1, 0, 0])) < 0.3 * cov[-1, 0, 0]


def test_particle_filter_deterministic():
    sp = _observed_spec(50)
    b = simulate_truth(sp, open_loop_law(sp), sample_noise(sp, 2, 2), record="full")
    a = particle_filter(sp, b, n_particles=200, seed=3)
    c = particle_filter(sp, b, n_particles=200, seed=3)
    assert np.array_equal(a.mean, c.mean)


def test_particle_filter_degenerate_raises():
    sp = _observed_spec(20)
    b = simulate_truth(sp, open_loop_law(sp), sample_noise(sp, 2, 1), record="full")
    b.data["Y1"] = b["Y1"].copy()
    b.data["Y1"][0, 5:] = np.nan
    with pytest.raises(DegenerateFilterError):
        particle_filter(sp, b, n_particles=50, seed=0)


def test_innovation_diagnostics_on_brownian_motion():
    rng = np.random.default_rng(1)
    inc = rng.standard_normal((5000, 100)) * np.sqrt(0.01)
    d = innovation_diagnostics(inc, horizon=1.0)
    assert abs(d["terminal_mean"]) < 3 * d["terminal_se"]
    assert abs(d["qv_mean"] - 1.0) < 3 * d["qv_se"]
    assert abs(d["excess_kurtosis"]) < 0.1


def test_toy_innovations(toy, toy_eq):
    b = simulate_truth(toy, toy_eq.law, sample_noise(toy, 21, 4000))
    for key, q in (("V_T", "qv_V"), ("U_T", "qv_U")):
        v, qv = b[key], b[q]
        assert abs(v.mean()) < 3 * v.std(ddof=1) / np.sqrt(v.size)
        assert abs(qv.mean() - 1.0) < 3 * qv.std(ddof=1) / np.sqrt(qv.size)


def test_closures_match_ensemble_moments():
    from mvgame.game import solve_leader
    from mvgame.model import toy_spec
    sp = toy_spec(200)
    eq = solve_leader(sp)
    b = simulate_truth(sp, eq.law, sample_noise(sp, 13, 10000), record="full")
    X, Xh, Xc = b["X"][..., 0], b["Xhat"][..., 0], b["Xcheck"][..., 0]
    pairs = {"Sigma": (X - Xh, X - Xh, eq.sigma.values[:, 0, 0]),
             "Xi1": (X - Xc, X - Xc, eq.xi[1][:, 0, 0]),
             "Xi4": (Xh - Xc, X - Xc, eq.xi[4][:, 0, 0]),
             "Xi6": (Xh - Xc, Xh - Xc, eq.xi[6][:, 0, 0])}
    for name, (u, v, ref) in pairs.items():
        for k in (50, 100, 200):
            prod = u[:, k] * v[:, k]
            se = prod.std(ddof=1) / np.sqrt(prod.size)
            assert abs(prod.mean() - ref[k]) < 3 * se + 1e-4, (name, k, prod.mean(), ref[k], se)
