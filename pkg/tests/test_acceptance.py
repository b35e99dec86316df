"""Acceptance criteria 1-11 at their stated settings (toy instance, seed 42)."""
import numpy as np
import pytest

from mvgame.cli import main
from mvgame.evaluate import (cost_decomposition_test, decoupling_check, filter_equivalence_check,
                             fixed_point_check, innovation_check, lambda_check, lambda_instance,
                             mean_consistency_test, perturbation_optimality_test, riccati_check,
                             stationarity_check, variance_decomposition_test)
from mvgame.game import solve_follower_equilibrium, solve_leader
from mvgame.model import make_spec
from mvgame.sde import PathBundle, sample_noise, simulate_chunk, simulate_truth

SEED = 42


@pytest.fixture(scope="module")
def big_bundle(toy, toy_eq):
    return simulate_truth(toy, toy_eq.law, sample_noise(toy, SEED, 100_000))


def test_c01_riccati_oracle(criterion):
    e = riccati_check(tol=1e-8, band=(8.0, 32.0))
    d = e.details
    ok = criterion("1 Riccati oracle", e.passed,
                   f"max err {d['max_error']:.2e} (tol 1e-8), ratios {[round(r, 2) for r in d['ratios']]}")
    assert ok


def test_c02_embedding_fixed_points(criterion, toy_eq, big_bundle):
    fp = fixed_point_check(toy_eq, tol=1e-6)
    mc = mean_consistency_test(toy_eq, big_bundle, k=3)
    r = fp.details["residuals"]
    ok = criterion("2 embedding fixed points", fp.passed and mc.passed,
                   f"residuals {r['lambda1']:.1e}, {r['lambda2']:.1e} (tol 1e-6); "
                   f"worst mean z {mc.statistic:.2f} over 1e5 paths (tol 3)")
    assert ok


def _split_line(entries):
    return "; ".join(f"{e.name.split('_')[-1]} resid {e.statistic:+.2e} vs 3SE {e.tolerance:.2e}"
                     for e in entries)


def test_c03_orthogonal_decomposition(criterion, big_bundle):
    es = [variance_decomposition_test(big_bundle, w, k=3) for w in ("follower", "leader")]
    ok = criterion("3 orthogonal decomposition", all(e.passed for e in es), _split_line(es))
    assert ok, [e.details for e in es]


def test_c04_cost_decomposition(criterion, toy, big_bundle):
    es = [cost_decomposition_test(big_bundle, toy, w, k=3) for w in ("follower", "leader")]
    ok = criterion("4 cost decomposition", all(e.passed for e in es), _split_line(es))
    assert ok, [e.details for e in es]


def test_c03_c04_information_consistent_instance(criterion):
    # Diagnostic companion to 3 and 4: with C2 = 0 and no hidden jumps the
    # follower sees X exactly and the same splits hold.
    sp = make_spec(N=1000, B1=[[1.0]], B2=[[1.0]], C1=[0.3], C2=[0.0], H2=[1.0], x0=[1.0],
                   E1=[("a", 1.0, [0.1], 0.5)], E2=[("b", 1.0, [0.0], 0.5)])
    eq = solve_leader(sp)
    b = simulate_truth(sp, eq.law, sample_noise(sp, SEED, 100_000))
    es = [variance_decomposition_test(b, w) for w in ("follower", "leader")]
    es += [cost_decomposition_test(b, sp, w) for w in ("follower", "leader")]
    ok = criterion("3/4 diagnostic (C2 = 0, D2 = 0 instance)", all(e.passed for e in es),
                   f"worst |resid|/3SE {max(abs(e.statistic) / e.tolerance for e in es):.2f}")
    assert ok


def test_c05_stationarity(criterion, toy, toy_eq):
    noise = sample_noise(toy, SEED, 10_000)
    worst = 0.0
    for start in range(0, 10_000, 1000):
        data = simulate_chunk(toy, toy_eq.law, noise, start, start + 1000, "full")
        data.pop("_c1", None), data.pop("_c2", None)
        b = PathBundle(toy.grid, 1000, data, SEED, noise.digest, toy.digest, "full")
        worst = max(worst, stationarity_check(toy_eq, b).statistic)
    ok = criterion("5 stationarity", worst <= 1e-10,
                   f"max residual {worst:.1e} over 1e4 paths x 1001 nodes (tol 1e-10)")
    assert ok


def test_c06_perturbation(criterion, toy, toy_eq):
    noise = sample_noise(toy, SEED, 20_000)
    es = []
    for player in ("follower", "leader"):
        es += perturbation_optimality_test(toy, toy_eq, player, eps=(-0.1, -0.05, 0.05, 0.1),
                                           n_paths=20_000, noise=noise)
    worst = max(abs(e.details["a"]) / (3 * e.details["se_a"]) for e in es)
    minb = min(e.details["b"] for e in es)
    ok = criterion("6 perturbation optimality", all(e.passed for e in es),
                   f"6 direction/player pairs, worst |a|/3SE(a) {worst:.2f}, min b {minb:.3f}")
    assert ok, [(e.name, e.details["a"], e.details["se_a"], e.details["b"]) for e in es]


def test_c07_decoupling(criterion, toy):
    e = decoupling_check(toy, SEED, n_paths=1000, band=(1.5, 3.0))
    d = e.details
    ok = criterion("7 decoupling residual", e.passed,
                   f"RMS {d['coarse']['rms']:.3e} -> {d['fine']['rms']:.3e}, ratio {d['ratio']:.3f} "
                   f"(band 1.5-3)")
    assert ok


def test_c08_filter_equivalence(criterion, toy, toy_eq):
    e = filter_equivalence_check(toy, toy_eq.law, SEED, n_obs_paths=50, particles=(1000, 4000))
    d = e.details
    ok = criterion("8 filter equivalence", e.passed,
                   f"RMS {d['rms'][-1]:.2e} vs 3 PF-SE {3 * d['rms_se'][-1]:.2e}, "
                   f"ratio {d['ratios'][0]:.2f} (band 1.6-2.5)")
    assert ok


def test_c09_innovations(criterion, toy, toy_eq):
    b = simulate_truth(toy, toy_eq.law, sample_noise(toy, SEED, 10_000))
    es = [innovation_check(b, "follower"), innovation_check(b, "leader")]
    inst = lambda_instance(toy)
    fol = solve_follower_equilibrium(inst)
    bf = simulate_truth(inst, fol.law, sample_noise(inst, SEED, 10_000))
    es.append(innovation_check(bf, "follower"))
    ok = criterion("9 innovation diagnostics", all(e.passed for e in es),
                   "worst z " + ", ".join(f"{e.statistic:.2f}" for e in es)
                   + " (follower, leader, follower with H1 != 0; tol 3)")
    assert ok


def test_c10_lambda_martingale(criterion, toy):
    e = lambda_check(toy, SEED, n_obs_paths=100, n_particles=2000)
    reg = e.details["regression"][0]
    ok = criterion("10 Lambda martingale and gains", e.passed,
                   f"k1 {reg['k1_recovered']:.5f} vs {reg['k1_formula_mean']:.5f}, worst z {e.statistic:.2f} (tol 3)")
    assert ok


def test_c11_determinism(criterion, problems_dir, tmp_path):
    prob = problems_dir / "toy_1d.json"
    for d in ("a", "b"):
        assert main(["synthesize", str(prob), "--out", str(tmp_path / d)]) == 0
        main(["verify", str(prob), "--seed", str(SEED), "--dt", "0.01", "--paths", "4000",
              "--particles", "1000", "--out", str(tmp_path / d)])
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
            for f in ("gains.csv", "lambda.json", "report.json")}
    ok = criterion("11 determinism", all(same.values()),
                   "byte-identical reruns: " + ", ".join(f"{k} {v}" for k, v in same.items()))
    assert ok
