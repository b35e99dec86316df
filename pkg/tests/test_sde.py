import numpy as np
import pytest

from mvgame import kernels
from mvgame.errors import ConfigError, SimulationDivergedError
from mvgame.model import make_spec
from mvgame.sde import open_loop_law, recover_mark_indices, sample_noise, simulate_truth

BACKENDS = kernels.AVAILABLE


def test_noise_is_counter_based(toy):
    a = sample_noise(toy, 7, 20)
    b = sample_noise(toy, 7, 5)
    # path p depends only on (seed, p), not on how many paths were asked for
    assert np.array_equal(a.brownian(2, 4), b.brownian(2, 4))
    ea, eb = a.events(0, 5)[0], b.events(0, 5)[0]
    assert np.array_equal(ea.time, eb.time)
    assert not np.array_equal(a.brownian(0, 1), sample_noise(toy, 8, 1).brownian(0, 1))


def test_coarsen_sums_fine_increments(toy):
    fine = sample_noise(toy.with_steps(2000), 3, 4)
    coarse = fine.coarsen(2)
    w_f = fine.brownian()
    w_c = coarse.brownian()
    assert np.allclose(w_f.reshape(4, 1000, 2, 2).sum(axis=2), w_c, atol=1e-14)


def test_brownian_moments(toy):
    w = sample_noise(toy, 11, 2000).brownian()
    inc = w.reshape(-1, 2) / np.sqrt(toy.grid.dt)
    assert abs(inc.mean()) < 3 / np.sqrt(inc.size)
    assert abs(inc.var() - 1) < 3 * np.sqrt(2 / inc.size)
    corr = np.corrcoef(inc.T)[0, 1]
    assert abs(corr) < 3 / np.sqrt(inc.shape[0])


def test_poisson_counts(toy):
    P = 4000
    e1, _ = sample_noise(toy, 5, P).events()
    counts = np.bincount(e1.path, minlength=P)
    # intensity 1 on [0, 1]: mean and variance 1
    assert abs(counts.mean() - 1.0) < 3 * np.sqrt(1.0 / P)
    assert abs(counts.var() - 1.0) < 0.15
    assert np.all((e1.time > 0) & (e1.time <= 1.0))


def test_mark_recovery():
    sp = make_spec(E1=[("a", 1.0, [0.1], 0.5), ("b", 2.0, [0.3], -1.0)])
    assert recover_mark_indices(sp.E1, [-1.0, 0.5, 0.5]).tolist() == [1, 0, 0]


def test_open_loop_mean_exact():
    sp = make_spec(N=200, B1=[[1.0]], B2=[[2.0]], C1=[0.3], C2=[0.1], x0=[0.5],
                   E1=[("a", 2.0, [0.2], 1.0)], E2=[("b", 1.0, [-0.4], 0.5)])
    law = open_loop_law(sp, u1=0.3, u2=-0.1)
    b = simulate_truth(sp, law, sample_noise(sp, 1, 20000))
    xT = b.terminal("X")[:, 0]
    expect = 0.5 + 0.3 - 0.2
    var = 0.3 ** 2 + 0.1 ** 2 + 2.0 * 0.2 ** 2 + 1.0 * 0.4 ** 2
    assert abs(xT.mean() - expect) < 3 * np.sqrt(var / xT.size)
    assert abs(xT.var() - var) < 4 * var * np.sqrt(2 / xT.size) + 0.01 * var


def test_record_levels(toy, toy_eq):
    nz = sample_noise(toy, 2, 3)
    t = simulate_truth(toy, toy_eq.law, nz)
    f = simulate_truth(toy, toy_eq.law, nz, record="full")
    assert "X" not in t and f["X"].shape == (3, 1001, 1)
    assert np.array_equal(t.terminal("X"), f["X"][:, -1])
    assert f["u1"].shape == (3, 1000, 1) and f["Y1"].shape == (3, 1001)
    with pytest.raises(ConfigError):
        simulate_truth(toy, toy_eq.law, nz, record="everything")


def test_chunking_invariant(toy, toy_eq):
    nz = sample_noise(toy, 9, 10)
    a = simulate_truth(toy, toy_eq.law, nz, chunk_size=3)
    b = simulate_truth(toy, toy_eq.law, nz, chunk_size=10)
    assert np.array_equal(a.terminal("X"), b.terminal("X"))
    assert np.array_equal(a["run2"], b["run2"])


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled kernel not built")
def test_backends_agree():
    sp = make_spec(n=2, N=300, A=[[0.1, 0.5], [-0.3, 0.0]], B1=[[1.0], [0.2]], B2=[[0.0], [1.0]],
                   C1=[0.2, 0.1], C2=[0.0, 0.3], H1=[0.5, -0.2], H2=[0.3, 0.4], h12=[0.1],
                   x0=[1.0, -0.5], E1=[("a", 1.5, [0.1, 0.0], 0.5), ("b", 0.5, [0.0, 0.2], -0.7)],
                   E2=[("c", 1.0, [0.05, 0.05], 0.3)])
    law = open_loop_law(sp, u1=0.2, u2=-0.4)
    nz = sample_noise(sp, 4, 64)
    for rec in ("terminal", "full"):
        a = simulate_truth(sp, law, nz, record=rec, backend="numpy")
        b = simulate_truth(sp, law, nz, record=rec, backend="cython")
        for key in a.data:
            assert np.allclose(a[key], b[key], rtol=1e-12, atol=1e-13), key
    ov = {"u1": np.full((64, 300, 1), 0.7)}
    a = simulate_truth(sp, law, nz, overrides=ov, backend="numpy")
    b = simulate_truth(sp, law, nz, overrides=ov, backend="cython")
    assert np.allclose(a.terminal("X"), b.terminal("X"), rtol=1e-12, atol=1e-13)


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_path_and_step(backend):
    sp = make_spec(N=100, A=[[1e6]], x0=[1.0])
    with pytest.raises(SimulationDivergedError) as ei:
        simulate_truth(sp, open_loop_law(sp), sample_noise(sp, 0, 2), backend=backend)
    assert ei.value.path == 0 and ei.value.step is not None


def test_backend_selection():
    assert kernels.get_backend() in kernels.AVAILABLE
    with pytest.raises(ValueError):
        kernels.set_backend("fortran")
