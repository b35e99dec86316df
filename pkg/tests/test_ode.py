import numpy as np
import pytest

from mvgame.errors import SingularityError
from mvgame.game import solve_leader
from mvgame.model import TimeGrid, load_problem, make_spec, toy_spec
from mvgame.ode import integrate_linear_ode, rk4, solve_riccati_P


def _expm(M):
    """Matrix exponential by eigendecomposition (diagonalizable M only)."""
    w, V = np.linalg.eig(M)
    return (V @ np.diag(np.exp(w)) @ np.linalg.inv(V)).real


def test_scalar_riccati_closed_form():
    sp = make_spec(N=1000, B1=[[1.0]], theta1=1.0)
    P = solve_riccati_P(sp).values[:, 0, 0]
    t = sp.grid.times
    assert np.max(np.abs(P - 1.0 / (2.0 - t))) <= 1e-8
    assert P[-1] == 1.0


@pytest.mark.parametrize("a,b,r,theta", [(0.5, 1.0, 1.0, 2.0), (-1.0, 2.0, 0.5, 1.0)])
def test_scalar_riccati_with_drift(a, b, r, theta):
    # q = 1/p solves q' = 2a q - b^2/r, so q - c decays like exp(-2a(T-t)).
    sp = make_spec(N=1000, A=[[a]], B1=[[b]], R1=[[r]], theta1=theta)
    t = sp.grid.times
    c = b * b / (2 * a * r)
    q = (1 / theta - c) * np.exp(-2 * a * (1 - t)) + c
    P = solve_riccati_P(sp).values[:, 0, 0]
    assert np.max(np.abs(P - 1 / q)) < 1e-9


def test_matrix_riccati_against_hamiltonian():
    A = np.array([[0.3, 1.0], [-0.5, -0.2]])
    B1 = np.array([[1.0], [0.5]])
    R1 = np.array([[2.0]])
    theta = 1.5
    sp = make_spec(n=2, N=500, A=A, B1=B1, R1=R1, theta1=theta)
    S = B1 @ np.linalg.inv(R1) @ B1.T
    M = np.block([[A, -S], [np.zeros((2, 2)), -A.T]])
    P = solve_riccati_P(sp).values
    for k in (0, 123, 250, 499):
        tau = 1.0 - sp.grid.times[k]
        XY = _expm(-M * tau) @ np.vstack([np.eye(2), theta * np.eye(2)])
        ref = XY[2:] @ np.linalg.inv(XY[:2])
        assert np.max(np.abs(P[k] - ref)) < 1e-9
        assert np.allclose(P[k], P[k].T)


def test_rk4_fourth_order():
    g = 10
    errs = []
    for N in (g, 2 * g, 4 * g):
        tr = integrate_linear_ode("forward", np.array([[-1.0]]), np.zeros(1), [1.0], TimeGrid(1.0, N))
        errs.append(abs(tr.terminal[0] - np.exp(-1.0)))
    assert 14 < errs[0] / errs[1] < 18
    assert 14 < errs[1] / errs[2] < 18


def test_backward_boundary_exact():
    tr = integrate_linear_ode("backward", np.array([[2.0]]), np.array([1.0]), [3.0], TimeGrid(1.0, 100))
    assert tr.terminal[0] == 3.0
    # x' = 2x + 1 backward from x(1) = 3: x(t) = 3.5 exp(2(t-1)) - 0.5
    assert tr.initial[0] == pytest.approx(3.5 * np.exp(-2) - 0.5, abs=1e-8)


def test_hermite_interpolation_inside_cell():
    tr = integrate_linear_ode("forward", np.array([[1.0]]), np.zeros(1), [1.0], TimeGrid(1.0, 20))
    assert tr.at(0.5125)[0] == pytest.approx(np.exp(0.5125), rel=1e-7)


def test_blowup_reports_time(problems_dir):
    sp = load_problem(problems_dir / "blowup.json")
    with pytest.raises(SingularityError) as ei:
        solve_riccati_P(sp)
    # P = exp(40 (1 - t)) crosses 1e12 at t = 1 - ln(1e12)/40
    assert ei.value.time == pytest.approx(1 - np.log(1e12) / 40, abs=2e-3)
    assert "t=0.309" in str(ei.value)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_is_singular():
    with pytest.raises(SingularityError):
        rk4(lambda k, t, y: y * y, [1.0], TimeGrid(2.0, 200), "forward", bound=None)


def test_fixed_point_methods_agree():
    sp = toy_spec(100)
    a = solve_leader(sp, method="probe")
    b = solve_leader(sp, method="iterate")
    assert np.allclose(a.lambda1, b.lambda1, atol=1e-8)
    assert np.allclose(a.lambda2, b.lambda2, atol=1e-8)
    assert np.max(np.abs(a.alpha1.values - b.alpha1.values)) == 0.0
