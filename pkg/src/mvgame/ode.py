"""Fixed-step RK4 integration of the deterministic gain equations."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DomainError, SingularityError, UnsupportedModeError
from .model import ProblemSpec, TimeGrid

DEFAULT_BOUND = 1e12


@dataclass(frozen=True, eq=False)
class MatrixTrajectory:
    """Values on the grid plus the RK4 slopes at both ends of every cell.

    The slopes make cubic Hermite interpolation inside a cell available, which
    keeps fourth-order accuracy when a trajectory feeds another RK4 solve.
    """

    grid: TimeGrid
    values: np.ndarray
    slope_left: np.ndarray | None = None
    slope_right: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.values.shape[0] != self.grid.steps + 1:
            raise ValueError("trajectory length must be N+1")
        for arr in (self.values, self.slope_left, self.slope_right):
            if arr is not None:
                arr.setflags(write=False)

    def __len__(self):
        return self.values.shape[0]

    def __getitem__(self, k):
        return self.values[k]

    @property
    def shape(self) -> tuple:
        return tuple(self.values.shape[1:])

    @property
    def terminal(self) -> np.ndarray:
        return self.values[-1]

    @property
    def initial(self) -> np.ndarray:
        return self.values[0]

    def in_cell(self, k: int, s: float) -> np.ndarray:
        """Value at t_k + s*dt inside cell k (0 <= s <= 1)."""
        y0, y1 = self.values[k], self.values[k + 1]
        if self.slope_left is None:
            return (1 - s) * y0 + s * y1
        h = self.grid.dt
        s2, s3 = s * s, s * s * s
        return ((2 * s3 - 3 * s2 + 1) * y0 + (s3 - 2 * s2 + s) * h * self.slope_left[k]
                + (-2 * s3 + 3 * s2) * y1 + (s3 - s2) * h * self.slope_right[k])

    def at(self, t: float) -> np.ndarray:
        g = self.grid
        if t < -1e-12 or t > g.horizon + 1e-12:
            raise DomainError(f"t={t} outside [0, {g.horizon}]")
        k = g.index(t)
        if k is not None:
            return self.values[k]
        k = g.cell(t)
        return self.in_cell(k, (t - k * g.dt) / g.dt)

    def block(self, rows: slice, cols: slice | None = None) -> "MatrixTrajectory":
        idx = (slice(None), rows) if cols is None else (slice(None), rows, cols)
        sl = lambda a: None if a is None else np.ascontiguousarray(a[idx])  # noqa: E731
        return MatrixTrajectory(self.grid, sl(self.values), sl(self.slope_left),
                                sl(self.slope_right), dict(self.meta))

    def map_linear(self, fn: Callable[[np.ndarray], np.ndarray]) -> "MatrixTrajectory":
        """Apply a time-independent linear map (slopes transform identically)."""
        ap = lambda a: None if a is None else np.array([fn(x) for x in a])  # noqa: E731
        return MatrixTrajectory(self.grid, ap(self.values), ap(self.slope_left),
                                ap(self.slope_right), dict(self.meta))


# Right-hand sides get (cell index, time, state); coefficients are frozen per cell.
RHS = Callable[[int, float, np.ndarray], np.ndarray]


def _check(y: np.ndarray, t: float, bound: float, what: str):
    if not np.all(np.isfinite(y)):
        raise SingularityError(f"{what}: non-finite value at t={t:.6g}", time=t)
    if bound is not None and np.max(np.abs(y)) > bound:
        raise SingularityError(f"{what}: blow-up (|entry| > {bound:g}) at t={t:.6g}", time=t)


def rk4(rhs: RHS, boundary, grid: TimeGrid, direction: str = "forward",
        bound: float | None = DEFAULT_BOUND, post: Callable | None = None,
        what: str = "ode") -> MatrixTrajectory:
    """Classical RK4 on ``grid``.

    ``direction="backward"`` integrates from t_N = T down to t_0 with the
    boundary value imposed exactly at T. ``post`` is applied after each step
    (used to symmetrize Riccati solutions).
    """
    N, dt = grid.steps, grid.dt
    y = np.array(boundary, dtype=float)
    vals = np.empty((N + 1,) + y.shape)
    sl = np.empty((N,) + y.shape)
    sr = np.empty((N,) + y.shape)
    _check(y, 0.0 if direction == "forward" else grid.horizon, bound, what)
    if direction == "forward":
        vals[0] = y
        for k in range(N):
            t = k * dt
            k1 = rhs(k, t, y)
            k2 = rhs(k, t + dt / 2, y + dt / 2 * k1)
            k3 = rhs(k, t + dt / 2, y + dt / 2 * k2)
            k4 = rhs(k, t + dt, y + dt * k3)
            y = y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            if post is not None:
                y = post(y)
            _check(y, t + dt, bound, what)
            vals[k + 1] = y
            sl[k] = k1
            sr[k] = rhs(k, t + dt, y)
    elif direction == "backward":
        vals[N] = y
        for k in range(N - 1, -1, -1):
            t = (k + 1) * dt
            k1 = rhs(k, t, y)
            k2 = rhs(k, t - dt / 2, y - dt / 2 * k1)
            k3 = rhs(k, t - dt / 2, y - dt / 2 * k2)
            k4 = rhs(k, t - dt, y - dt * k3)
            y = y - dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            if post is not None:
                y = post(y)
            _check(y, t - dt, bound, what)
            vals[k] = y
            sr[k] = k1
            sl[k] = rhs(k, t - dt, y)
    else:
        raise DomainError(f"direction must be 'forward' or 'backward', got {direction!r}")
    return MatrixTrajectory(grid, vals, sl, sr)


def _as_coef(c) -> Callable[[float, int], np.ndarray]:
    if callable(c):
        return c
    arr = np.asarray(c, dtype=float)
    return lambda t, k: arr


def integrate_linear_ode(direction: str, M, b, boundary, grid: TimeGrid,
                         bound: float | None = None) -> MatrixTrajectory:
    """RK4 solution of x' = M(t) x + b(t).

    ``M`` and ``b`` are arrays (constant) or callables ``f(t, k)`` where ``k``
    is the index of the grid cell being integrated. ``boundary`` is x(0) for
    ``forward`` and x(T) for ``backward``.
    """
    Mf, bf = _as_coef(M), _as_coef(b)
    rhs = lambda k, t, x: Mf(t, k) @ x + bf(t, k)  # noqa: E731
    return rk4(rhs, boundary, grid, direction, bound=bound, what="linear ode")


def _sym(P):
    return 0.5 * (P + P.T)


def solve_riccati_P(spec: ProblemSpec, bound: float = DEFAULT_BOUND) -> MatrixTrajectory:
    """Backward RK4 for P' + PA + A^T P - P S1 P = 0, P(T) = theta1 I."""
    c = spec.cells
    A, S = c.A, c.S1

    def rhs(k, t, P):
        return -(P @ A[k] + A[k].T @ P - P @ S[k] @ P)

    traj = rk4(rhs, spec.cost.theta1 * np.eye(spec.n), spec.grid, "backward",
               bound=bound, post=_sym, what="P Riccati")
    traj.meta["equation"] = "P"
    return traj


@dataclass(frozen=True, eq=False)
class StackedSystem:
    """Coefficient blocks of the leader's stacked state/adjoint system.

    With a = A - S1 P, S2 = B2 R2^-1 B2^T:
    A1 = [[a, -S2 P], [0, a]], A2 = [[-S2, -S1], [-S1, 0]],
    A6 = [[0, 0], [0, -P S2 P]], A4 = [Xi1 H2^T K2^-1 + C2; 0], A5(e) = [D2(e); 0].
    """

    spec: ProblemSpec
    P: MatrixTrajectory

    @property
    def n(self) -> int:
        return self.spec.n

    def blocks_from(self, k: int, P: np.ndarray):
        """(A1, A2, A6) in cell k for a given value of P."""
        c = self.spec.cells
        n = self.n
        a = c.A[k] - c.S1[k] @ P
        S1, S2 = c.S1[k], c.S2[k]
        A1 = np.zeros((2 * n, 2 * n))
        A1[:n, :n] = a
        A1[:n, n:] = -S2 @ P
        A1[n:, n:] = a
        A2 = np.zeros((2 * n, 2 * n))
        A2[:n, :n] = -S2
        A2[:n, n:] = -S1
        A2[n:, :n] = -S1
        A6 = np.zeros((2 * n, 2 * n))
        A6[n:, n:] = -P @ S2 @ P
        return A1, A2, A6

    def blocks_in_cell(self, k: int, s: float):
        return self.blocks_from(k, self.P.in_cell(k, s))

    def _cell_time(self, t: float):
        g = self.spec.grid
        if t < 0 or t > g.horizon:
            raise DomainError(f"t={t} outside [0, {g.horizon}]")
        k = g.cell(t)
        return k, self.P.at(t)

    def A1(self, t: float) -> np.ndarray:
        return self.blocks_from(*self._cell_time(t))[0]

    def A2(self, t: float) -> np.ndarray:
        return self.blocks_from(*self._cell_time(t))[1]

    def A6(self, t: float) -> np.ndarray:
        return self.blocks_from(*self._cell_time(t))[2]

    def A4(self, t: float, xi1: np.ndarray) -> np.ndarray:
        c = self.spec.cells
        k = self.spec.grid.cell(t)
        n = self.n
        out = np.zeros(2 * n)
        out[:n] = np.asarray(xi1).reshape(n, n) @ c.H2[k] / c.K2[k] + c.C2[k]
        return out

    def A5(self, t: float, mark: int | str) -> np.ndarray:
        sp = self.spec.E2
        j = sp.index_of(mark) if isinstance(mark, str) else int(mark)
        out = np.zeros(2 * self.n)
        out[: self.n] = self.spec.cells.D2[j]
        return out


def build_stacked_system(spec: ProblemSpec, P: MatrixTrajectory) -> StackedSystem:
    if np.any(spec.H1.values != 0):
        raise UnsupportedModeError("leader synthesis requires H1 = 0 identically")
    return StackedSystem(spec, P)


def solve_alpha_propagator(sys: StackedSystem, bound: float = DEFAULT_BOUND):
    """Solve alpha1 and the propagator Psi of the alpha2 equation.

    -alpha1' = A1^T a1 + a1 A1 + a1 A2 a1 + A6, alpha1(T) = [[theta2 I, 0], [0, 0]];
    -Psi' = (a1 A2 + A1^T) Psi, Psi(T) = I, so alpha2 = Psi alpha2(T).
    Both are integrated jointly; alpha1 is not symmetrized.
    """
    spec = sys.spec
    n2 = 2 * spec.n
    y_T = np.zeros((n2, 2 * n2))
    y_T[: spec.n, : spec.n] = spec.cost.theta2 * np.eye(spec.n)
    y_T[:, n2:] = np.eye(n2)

    def rhs(k, t, y):
        s = (t - k * spec.grid.dt) / spec.grid.dt
        A1, A2, A6 = sys.blocks_in_cell(k, s)
        a1, psi = y[:, :n2], y[:, n2:]
        da1 = -(A1.T @ a1 + a1 @ A1 + a1 @ A2 @ a1 + A6)
        dpsi = -(a1 @ A2 + A1.T) @ psi
        return np.concatenate([da1, dpsi], axis=1)

    traj = rk4(rhs, y_T, spec.grid, "backward", bound=bound, what="alpha Riccati")
    a1 = traj.block(slice(None), slice(0, n2))
    psi = traj.block(slice(None), slice(n2, 2 * n2))
    a1.meta["equation"] = "alpha1"
    return a1, psi


def alpha2_from_propagator(psi: MatrixTrajectory, lambda1, lambda2) -> MatrixTrajectory:
    term = np.concatenate([np.asarray(lambda2, dtype=float).ravel(),
                           np.asarray(lambda1, dtype=float).ravel()])
    a2 = psi.map_linear(lambda M: M @ term)
    a2.meta["equation"] = "alpha2"
    return a2


def solve_alpha(spec: ProblemSpec, sys: StackedSystem, lambda1, lambda2,
                bound: float = DEFAULT_BOUND):
    """Return (alpha1, alpha2) with alpha2(T) = (lambda2; lambda1)."""
    if sys.spec is not spec:
        sys = build_stacked_system(spec, sys.P)
    a1, psi = solve_alpha_propagator(sys, bound)
    return a1, alpha2_from_propagator(psi, lambda1, lambda2)


def stacked_mean(sys: StackedSystem, alpha1: MatrixTrajectory, alpha2: MatrixTrajectory,
                 start=None) -> MatrixTrajectory:
    """Forward mean of the stacked state: m' = (A1 + A2 a1) m + A2 a2, m(0) = (x0; 0)."""
    spec = sys.spec
    n, dt = spec.n, spec.grid.dt
    if start is None:
        start = np.concatenate([spec.x0, np.zeros(n)])

    def rhs(k, t, y):
        s = (t - k * dt) / dt
        A1, A2, _ = sys.blocks_in_cell(k, s)
        a1 = alpha1.in_cell(k, s)
        a2 = alpha2.in_cell(k, s)
        return (A1 + A2 @ a1) @ y + A2 @ a2

    return rk4(rhs, start, spec.grid, "forward", bound=None, what="stacked mean")


__all__ = [
    "MatrixTrajectory", "rk4", "integrate_linear_ode", "solve_riccati_P", "StackedSystem",
    "build_stacked_system", "solve_alpha", "solve_alpha_propagator", "alpha2_from_propagator",
    "stacked_mean", "DEFAULT_BOUND",
]
