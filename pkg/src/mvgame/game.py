"""Equilibrium synthesis: follower best response, leader decoupling, embedding fixed points."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, FixedPointSingularError, UnsupportedModeError
from .filtering import follower_gain_nodes, sigma_closure_ode, xi_closure_ode, XiEstimates
from .model import ProblemSpec
from .ode import (MatrixTrajectory, alpha2_from_propagator, build_stacked_system, rk4,
                  solve_alpha_propagator, solve_riccati_P, stacked_mean, StackedSystem)
from .sde import FeedbackLaw, _nodes, open_loop_law

FIXED_POINT_TOL = 1e-10
FIXED_POINT_MAXITER = 200


def _gain_matrix(Rinv, B):
    """-R^-1 B^T at every node, shape (N+1, m, n)."""
    return -np.einsum("kij,klj->kil", Rinv, B)


# ---------------------------------------------------------------- follower

@dataclass(frozen=True, eq=False)
class FollowerSolution:
    P: MatrixTrajectory
    phi: MatrixTrajectory
    law: FeedbackLaw
    lambda1: np.ndarray
    u2: np.ndarray          # node values (N+1, m)
    mean: MatrixTrajectory  # E[Xhat] = E[X]
    meta: dict = field(default_factory=dict)


def solve_phi_bar(spec: ProblemSpec, P: MatrixTrajectory, u2_nodes, lambda1) -> MatrixTrajectory:
    """Backward -phi' = (A^T - P S1) phi + P B2 u2, phi(T) = lambda1."""
    c = spec.cells
    dt = spec.grid.dt
    u2 = np.asarray(u2_nodes, dtype=float)

    def rhs(k, t, y):
        Pt = P.in_cell(k, (t - k * dt) / dt)
        return -((c.A[k].T - Pt @ c.S1[k]) @ y + Pt @ c.B2[k] @ u2[k])

    traj = rk4(rhs, np.asarray(lambda1, dtype=float).reshape(spec.n), spec.grid, "backward",
               what="phi")
    traj.meta["equation"] = "phi"
    return traj


def follower_mean(spec: ProblemSpec, P: MatrixTrajectory, phi: MatrixTrajectory, u2_nodes,
                  x0=None) -> MatrixTrajectory:
    """Mean of the follower filter: m' = (A - S1 P) m - S1 phi + B2 u2."""
    c = spec.cells
    dt = spec.grid.dt
    u2 = np.asarray(u2_nodes, dtype=float)
    start = spec.x0 if x0 is None else np.asarray(x0, dtype=float)

    def rhs(k, t, y):
        s = (t - k * dt) / dt
        Pt = P.in_cell(k, s)
        return (c.A[k] - c.S1[k] @ Pt) @ y - c.S1[k] @ phi.in_cell(k, s) + c.B2[k] @ u2[k]

    return rk4(rhs, start, spec.grid, "forward", bound=None, what="follower mean")


def follower_law(spec: ProblemSpec, P: MatrixTrajectory, phi: MatrixTrajectory, u2_nodes,
                 gain_f=None) -> FeedbackLaw:
    c = spec.cells
    G1 = _gain_matrix(c.R1inv, c.B1)
    base = open_loop_law(spec, 0.0, u2_nodes)
    K1x = np.einsum("kij,kjl->kil", G1, P.values)
    k1o = np.einsum("kij,kj->ki", G1, phi.values)
    gf = follower_gain_nodes(spec) if gain_f is None else gain_f
    law = FeedbackLaw(grid=spec.grid, K1x=K1x, K1c=base.K1c, K1h=base.K1h, k1o=k1o,
                      K2c=base.K2c, K2h=base.K2h, k2o=base.k2o, Mc=base.Mc, Mh=base.Mh,
                      mo=base.mo, gain_f=gf, gain_l=base.gain_l, kind="follower",
                      blocks={"P": P, "phi": phi})
    xi = xi_closure_ode(spec, law)
    return law.with_gains(gain_l=xi.meta["gain_l"])


def solve_follower(spec: ProblemSpec, u2=0.0, lambda1=None, P: MatrixTrajectory | None = None
                   ) -> tuple[MatrixTrajectory, MatrixTrajectory, FeedbackLaw]:
    """Follower best response to a deterministic u2 for a fixed lambda1.

    Returns (P, phi-bar, law) with u1 = -R1^-1 B1^T (P xhat + phi-bar).
    """
    if P is None:
        P = solve_riccati_P(spec)
    lam = np.zeros(spec.n) if lambda1 is None else np.asarray(lambda1, dtype=float).reshape(spec.n)
    u2n = _nodes(u2, spec.grid, (spec.m,))
    phi = solve_phi_bar(spec, P, u2n, lam)
    return P, phi, follower_law(spec, P, phi, u2n)


def _solve_affine(M0, Mcols, theta, g, what):
    """Solve lam = g - theta (m0 + M lam) for lam."""
    n = len(g)
    Aff = np.eye(n) + theta * Mcols
    try:
        cond = np.linalg.cond(Aff)
        if not np.isfinite(cond) or cond > 1e14:
            raise np.linalg.LinAlgError
        return np.linalg.solve(Aff, g - theta * M0)
    except np.linalg.LinAlgError:
        raise FixedPointSingularError(f"{what}: singular fixed-point system",
                                      eigenvalues=np.linalg.eigvals(Aff)) from None


def fixed_point_lambda1(spec: ProblemSpec, u2=0.0, P: MatrixTrajectory | None = None,
                        method: str = "probe") -> np.ndarray:
    """lambda1 = g1 - theta1 E[Xhat(T)] for the follower facing a deterministic u2."""
    if P is None:
        P = solve_riccati_P(spec)
    u2n = _nodes(u2, spec.grid, (spec.m,))
    n, th, g = spec.n, spec.cost.theta1, spec.cost.g1

    def terminal_mean(lam):
        phi = solve_phi_bar(spec, P, u2n, lam)
        return follower_mean(spec, P, phi, u2n).terminal

    if method == "probe":
        m0 = terminal_mean(np.zeros(n))
        M = np.column_stack([terminal_mean(e) - m0 for e in np.eye(n)])
        return _solve_affine(m0, M, th, g, "lambda1")
    if method == "iterate":
        return _iterate(lambda lam: g - th * terminal_mean(lam), np.zeros(n))
    raise ConfigError(f"unknown fixed-point method {method!r}")


def _iterate(fn, lam, damping: float = 0.5):
    for _ in range(FIXED_POINT_MAXITER):
        new = (1 - damping) * lam + damping * fn(lam)
        if np.max(np.abs(new - lam)) < FIXED_POINT_TOL:
            return new
        lam = new
    raise FixedPointSingularError("damped fixed-point iteration did not converge")


def solve_follower_equilibrium(spec: ProblemSpec, u2=0.0) -> FollowerSolution:
    """Follower mean-variance solution: fixed point lambda1 and the resulting law."""
    P = solve_riccati_P(spec)
    lam = fixed_point_lambda1(spec, u2, P)
    u2n = _nodes(u2, spec.grid, (spec.m,))
    phi = solve_phi_bar(spec, P, u2n, lam)
    law = follower_law(spec, P, phi, u2n)
    mean = follower_mean(spec, P, phi, u2n)
    resid = float(np.max(np.abs(lam - (spec.cost.g1 - spec.cost.theta1 * mean.terminal))))
    return FollowerSolution(P, phi, law, lam, u2n, mean,
                            {"spec_digest": spec.digest, "residual_lambda1": resid})


# ---------------------------------------------------------------- leader

@dataclass(frozen=True, eq=False)
class EquilibriumSolution:
    """Stackelberg equilibrium of the H1 = 0 game."""

    spec: ProblemSpec
    P: MatrixTrajectory
    system: StackedSystem
    alpha1: MatrixTrajectory
    alpha2: MatrixTrajectory
    psi: MatrixTrajectory
    lambda1: np.ndarray
    lambda2: np.ndarray
    law: FeedbackLaw
    mean: MatrixTrajectory       # E[(Xcheck; h)]
    xi: XiEstimates
    sigma: MatrixTrajectory
    residuals: dict
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.spec.n

    def alpha_blocks(self, k: int):
        n = self.n
        a1 = self.alpha1.values[k]
        a2 = self.alpha2.values[k]
        return a1[:n, :n], a1[:n, n:], a1[n:, :n], a1[n:, n:], a2[:n], a2[n:]

    def block_nodes(self):
        """Node arrays (a11, a12, a13, a14, a21, a22)."""
        n = self.n
        a1 = self.alpha1.values
        a2 = self.alpha2.values
        return a1[:, :n, :n], a1[:, :n, n:], a1[:, n:, :n], a1[:, n:, n:], a2[:, :n], a2[:, n:]

    def m_rep(self, xcheck, h):
        """m = a11 xcheck + a12 h + a21 for node series (P, N+1, n)."""
        a11, a12, _, _, a21, _ = self.block_nodes()
        K = xcheck.shape[1]
        return (np.einsum("kij,pkj->pki", a11[:K], xcheck)
                + np.einsum("kij,pkj->pki", a12[:K], h) + a21[:K])

    def phi_rep(self, xcheck, h):
        """phi-check = a13 xcheck + a14 h + a22 for node series (P, N+1, n)."""
        _, _, a13, a14, _, a22 = self.block_nodes()
        K = xcheck.shape[1]
        return (np.einsum("kij,pkj->pki", a13[:K], xcheck)
                + np.einsum("kij,pkj->pki", a14[:K], h) + a22[:K])

    def mean_terminal(self) -> np.ndarray:
        return self.mean.terminal[: self.n]

    def fixed_point_residuals(self) -> dict:
        m = self.mean_terminal()
        c = self.spec.cost
        return {"lambda1": float(np.max(np.abs(self.lambda1 - (c.g1 - c.theta1 * m)))),
                "lambda2": float(np.max(np.abs(self.lambda2 - (c.g2 - c.theta2 * m))))}


def leader_law(spec: ProblemSpec, P: MatrixTrajectory, alpha1: MatrixTrajectory,
               alpha2: MatrixTrajectory, gain_f=None, gain_l=None) -> FeedbackLaw:
    c = spec.cells
    n = spec.n
    a1, a2 = alpha1.values, alpha2.values
    a11, a12, a13, a14 = a1[:, :n, :n], a1[:, :n, n:], a1[:, n:, :n], a1[:, n:, n:]
    a21, a22 = a2[:, :n], a2[:, n:]
    G1 = _gain_matrix(c.R1inv, c.B1)
    G2 = _gain_matrix(c.R2inv, c.B2)
    mm = lambda X, Y: np.einsum("kij,kjl->kil", X, Y)  # noqa: E731
    mvv = lambda X, y: np.einsum("kij,kj->ki", X, y)  # noqa: E731
    Pv = P.values
    a = c.A - mm(c.S1, Pv)
    law = FeedbackLaw(
        grid=spec.grid,
        K1x=mm(G1, Pv), K1c=mm(G1, a13), K1h=mm(G1, a14), k1o=mvv(G1, a22),
        K2c=mm(G2, a11), K2h=mm(G2, a12 + Pv), k2o=mvv(G2, a21),
        Mc=-mm(c.S1, a11), Mh=a - mm(c.S1, a12), mo=-mvv(c.S1, a21),
        gain_f=follower_gain_nodes(spec) if gain_f is None else gain_f,
        gain_l=c.C2 if gain_l is None else gain_l,
        kind="stackelberg", blocks={"P": P, "alpha1": alpha1, "alpha2": alpha2},
    )
    return law


def solve_leader(spec: ProblemSpec, method: str = "probe") -> EquilibriumSolution:
    """Full pipeline: P, stacked blocks, (alpha1, Psi), joint fixed point, law, Xi closure."""
    if np.any(spec.H1.values != 0):
        raise UnsupportedModeError("leader synthesis requires H1 = 0 identically")
    n = spec.n
    c = spec.cost
    P = solve_riccati_P(spec)
    sys = build_stacked_system(spec, P)
    alpha1, psi = solve_alpha_propagator(sys)

    def terminal_mean(lam):
        a2 = alpha2_from_propagator(psi, lam[n:], lam[:n])
        return stacked_mean(sys, alpha1, a2).terminal[:n]

    g = np.concatenate([c.g2, c.g1])
    if method == "probe":
        c0 = terminal_mean(np.zeros(2 * n))
        C = np.column_stack([terminal_mean(e) - c0 for e in np.eye(2 * n)])
        thetas = np.concatenate([np.full(n, c.theta2), np.full(n, c.theta1)])
        Aff = np.eye(2 * n) + thetas[:, None] * np.vstack([C, C])
        rhs = g - thetas * np.concatenate([c0, c0])
        cond = np.linalg.cond(Aff)
        if not np.isfinite(cond) or cond > 1e14:
            raise FixedPointSingularError("singular (lambda1, lambda2) system",
                                          eigenvalues=np.linalg.eigvals(Aff))
        lam = np.linalg.solve(Aff, rhs)
    elif method == "iterate":
        th = np.concatenate([np.full(n, c.theta2), np.full(n, c.theta1)])
        lam = _iterate(lambda l: g - th * np.tile(terminal_mean(l), 2), np.zeros(2 * n))
    else:
        raise ConfigError(f"unknown fixed-point method {method!r}")
    lambda2, lambda1 = lam[:n], lam[n:]
    alpha2 = alpha2_from_propagator(psi, lambda1, lambda2)
    mean = stacked_mean(sys, alpha1, alpha2)
    sigma = sigma_closure_ode(spec)
    law = leader_law(spec, P, alpha1, alpha2, gain_f=follower_gain_nodes(spec, sigma))
    xi = xi_closure_ode(spec, law)
    law = law.with_gains(gain_l=xi.meta["gain_l"])
    eq = EquilibriumSolution(
        spec=spec, P=P, system=sys, alpha1=alpha1, alpha2=alpha2, psi=psi,
        lambda1=lambda1, lambda2=lambda2, law=law, mean=mean, xi=xi, sigma=sigma,
        residuals={},
        meta={"spec_digest": spec.digest, "grid": [spec.grid.horizon, spec.grid.steps],
              "fixed_point": method, "phi_check_relation": "alpha13 X + alpha14 h + alpha22",
              "xi_source": "closure"},
    )
    eq.residuals.update(eq.fixed_point_residuals())
    return eq


class Controls(NamedTuple):
    u1: np.ndarray
    u2: np.ndarray
    interpolated: bool


def feedback_controls(eq, t: float, xcheck, h, xhat) -> Controls:
    """Equilibrium controls at time t for filter states (vectors or (P, n) batches).

    Off-grid times use linear interpolation of the gains (flagged).
    """
    law = eq.law if hasattr(eq, "law") else eq
    g = law.grid
    if t < 0 or t > g.horizon:
        raise ConfigError(f"t={t} outside [0, {g.horizon}]")
    k = g.index(t)
    xs = [np.atleast_2d(np.asarray(v, dtype=float)) for v in (xcheck, h, xhat)]
    if k is not None:
        u1, u2 = law.controls(k, xs[2], xs[0], xs[1])
        interp = False
    else:
        k = g.cell(t)
        s = (t - k * g.dt) / g.dt
        u1a, u2a = law.controls(k, xs[2], xs[0], xs[1])
        u1b, u2b = law.controls(k + 1, xs[2], xs[0], xs[1])
        u1, u2 = (1 - s) * u1a + s * u1b, (1 - s) * u2a + s * u2b
        interp = True
    if np.ndim(xhat) == 1:
        u1, u2 = u1[0], u2[0]
    return Controls(u1, u2, interp)


def follower_reaction(spec: ProblemSpec, P: MatrixTrajectory, v_nodes, resolve: bool = False):
    """Change of the follower's open-loop term when the leader adds a deterministic v.

    Returns (delta_exo nodes (N+1, m), delta_lambda1). With ``resolve=False`` the
    terminal value lambda1 stays fixed (the follower's condition inside the
    leader problem); with ``resolve=True`` the follower also re-solves its
    embedding fixed point.
    """
    c = spec.cells
    n = spec.n
    G1 = _gain_matrix(c.R1inv, c.B1)
    zero = np.zeros(n)
    dphi = solve_phi_bar(spec, P, v_nodes, zero)
    dlam = zero
    if resolve:
        th = spec.cost.theta1

        def dmean(lam):
            phi = solve_phi_bar(spec, P, v_nodes, lam)
            return follower_mean(spec, P, phi, v_nodes, x0=zero).terminal

        d0 = dmean(zero)
        D = np.column_stack([dmean(e) - d0 for e in np.eye(n)])
        dlam = _solve_affine(d0, D, th, zero, "delta lambda1")
        dphi = solve_phi_bar(spec, P, v_nodes, dlam)
    return np.einsum("kij,kj->ki", G1, dphi.values), dlam


__all__ = [
    "FeedbackLaw", "FollowerSolution", "solve_phi_bar", "follower_mean", "follower_law", "solve_follower",
    "fixed_point_lambda1", "solve_follower_equilibrium", "EquilibriumSolution", "leader_law",
    "solve_leader", "Controls", "feedback_controls", "follower_reaction",
]
