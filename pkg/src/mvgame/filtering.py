"""Filters, error-covariance closures, particle filter and innovation diagnostics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _pykernels as pk
from .errors import ContractError, DegenerateFilterError, DomainError
from .model import MarkSpace, ProblemSpec, TimeGrid
from .ode import MatrixTrajectory, rk4
from .sde import FeedbackLaw, PathBundle, recover_mark_indices


# ---------------------------------------------------------------- filter steps

@dataclass(frozen=True, eq=False)
class FilterState:
    """Filter estimate for a batch of P observation paths at grid node ``k``.

    ``estimate`` has shape (P, n); ``cov`` is the error covariance (n, n);
    ``costate`` holds the leader filter's phi-check (P, n) when relevant;
    ``innovation`` and ``qv`` accumulate the innovation path and its
    quadratic variation.
    """

    k: int
    estimate: np.ndarray
    cov: np.ndarray | None = None
    costate: np.ndarray | None = None
    innovation: np.ndarray | None = None
    qv: np.ndarray | None = None

    @classmethod
    def initial(cls, spec: ProblemSpec, n_paths: int = 1, costate=None) -> "FilterState":
        x = np.tile(np.asarray(spec.x0, dtype=float), (n_paths, 1))
        c = None if costate is None else np.broadcast_to(costate, x.shape).copy()
        return cls(0, x, np.zeros((spec.n, spec.n)), c, np.zeros(n_paths), np.zeros(n_paths))


def _jump_counts(space: MarkSpace, jumps, P: int) -> np.ndarray:
    """Counts (P, M) from either a count array or per-path lists of observed sizes."""
    M = space.size
    if jumps is None:
        return np.zeros((P, M))
    arr = np.asarray(jumps, dtype=object) if not isinstance(jumps, np.ndarray) else jumps
    if isinstance(arr, np.ndarray) and arr.dtype != object and arr.shape == (P, M):
        return arr.astype(float)
    out = np.zeros((P, M))
    if len(jumps) != P:
        raise ContractError(f"expected jump sizes for {P} paths")
    for p, sizes in enumerate(jumps):
        sizes = np.atleast_1d(np.asarray(sizes, dtype=float))
        if sizes.size:
            np.add.at(out[p], recover_mark_indices(space, sizes), 1.0)
    return out


def _as_batch(x, P, m):
    return np.broadcast_to(np.asarray(x, dtype=float).reshape(-1, m), (P, m))


def _sigma_drift(c, k, S):
    """Drift of the follower error-covariance closure in cell k."""
    H, K = c.H1[k], c.K1[k]
    F = c.A[k] - np.outer(c.C1[k], H) / K
    SH = S @ H
    return F @ S + S @ F.T - np.outer(SH, SH) / K ** 2 + np.outer(c.C2[k], c.C2[k]) + c.jump_cov2


def follower_filter_step(spec: ProblemSpec, prior: FilterState, u1, u2, dy1, jumps=None,
                         cov_next=None) -> FilterState:
    """One Euler step of the follower filter.

    The gain is Sigma H1^T K1^-1 + C1 with Sigma = ``prior.cov``. ``jumps``
    is a (P, M1) count array or per-path lists of observed jump sizes, which
    are mapped back to marks. ``cov_next`` overrides the Euler update of the
    covariance closure (e.g. with an RK4 trajectory value).
    """
    c = spec.cells
    k, dt = prior.k, spec.grid.dt
    if k >= spec.grid.steps:
        raise DomainError("filter already at the terminal time")
    P = prior.estimate.shape[0]
    S = np.zeros((spec.n, spec.n)) if prior.cov is None else prior.cov
    gain = S @ c.H1[k] / c.K1[k] + c.C1[k]
    oc = _jump_counts(spec.E1, jumps, P)
    dy = np.broadcast_to(np.asarray(dy1, dtype=float).reshape(-1), (P,))
    est, dv = pk.follower_update(prior.estimate, _as_batch(u1, P, spec.m), _as_batch(u2, P, spec.m),
                                 dy, oc, dt, c.A[k], c.B1[k], c.B2[k], c.H1[k], c.h11[k],
                                 c.h12[k], c.K1[k], gain, c.D1, c.f1, c.nu1)
    cov = S + dt * _sigma_drift(c, k, S) if cov_next is None else np.asarray(cov_next)
    inn = (prior.innovation if prior.innovation is not None else 0.0) + dv
    qv = (prior.qv if prior.qv is not None else 0.0) + dv * dv
    return FilterState(k + 1, est, 0.5 * (cov + cov.T), prior.costate, inn, qv)


def leader_filter_step(spec: ProblemSpec, prior: FilterState, u2, dy2, jumps=None, xi1=None,
                       xi2=None, P=None, z=None, jump_coef=None) -> FilterState:
    """One Euler step of the leader filter for (xcheck, phicheck).

    dxcheck = {(A - S1 P) xcheck - S1 phicheck + B2 u2} dt + (Xi1 H2^T K2^-1 + C2) dU + D2 dN2~
    -dphicheck = {(A^T - P S1) phicheck + P B2 u2} dt + z dU + jump_coef dN2~

    With ``z=None`` the innovation coefficient is Xi2 H2^T K2^-1 and with
    ``jump_coef=None`` the compensated jump term is absent, as in the
    filtered costate equation; the decoupled solution instead has
    z = -alpha13 (Xi1 H2^T K2^-1 + C2) and a jump term -alpha13 D2, which
    callers may pass explicitly.
    """
    if np.any(spec.H1.values != 0):
        from .errors import UnsupportedModeError
        raise UnsupportedModeError("leader filter requires H1 = 0")
    if xi1 is None or P is None or (z is None and xi2 is None):
        raise ContractError("leader_filter_step needs Xi1, Xi2 (or z) and P at t")
    if prior.costate is None:
        raise ContractError("prior state must carry phicheck as costate")
    c = spec.cells
    k, dt, n = prior.k, spec.grid.dt, spec.n
    Pk = np.asarray(P, dtype=float).reshape(n, n)
    xi1 = np.asarray(xi1, dtype=float).reshape(n, n)
    Pn = prior.estimate.shape[0]
    u2b = _as_batch(u2, Pn, spec.m)
    R1inv, B1 = c.R1inv[k], c.B1[k]
    u1l = -pk.mv(pk.mv(prior.estimate, Pk) + prior.costate, R1inv @ B1.T)
    gain = xi1 @ c.H2[k] / c.K2[k] + c.C2[k]
    oc = _jump_counts(spec.E2, jumps, Pn)
    dy = np.broadcast_to(np.asarray(dy2, dtype=float).reshape(-1), (Pn,))
    est, du = pk.leader_update(prior.estimate, u1l, u2b, dy, oc, dt, c.A[k], B1, c.B2[k],
                               c.H2[k], c.h2[k], c.K2[k], gain, c.D2, c.f2, c.nu2)
    if z is None:
        z = np.asarray(xi2, dtype=float).reshape(n, n) @ c.H2[k] / c.K2[k]
    phi = prior.costate
    drift = pk.mv(phi, c.A[k].T - Pk @ c.S1[k]) + pk.mv(u2b, Pk @ c.B2[k])
    phin = phi - drift * dt - du[:, None] * np.asarray(z).reshape(n)
    if jump_coef is not None:
        jc = np.asarray(jump_coef, dtype=float).reshape(-1, n)  # (M2, n)
        phin = phin - (oc @ jc - dt * (c.nu2 @ jc))
    inn = (prior.innovation if prior.innovation is not None else 0.0) + du
    qv = (prior.qv if prior.qv is not None else 0.0) + du * du
    return FilterState(k + 1, est, xi1, phin, inn, qv)


# ---------------------------------------------------------------- closures

def sigma_closure_ode(spec: ProblemSpec) -> MatrixTrajectory:
    """Drift-only closure of the follower error covariance, Sigma(0) = 0.

    Sigma' = F Sigma + Sigma F^T - Sigma H1^T K1^-2 H1 Sigma + C2 C2^T + sum D2 D2^T nu2,
    F = A - C1 K1^-1 H1. APPROXIMATE: the martingale term of the conditional
    covariance equation is dropped.
    """
    c = spec.cells
    traj = rk4(lambda k, t, S: _sigma_drift(c, k, S), np.zeros((spec.n, spec.n)), spec.grid,
               "forward", post=lambda S: 0.5 * (S + S.T), what="Sigma closure")
    traj.meta.update(equation="Sigma", approximate=True)
    return traj


def follower_gain_nodes(spec: ProblemSpec, sigma: MatrixTrajectory | None = None) -> np.ndarray:
    """Innovation gain Sigma H1^T K1^-1 + C1 at all grid nodes, shape (N+1, n)."""
    c = spec.cells
    if sigma is None:
        sigma = sigma_closure_ode(spec)
    return np.einsum("kij,kj->ki", sigma.values, c.H1) / c.K1[:, None] + c.C1


def _xi_system(spec: ProblemSpec, law: FeedbackLaw):
    """Drift function of the joint covariance of e = X - Xcheck and d = Xhat - Xcheck."""
    c = spec.cells
    n = spec.n

    def build(k, Q):
        Qee = Q[:n, :n]
        G = Qee @ c.H2[k] / c.K2[k] + c.C2[k]
        gf = law.gain_f[k]
        BK = c.B1[k] @ law.K1x[k]
        GH = np.outer(G, c.H2[k]) / c.K2[k]
        FH = np.outer(gf, c.H1[k]) / c.K1[k]
        F = np.zeros((2 * n, 2 * n))
        F[:n, :n] = c.A[k] - GH
        F[:n, n:] = BK
        F[n:, :n] = FH - GH
        F[n:, n:] = c.A[k] + BK - FH
        cols = [np.concatenate([c.C1[k], gf]), np.concatenate([c.C2[k] - G, -G])]
        Gam = sum(np.outer(v, v) for v in cols)
        for j in range(c.D1.shape[0]):
            v = np.concatenate([c.D1[j], c.D1[j]])
            Gam = Gam + c.nu1[j] * np.outer(v, v)
        for j in range(c.D2.shape[0]):
            v = np.concatenate([np.zeros(n), -c.D2[j]])
            Gam = Gam + c.nu2[j] * np.outer(v, v)
        return F, Gam, G

    return build


@dataclass(frozen=True, eq=False)
class XiEstimates:
    """Time series of the six conditional second moments of the leader problem.

    Arrays have shape (N+1, n, n), or (R, N+1, n, n) for R observation paths.
    """

    grid: TimeGrid
    xi: dict
    meta: dict = field(default_factory=dict)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.xi[i]


def xi_closure_ode(spec: ProblemSpec, law: FeedbackLaw) -> XiEstimates:
    """Expected Xi1, Xi4, Xi6 under the linear closed loop (H1 = 0 leader semantics).

    Xi1 = E[e e^T], Xi4 = E[d e^T], Xi6 = E[d d^T] with e = X - Xcheck,
    d = Xhat - Xcheck. The leader-consistent follower costate makes the phi
    deviation vanish, so Xi2 = Xi3 = Xi5 = 0. Also returns the resulting
    leader gain Xi1 H2^T K2^-1 + C2 in ``meta['gain_l']``.
    """
    n = spec.n
    build = _xi_system(spec, law)

    def rhs(k, t, Q):
        F, Gam, _ = build(k, Q)
        return F @ Q + Q @ F.T + Gam

    traj = rk4(rhs, np.zeros((2 * n, 2 * n)), spec.grid, "forward",
               post=lambda Q: 0.5 * (Q + Q.T), what="Xi closure")
    Q = traj.values
    c = spec.cells
    gain_l = np.einsum("kij,kj->ki", Q[:, :n, :n], c.H2) / c.K2[:, None] + c.C2
    z = np.zeros_like(Q[:, :n, :n])
    xi = {1: Q[:, :n, :n].copy(), 2: z, 3: z, 4: Q[:, n:, :n].copy(), 5: z, 6: Q[:, n:, n:].copy()}
    return XiEstimates(spec.grid, xi, {"approximate": True, "gain_l": gain_l, "joint": Q,
                                       "source": "closure"})


def xi_drift(spec: ProblemSpec, law: FeedbackLaw, k: int, xi1, xi4, xi6, gain_l=None):
    """Drifts (dXi1, dXi4, dXi6)/dt of the linear closed loop at node k.

    ``gain_l`` is the leader gain actually used; by default it is formed from ``xi1``.
    """
    n = spec.n
    Q = np.zeros((2 * n, 2 * n))
    Q[:n, :n] = xi1
    Q[n:, :n] = xi4
    Q[:n, n:] = np.asarray(xi4).T
    Q[n:, n:] = xi6
    build = _xi_system(spec, law)
    if gain_l is None:
        F, Gam, _ = build(k, Q)
    else:
        # Rebuild with the supplied gain: temporarily express it through Qee.
        c = spec.cells
        G = np.asarray(gain_l, dtype=float)
        gf = law.gain_f[k]
        BK = c.B1[k] @ law.K1x[k]
        GH = np.outer(G, c.H2[k]) / c.K2[k]
        FH = np.outer(gf, c.H1[k]) / c.K1[k]
        F = np.zeros((2 * n, 2 * n))
        F[:n, :n] = c.A[k] - GH
        F[:n, n:] = BK
        F[n:, :n] = FH - GH
        F[n:, n:] = c.A[k] + BK - FH
        cols = [np.concatenate([c.C1[k], gf]), np.concatenate([c.C2[k] - G, -G])]
        Gam = sum(np.outer(v, v) for v in cols)
        for j in range(c.D1.shape[0]):
            v = np.concatenate([c.D1[j], c.D1[j]])
            Gam = Gam + c.nu1[j] * np.outer(v, v)
        for j in range(c.D2.shape[0]):
            v = np.concatenate([np.zeros(n), -c.D2[j]])
            Gam = Gam + c.nu2[j] * np.outer(v, v)
    dQ = F @ Q + Q @ F.T + Gam
    return dQ[:n, :n], dQ[n:, :n], dQ[n:, n:]


def xi1_drift_reduced(spec: ProblemSpec, P, k: int, xi1, xi4, xi2=None):
    """Reduced Xi1 drift without the follower-noise, jump and gain cross terms.

    Kept to measure what the joint closure in :func:`xi_drift` adds.

    Xi1 A^T + A Xi1 - (B1 R1^-1 B1^T (P Xi4 + Xi2) + transpose) - Xi1 H2^T K2^-2 H2 Xi1 + C2 C2^T.
    """
    c = spec.cells
    n = spec.n
    xi2 = np.zeros((n, n)) if xi2 is None else xi2
    M = c.S1[k] @ (np.asarray(P) @ xi4 + xi2)
    XH = xi1 @ c.H2[k]
    return (xi1 @ c.A[k].T + c.A[k] @ xi1 - M - M.T - np.outer(XH, XH) / c.K2[k] ** 2
            + np.outer(c.C2[k], c.C2[k]))


# ---------------------------------------------------------------- particle clouds

@dataclass(frozen=True, eq=False)
class ParticleCloud:
    """Weighted ensemble at one time. ``extra`` holds further named components."""

    x: np.ndarray
    weights: np.ndarray
    phi: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ContractError("weights must be nonnegative and sum to 1")

    @property
    def size(self) -> int:
        return self.x.shape[0]

    @property
    def ess(self) -> float:
        return 1.0 / float(np.sum(self.weights ** 2))

    def mean(self, name: str = "x") -> np.ndarray:
        return self.weights @ self._get(name)

    def cov(self, a: str = "x", b: str | None = None) -> np.ndarray:
        A = self._get(a)
        B = A if b is None else self._get(b)
        w = self.weights
        Ac = A - w @ A
        Bc = B - w @ B
        return (Ac * w[:, None]).T @ Bc

    def _get(self, name):
        if name == "x":
            return self.x
        if name == "phi":
            if self.phi is None:
                raise ContractError("cloud has no costate component")
            return self.phi
        return self.extra[name]


def estimate_xi(clouds, grid: TimeGrid | None = None) -> XiEstimates:
    """Centered ensemble moments Xi1..Xi6 from a per-time sequence of clouds.

    Each cloud carries X (``x``), the follower costate (``phi``) and, in
    ``extra['xhat']``, the follower estimate. Xi1 = Cov(X, X),
    Xi2 = Cov(phi, X), Xi3 = Cov(phi, phi), Xi4 = Cov(xhat, X),
    Xi5 = Cov(xhat, phi), Xi6 = Cov(xhat, xhat). Missing components give zeros.
    """
    clouds = list(clouds)
    if not clouds:
        raise ContractError("no clouds")
    if clouds[0].size < 2:
        raise ContractError("need at least 2 particles")
    n = clouds[0].x.shape[1]
    out = {i: np.zeros((len(clouds), n, n)) for i in range(1, 7)}
    for t, cl in enumerate(clouds):
        has_phi = cl.phi is not None
        has_xh = "xhat" in cl.extra
        out[1][t] = cl.cov("x")
        if has_phi:
            out[2][t] = cl.cov("phi", "x")
            out[3][t] = cl.cov("phi")
        if has_xh:
            out[4][t] = cl.cov("xhat", "x")
            out[6][t] = cl.cov("xhat")
            if has_phi:
                out[5][t] = cl.cov("xhat", "phi")
    for i in (1, 3, 6):
        out[i] = 0.5 * (out[i] + np.swapaxes(out[i], -1, -2))
    return XiEstimates(grid, out, {"source": "ensemble", "n_particles": clouds[0].size})


def ensemble_clouds(bundle: PathBundle, every: int = 1):
    """Equal-weight clouds over simulated paths: x = X - Xcheck, xhat = Xhat - Xcheck."""
    X, Xh, Xc = bundle["X"], bundle["Xhat"], bundle["Xcheck"]
    P = X.shape[0]
    w = np.full(P, 1.0 / P)
    w[-1] = 1.0 - w[:-1].sum()
    for k in range(0, X.shape[1], every):
        e = X[:, k] - Xc[:, k]
        yield ParticleCloud(e, w, None, {"xhat": Xh[:, k] - Xc[:, k]})


# ---------------------------------------------------------------- generic linear signal

@dataclass(frozen=True, eq=False)
class LinearSignalModel:
    """Partially observed linear jump system with d-dimensional observations.

    dz = (F z + a) dt + S1 dW1 + S2 dW2 + sum_e J1(e) dN1~ + sum_e J2(e) dN2~
    dY = (H z + y0) dt + K dW1 + sum_e c(e) dN1~

    W1 (d-dim) drives the observation; W2 (q-dim) and N2 are hidden, N1 is
    observed through its jumps. Per-step arrays have leading length N; ``a``
    and ``y0`` may carry a batch axis (R, N, .) for R observation paths.
    """

    grid: TimeGrid
    F: np.ndarray     # (N, s, s)
    a: np.ndarray     # (R, N, s)
    S1: np.ndarray    # (N, s, d)
    S2: np.ndarray    # (N, s, q)
    H: np.ndarray     # (N, d, s)
    y0: np.ndarray    # (R, N, d)
    K: np.ndarray     # (N, d, d)
    J1: np.ndarray    # (M1, s)
    c1: np.ndarray    # (M1, d)
    nu1: np.ndarray
    J2: np.ndarray    # (M2, s)
    nu2: np.ndarray
    z0: np.ndarray    # (s,)

    @property
    def s(self) -> int:
        return self.F.shape[1]

    @property
    def d(self) -> int:
        return self.H.shape[1]


def _compensated_obs(model: LinearSignalModel, dY, counts):
    """Continuous part of the observation increments: dY - c counts + c nu dt."""
    dt = model.grid.dt
    return dY - counts @ model.c1 + dt * (model.nu1 @ model.c1)


def kalman_filter(model: LinearSignalModel, dY, counts):
    """Linear filter (Kalman-Bucy with jump compensation) for a LinearSignalModel.

    ``dY`` (R, N, d) observation increments, ``counts`` (R, N, M1) observed
    jump counts. Returns (mean (R, N+1, s), covariance (N+1, s, s)).
    """
    g = model.grid
    N, dt, s = g.steps, g.dt, model.s
    R = dY.shape[0]
    m = np.tile(model.z0, (R, 1))
    S = np.zeros((s, s))
    means = np.empty((R, N + 1, s))
    covs = np.empty((N + 1, s, s))
    means[:, 0] = m
    covs[0] = S
    dYc = _compensated_obs(model, dY, counts)
    Qj2 = (model.J2.T * model.nu2) @ model.J2
    for k in range(N):
        F, H, K = model.F[k], model.H[k], model.K[k]
        Kinv = np.linalg.inv(K)
        KKinv = Kinv.T @ Kinv
        gain = (S @ H.T + model.S1[k] @ K.T) @ KKinv        # (s, d)
        inn = dYc[:, k] - (m @ H.T + model.y0[:, k]) * dt
        mn = (m + (m @ F.T + model.a[:, k]) * dt + inn @ gain.T
              + counts[:, k] @ model.J1 - dt * (model.nu1 @ model.J1))
        Fc = F - model.S1[k] @ Kinv @ H
        dS = (Fc @ S + S @ Fc.T - S @ H.T @ KKinv @ H @ S
              + model.S2[k] @ model.S2[k].T + Qj2)
        S = S + dt * dS
        S = 0.5 * (S + S.T)
        m = mn
        means[:, k + 1] = m
        covs[k + 1] = S
    return means, covs


def systematic_resample(weights: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Systematic resampling indices for each row of ``weights`` (R, n) given offsets u (R,)."""
    R, n = weights.shape
    cdf = np.cumsum(weights, axis=1)
    cdf[:, -1] = 1.0
    pos = (u[:, None] + np.arange(n)[None, :]) / n
    idx = np.empty((R, n), dtype=np.int64)
    for r in range(R):
        idx[r] = np.searchsorted(cdf[r], pos[r], side="left")
    return np.minimum(idx, n - 1)


@dataclass(frozen=True, eq=False)
class ParticleRun:
    """Per-time moments of a particle run over R observation paths.

    ``mean`` (R, N+1, s), ``cov`` (R, N+1, s, s), ``ess`` (R, N+1),
    ``clouds`` holds full ParticleCloud snapshots {step: [cloud per path]}.
    """

    grid: TimeGrid
    mean: np.ndarray
    cov: np.ndarray
    ess: np.ndarray
    n_particles: int
    resamples: np.ndarray
    clouds: dict = field(default_factory=dict)
    components: dict = field(default_factory=dict)

    def component(self, name: str):
        sl = self.components[name]
        return self.mean[:, :, sl], self.cov[:, :, sl, sl]


def run_particle_filter(model: LinearSignalModel, dY, counts, n_particles: int, seed: int = 0,
                        threshold: float = 0.5, snapshot_steps=(), stream_offset: int = 0
                        ) -> ParticleRun:
    """Bootstrap particle filter for correlated observation noise.

    Given particle z_i, the observation Brownian increment is implied:
    dW1_i = K^-1 (dYc - (H z_i + y0) dt); the weight update is its Gaussian
    density N(0, dt I) and the particle then moves with that increment, a
    sampled W2 increment, the observed N1 jumps and sampled N2 jumps.
    """
    g = model.grid
    N, dt, s, d = g.steps, g.dt, model.s, model.d
    R = dY.shape[0]
    n = int(n_particles)
    if n < 2:
        raise ContractError("need at least 2 particles")
    rngs = [np.random.Generator(np.random.Philox(key=(int(seed) << 64) | ((stream_offset + r) << 8) | 7))
            for r in range(R)]
    z = np.tile(model.z0, (R, n, 1))
    logw = np.zeros((R, n))
    w = np.full((R, n), 1.0 / n)
    mean = np.empty((R, N + 1, s))
    cov = np.empty((R, N + 1, s, s))
    ess = np.empty((R, N + 1))
    resamples = np.zeros(R, dtype=np.int64)
    clouds = {}
    q = model.S2.shape[2]
    M2 = model.J2.shape[0]
    dYc = _compensated_obs(model, dY, counts)
    comp1 = dt * (model.nu1 @ model.J1)
    comp2 = dt * (model.nu2 @ model.J2)
    snapshot_steps = set(snapshot_steps)

    def record(k):
        mu = np.einsum("rn,rns->rs", w, z)
        zc = z - mu[:, None, :]
        mean[:, k] = mu
        cov[:, k] = np.einsum("rn,rns,rnt->rst", w, zc, zc)
        ess[:, k] = 1.0 / np.sum(w * w, axis=1)
        if k in snapshot_steps:
            clouds[k] = [ParticleCloud(z[r].copy(), w[r].copy()) for r in range(R)]

    record(0)
    for k in range(N):
        Kinv = np.linalg.inv(model.K[k])
        pred = np.einsum("ds,rns->rnd", model.H[k], z) + model.y0[:, k][:, None, :]
        dw1 = np.einsum("ed,rnd->rne", Kinv, dYc[:, k][:, None, :] - pred * dt)
        logw = np.log(w) - 0.5 * np.sum(dw1 * dw1, axis=2) / dt
        mx = logw.max(axis=1, keepdims=True)
        if not np.all(np.isfinite(mx)):
            raise DegenerateFilterError(
                f"all particle weights vanished at step {k}; increase n_particles or reduce dt")
        w = np.exp(logw - mx)
        tot = w.sum(axis=1, keepdims=True)
        if np.any(tot <= 0) or not np.all(np.isfinite(tot)):
            raise DegenerateFilterError(
                f"all particle weights vanished at step {k}; increase n_particles or reduce dt")
        w = w / tot
        noise2 = np.stack([r.standard_normal((n, q)) for r in rngs]) * np.sqrt(dt) if q else 0.0
        drift = np.einsum("st,rnt->rns", model.F[k], z) + model.a[:, k][:, None, :]
        zn = z + drift * dt + np.einsum("sd,rnd->rns", model.S1[k], dw1)
        if q:
            zn = zn + np.einsum("sq,rnq->rns", model.S2[k], noise2)
        zn = zn + (counts[:, k] @ model.J1)[:, None, :] - comp1
        if M2:
            lam = model.nu2 * dt
            j2 = np.stack([r.poisson(lam, size=(n, M2)) for r in rngs]).astype(float)
            zn = zn + j2 @ model.J2 - comp2
        z = zn
        record(k + 1)
        # Resample after recording the filtering distribution at t_{k+1}.
        e = ess[:, k + 1]
        need = np.nonzero(e < threshold * n)[0]
        if need.size:
            u = np.array([rngs[r].random() for r in need])
            idx = systematic_resample(w[need], u)
            z[need] = np.take_along_axis(z[need], idx[:, :, None], axis=1)
            w[need] = 1.0 / n
            resamples[need] += 1
    return ParticleRun(g, mean, cov, ess, n, resamples, clouds)


def follower_signal_model(spec: ProblemSpec, u1, u2) -> LinearSignalModel:
    """Signal X seen through Y1, with recorded control paths u1, u2 of shape (R, N, m)."""
    c = spec.cells
    N = spec.grid.steps
    u1 = np.asarray(u1, dtype=float)
    u2 = np.asarray(u2, dtype=float)
    a = np.einsum("kij,rkj->rki", c.B1[:N], u1) + np.einsum("kij,rkj->rki", c.B2[:N], u2)
    y0 = (np.einsum("kj,rkj->rk", c.h11[:N], u1) + np.einsum("kj,rkj->rk", c.h12[:N], u2))[..., None]
    return LinearSignalModel(
        grid=spec.grid, F=c.A[:N], a=a, S1=c.C1[:N, :, None], S2=c.C2[:N, :, None],
        H=c.H1[:N, None, :], y0=y0, K=c.K1[:N, None, None], J1=c.D1, c1=c.f1[:, None],
        nu1=c.nu1, J2=c.D2, nu2=c.nu2, z0=np.asarray(spec.x0, dtype=float),
    )


def leader_signal_model(spec: ProblemSpec, law: FeedbackLaw, u1exo, u2) -> LinearSignalModel:
    """Signal (X, Xhat) seen through Y2 when the follower uses u1 = K1x Xhat + u1exo.

    ``u1exo`` and ``u2`` (R, N, m) are known to the leader. The roles of the
    two channels swap relative to the follower: W2 and N2 are the observed
    channels, W1 and N1 are hidden.
    """
    c = spec.cells
    N, n = spec.grid.steps, spec.n
    s = 2 * n
    u1exo = np.asarray(u1exo, dtype=float)
    u2 = np.asarray(u2, dtype=float)
    BK = np.einsum("kij,kjl->kil", c.B1[:N], law.K1x[:N])
    F = np.zeros((N, s, s))
    F[:, :n, :n] = c.A[:N]
    F[:, :n, n:] = BK
    F[:, n:, n:] = c.A[:N] + BK
    shared = np.einsum("kij,rkj->rki", c.B1[:N], u1exo) + np.einsum("kij,rkj->rki", c.B2[:N], u2)
    a = np.concatenate([shared, shared], axis=2)
    # Hidden noise: W1 with coefficients (C1; gain_f), N1 with (D1; D1).
    S2 = np.concatenate([c.C1[:N], law.gain_f[:N]], axis=1)[:, :, None]
    S1 = np.concatenate([c.C2[:N], np.zeros((N, n))], axis=1)[:, :, None]
    H = np.concatenate([c.H2[:N], np.zeros((N, n))], axis=1)[:, None, :]
    y0 = np.einsum("kj,rkj->rk", c.h2[:N], u2)[..., None]
    J_obs = np.concatenate([c.D2, np.zeros_like(c.D2)], axis=1)
    J_hid = np.concatenate([c.D1, c.D1], axis=1)
    return LinearSignalModel(
        grid=spec.grid, F=F, a=a, S1=S1, S2=S2, H=H, y0=y0, K=c.K2[:N, None, None],
        J1=J_obs, c1=c.f2[:, None], nu1=c.nu2, J2=J_hid, nu2=c.nu1,
        z0=np.concatenate([spec.x0, spec.x0]).astype(float),
    )


def particle_filter(spec: ProblemSpec, bundle: PathBundle, feedback: FeedbackLaw | None = None,
                    n_particles: int = 1000, semantics: str = "follower", paths=None,
                    seed: int = 0, threshold: float = 0.5, snapshot_steps=()) -> ParticleRun:
    """Particle estimate of E[X | Y1] (``follower``) or E[(X, Xhat) | Y2] (``leader``).

    The observation paths and realized controls are taken from a full-record
    bundle; ``paths`` selects which bundle paths to filter.
    """
    if bundle.record != "full":
        raise ContractError("particle_filter needs a bundle recorded with record='full'")
    idx = np.arange(bundle.n_paths) if paths is None else np.asarray(paths)
    c1, c2 = bundle.jumps
    n = spec.n
    if semantics == "follower":
        model = follower_signal_model(spec, bundle["u1"][idx], bundle["u2"][idx])
        dY = np.diff(bundle["Y1"][idx], axis=1)[..., None]
        counts = c1[idx].astype(float)
        comps = {"x": slice(0, n)}
    elif semantics == "leader":
        if feedback is None:
            raise ContractError("leader semantics needs the feedback law")
        model = leader_signal_model(spec, feedback, bundle["u1exo"][idx], bundle["u2"][idx])
        dY = np.diff(bundle["Y2"][idx], axis=1)[..., None]
        counts = c2[idx].astype(float)
        comps = {"x": slice(0, n), "xhat": slice(n, 2 * n)}
    else:
        raise ContractError(f"unknown semantics {semantics!r}")
    run = run_particle_filter(model, dY, counts, n_particles, seed=seed, threshold=threshold,
                              snapshot_steps=snapshot_steps, stream_offset=0)
    run.components.update(comps)
    return run


# ---------------------------------------------------------------- diagnostics

def innovation_diagnostics(increments, horizon: float | None = None, dt: float | None = None) -> dict:
    """Statistics of innovation increments (P, N).

    Returns per-path quadratic variation, the cross-path mean increment with
    its standard error, the mean QV with its standard error, and normality
    statistics (skewness, excess kurtosis) of the increments scaled by 1/sqrt(dt).
    """
    inc = np.asarray(increments, dtype=float)
    if inc.ndim == 1:
        inc = inc[None, :]
    P, N = inc.shape
    if dt is None:
        dt = (horizon / N) if horizon is not None else 1.0 / N
    qv = np.sum(inc * inc, axis=1)
    total = inc.sum(axis=1)
    per_step = inc.mean(axis=1)
    out = {
        "n_paths": P, "steps": N, "dt": dt,
        "qv": qv,
        "qv_mean": float(qv.mean()),
        "qv_se": float(qv.std(ddof=1) / np.sqrt(P)) if P > 1 else 0.0,
        "mean_increment": float(per_step.mean()),
        "mean_increment_se": float(per_step.std(ddof=1) / np.sqrt(P)) if P > 1 else 0.0,
        "terminal_mean": float(total.mean()),
        "terminal_se": float(total.std(ddof=1) / np.sqrt(P)) if P > 1 else 0.0,
    }
    z = (inc / np.sqrt(dt)).ravel()
    zc = z - z.mean()
    var = float(np.mean(zc ** 2))
    if var > 0:
        out["increment_var"] = var
        out["skewness"] = float(np.mean(zc ** 3) / var ** 1.5)
        out["excess_kurtosis"] = float(np.mean(zc ** 4) / var ** 2 - 3.0)
    else:
        out["increment_var"] = 0.0
        out["skewness"] = 0.0
        out["excess_kurtosis"] = 0.0
    return out


def innovation_summary(V_T, qv, horizon: float) -> dict:
    """Mean and QV statistics from per-path terminal innovation values and QVs."""
    P = V_T.shape[0]
    return {
        "n_paths": P,
        "terminal_mean": float(V_T.mean()),
        "terminal_se": float(V_T.std(ddof=1) / np.sqrt(P)),
        "qv_mean": float(qv.mean()),
        "qv_se": float(qv.std(ddof=1) / np.sqrt(P)),
        "horizon": horizon,
    }


def _ols_robust(y, Xr):
    """OLS coefficients with heteroskedasticity-robust (HC0) standard errors."""
    XtX = Xr.T @ Xr
    inv = np.linalg.inv(XtX)
    beta = inv @ (Xr.T @ y)
    res = y - Xr @ beta
    meat = (Xr * res[:, None] ** 2).T @ Xr
    cov = inv @ meat @ inv
    return beta, np.sqrt(np.diag(cov))


def martingale_check_Lambda(spec: ProblemSpec, bundle: PathBundle, estimate=None,
                            innovations=None, gain_k1=None, pairs=None) -> dict:
    """Lambda(t) = xhat(t) - xhat(0) - int a-hat ds from filter output.

    ``estimate`` (P, N+1, n) defaults to the bundle's Xhat; ``innovations``
    (P, N) to its dV. a-hat = A xhat + B1 u1 + B2 u2. Tests E[Lambda(t) -
    Lambda(s)] = 0 on grid pairs and regresses the increments of Lambda on
    (dV, compensated jump counts of each E1 mark); ``gain_k1`` (N, n) or
    (P, N, n) is the formula value of k1 used for the comparison.
    """
    c = spec.cells
    N, dt, n = spec.grid.steps, spec.grid.dt, spec.n
    x = bundle["Xhat"] if estimate is None else np.asarray(estimate)
    u1, u2 = bundle["u1"], bundle["u2"]
    P = x.shape[0]
    drift = (np.einsum("kij,pkj->pki", c.A[:N], x[:, :N]) + np.einsum("kij,pkj->pki", c.B1[:N], u1)
             + np.einsum("kij,pkj->pki", c.B2[:N], u2))
    dlam = np.diff(x, axis=1) - drift * dt
    lam = np.concatenate([np.zeros((P, 1, n)), np.cumsum(dlam, axis=1)], axis=1)
    if pairs is None:
        pairs = [(0, N // 4), (N // 4, N // 2), (N // 2, N), (0, N)]
    pair_stats = []
    for s, t in pairs:
        diff = lam[:, t] - lam[:, s]
        pair_stats.append({"s": s * dt, "t": t * dt, "mean": diff.mean(axis=0).tolist(),
                           "se": (diff.std(axis=0, ddof=1) / np.sqrt(P)).tolist()})
    dv = bundle["dV"] if innovations is None else np.asarray(innovations)
    counts = bundle.jumps[0].astype(float) if bundle.jumps is not None else np.zeros((P, N, 0))
    comp = counts - dt * c.nu1
    out = {"Lambda_T_mean": lam[:, -1].mean(axis=0).tolist(),
           "Lambda_T_var": lam[:, -1].var(axis=0, ddof=1).tolist(), "pairs": pair_stats,
           "n_paths": P}
    if gain_k1 is not None:
        k1f = np.asarray(gain_k1, dtype=float)
        k1f = np.broadcast_to(k1f, (P, N, n)) if k1f.ndim == 2 else k1f
        k2f = c.D1  # (M1, n)
        reg = []
        for i in range(n):
            y = (dlam[:, :, i] - k1f[:, :, i] * dv - comp @ k2f[:, i]).ravel()
            Xr = np.concatenate([dv.reshape(-1, 1), comp.reshape(-1, comp.shape[2])], axis=1)
            beta, se = _ols_robust(y, Xr)
            k1_avg = float(k1f[:, :, i].mean())
            reg.append({
                "component": i,
                "k1_formula_mean": k1_avg, "k1_delta": float(beta[0]), "k1_se": float(se[0]),
                "k1_recovered": k1_avg + float(beta[0]),
                "k2_formula": k2f[:, i].tolist(), "k2_delta": beta[1:].tolist(),
                "k2_se": se[1:].tolist(),
                "k2_recovered": (k2f[:, i] + beta[1:]).tolist(),
            })
        out["regression"] = reg
    out["Lambda"] = lam
    return out


__all__ = [
    "FilterState", "follower_filter_step", "leader_filter_step", "sigma_closure_ode",
    "follower_gain_nodes", "XiEstimates", "xi_closure_ode", "xi_drift", "xi1_drift_reduced",
    "ParticleCloud", "estimate_xi", "ensemble_clouds", "LinearSignalModel", "kalman_filter",
    "systematic_resample", "ParticleRun", "run_particle_filter", "follower_signal_model",
    "leader_signal_model", "particle_filter", "innovation_diagnostics", "innovation_summary",
    "martingale_check_Lambda",
]
