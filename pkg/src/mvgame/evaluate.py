"""Monte Carlo cost estimates, decomposition and optimality checks, and the
verification suite.

Every stochastic check uses a band of ``k`` standard errors (k = 3 by
default). Standard errors of nonlinear estimators (sample variances, cost
functionals, fitted perturbation coefficients) come from per-path influence
functions, so paired quantities computed on the same paths get the correct
combined error.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ._version import __version__
from .errors import ConfigError, ContractError
from .filtering import innovation_summary, martingale_check_Lambda, particle_filter
from .game import (EquilibriumSolution, feedback_controls, follower_reaction,
                   solve_follower_equilibrium, solve_leader)
from .model import ProblemSpec, make_spec
from .ode import solve_riccati_P
from .sde import (FeedbackLaw, KernelInputs, NoiseRealization, PathBundle, noise_chunk,
                  sample_noise, simulate_chunk, simulate_truth)

COST_KINDS = ("J1", "J2", "J1hat", "J1tilde", "J2check", "J2tilde", "aux1", "aux2")
K_SE = 3.0
ROUNDOFF = 1e-12


# ---------------------------------------------------------------- costs

@dataclass(frozen=True, eq=False)
class CostEstimate:
    """Estimate of a cost functional with its three components.

    ``influence`` holds the per-path influence values; their sample standard
    deviation over sqrt(n_paths) is ``stderr``.
    """

    which: str
    value: float
    stderr: float
    running: float
    mean: float
    variance: float
    n_paths: int
    influence: np.ndarray = field(repr=False)

    @property
    def components(self) -> dict:
        return {"runningCost": self.running, "meanTerm": self.mean, "varianceTerm": self.variance}

    def row(self, seed: int | None = None) -> dict:
        return {"which": self.which, "value": self.value, "stderr": self.stderr,
                "running": self.running, "mean": self.mean, "variance": self.variance,
                "n_paths": self.n_paths, "seed": seed}


def _se(x: np.ndarray) -> float:
    P = x.shape[0]
    return float(x.std(ddof=1) / np.sqrt(P)) if P > 1 else 0.0


def _mv_parts(run, xT, g, theta):
    """Mean-variance cost E[run] + <g, E x> + theta/2 tr Var x, with influences."""
    P = xT.shape[0]
    xbar = xT.mean(axis=0)
    xc = xT - xbar
    sq = np.sum(xc * xc, axis=1)
    tr = float(sq.sum() / (P - 1)) if P > 1 else 0.0
    running = float(run.mean()) if run is not None else 0.0
    mean = float(g @ xbar)
    variance = 0.5 * theta * tr
    infl = xc @ g + 0.5 * theta * (sq - tr)
    if run is not None:
        infl = infl + (run - running)
    return running, mean, variance, infl


def _aux_parts(run, xT, lam, theta):
    """Auxiliary cost E[run + <lam, x> + theta/2 |x|^2] (a plain mean)."""
    per = xT @ lam + 0.5 * theta * np.sum(xT * xT, axis=1)
    running = float(run.mean())
    mean = float((xT @ lam).mean())
    variance = float((0.5 * theta * np.sum(xT * xT, axis=1)).mean())
    tot = run + per
    return running, mean, variance, tot - tot.mean()


def estimate_cost(bundle: PathBundle, spec: ProblemSpec, which: str, lam=None) -> CostEstimate:
    """Monte Carlo estimate of a cost functional from simulated terminal values.

    ``which``: J1, J2 (true costs), J1hat/J1tilde (follower split on X-hat),
    J2check/J2tilde (leader split on X-check) or aux1/aux2 (auxiliary costs
    with terminal weight <lam, x> + theta/2 |x|^2 on X-hat resp. X-check).
    Running costs use left-endpoint quadrature (done in the kernel).
    """
    if which not in COST_KINDS:
        raise ConfigError(f"unknown cost {which!r}; choose from {COST_KINDS}")
    c = spec.cost
    X = bundle.terminal("X")
    if which in ("J1", "J1hat", "J1tilde", "aux1"):
        g, theta, run = c.g1, c.theta1, bundle["run1"]
        est = bundle.terminal("Xhat") if which != "J1" else None
    else:
        g, theta, run = c.g2, c.theta2, bundle["run2"]
        est = bundle.terminal("Xcheck") if which != "J2" else None
    if which.startswith("aux"):
        if lam is None:
            raise ContractError("auxiliary cost needs lambda")
        lam = np.asarray(lam, dtype=float).reshape(spec.n)
        parts = _aux_parts(run, est, lam, theta)
    elif which in ("J1", "J2"):
        parts = _mv_parts(run, X, g, theta)
    elif which in ("J1hat", "J2check"):
        parts = _mv_parts(run, est, g, theta)
    else:
        parts = _mv_parts(None, X - est, g, theta)
    running, mean, variance, infl = parts
    return CostEstimate(which, running + mean + variance, _se(infl), running, mean, variance,
                        X.shape[0], infl)


# ---------------------------------------------------------------- reports

@dataclass
class CheckEntry:
    name: str
    status: str
    statistic: float
    tolerance: float
    n_paths: int
    seed: int | None
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    def to_dict(self) -> dict:
        return {"name": self.name, "status": self.status, "statistic": self.statistic,
                "tolerance": self.tolerance, "n_paths": self.n_paths, "seed": self.seed,
                "details": self.details}


def _status(ok) -> str:
    return "pass" if bool(ok) else "fail"


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if np.isfinite(v) else str(v)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


@dataclass
class VerificationReport:
    checks: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, entry: CheckEntry) -> CheckEntry:
        self.checks.append(entry)
        return entry

    def extend(self, entries) -> None:
        for e in entries:
            self.add(e)

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> CheckEntry:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def names(self) -> list[str]:
        return [c.name for c in self.checks]

    def failed(self) -> list[str]:
        return [c.name for c in self.checks if not c.passed]

    def to_dict(self) -> dict:
        return _jsonable({"meta": self.meta, "ok": self.ok,
                          "checks": [c.to_dict() for c in self.checks]})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)


# ---------------------------------------------------------------- decompositions

def _var_infl(x):
    xc = x - x.mean(axis=0)
    sq = np.sum(xc * xc, axis=1)
    P = x.shape[0]
    tr = float(sq.sum() / (P - 1)) if P > 1 else 0.0
    return tr, sq - tr


def variance_decomposition_test(bundle: PathBundle, which: str = "follower", k: float = K_SE,
                                name: str | None = None) -> CheckEntry:
    """tr Var X(T) = tr Var E(T) + tr Var (X - E)(T) with E = X-hat or X-check.

    The residual equals -2 tr Cov(E, X - E); its standard error comes from the
    paired influence function of the three sample variances.
    """
    est_name = {"follower": "Xhat", "leader": "Xcheck"}.get(which)
    if est_name is None:
        raise ConfigError(f"which must be follower or leader, got {which!r}")
    X = bundle.terminal("X")
    E = bundle.terminal(est_name)
    vx, ix = _var_infl(X)
    ve, ie = _var_infl(E)
    vt, it = _var_infl(X - E)
    resid = vx - ve - vt
    se = _se(ix - ie - it)
    naive = float(np.sqrt(_se(ix) ** 2 + _se(ie) ** 2 + _se(it) ** 2))
    tol = k * se + ROUNDOFF * max(1.0, vx)
    return CheckEntry(
        name or f"variance_decomposition_{which}", _status(abs(resid) <= tol), float(resid),
        float(tol), X.shape[0], bundle.seed,
        {"var_X": vx, "var_estimate": ve, "var_error": vt, "residual": resid, "se_paired": se,
         "se_naive": naive, "k": k, "estimate": est_name})


def cost_decomposition_test(bundle: PathBundle, spec: ProblemSpec, player: str = "follower",
                            k: float = K_SE) -> CheckEntry:
    """J = J-estimate-part + J-error-part, within k paired standard errors."""
    full, a, b = (("J1", "J1hat", "J1tilde") if player == "follower"
                  else ("J2", "J2check", "J2tilde"))
    cj, ca, cb = (estimate_cost(bundle, spec, w) for w in (full, a, b))
    resid = cj.value - ca.value - cb.value
    se = _se(cj.influence - ca.influence - cb.influence)
    naive = float(np.sqrt(cj.stderr ** 2 + ca.stderr ** 2 + cb.stderr ** 2))
    tol = k * se + ROUNDOFF * max(1.0, abs(cj.value))
    return CheckEntry(
        f"cost_decomposition_{player}", _status(abs(resid) <= tol), float(resid), float(tol),
        cj.n_paths, bundle.seed,
        {full: cj.value, a: ca.value, b: cb.value, "stderr": [cj.stderr, ca.stderr, cb.stderr],
         "se_paired": se, "se_naive": naive, "k": k})


# ---------------------------------------------------------------- perturbation

def _direction_nodes(v, spec: ProblemSpec) -> np.ndarray:
    """Deterministic direction as node values (N+1, m)."""
    g, m = spec.grid, spec.m
    if callable(v):
        arr = np.array([np.asarray(v(t), dtype=float).reshape(m) for t in g.times])
    else:
        arr = np.asarray(v, dtype=float)
        if arr.ndim == 0 or arr.shape == (m,):
            arr = np.broadcast_to(arr.reshape(-1)[:m] if arr.ndim else np.full(m, float(arr)),
                                  (g.steps + 1, m))
        elif arr.shape[0] == g.steps:
            arr = np.concatenate([arr, arr[-1:]], axis=0)
    arr = np.asarray(arr, dtype=float).reshape(g.steps + 1, m)
    return arr


def default_directions(spec: ProblemSpec) -> list:
    """Constant, linear ramp and a cosine, in the first control coordinate."""
    T, m = spec.grid.horizon, spec.m
    e = np.zeros(m)
    e[0] = 1.0
    return [lambda t: e, lambda t: e * (2.0 * t / T - 1.0), lambda t: e * np.cos(np.pi * t / T)]


def _design(eps):
    eps = np.asarray(eps, dtype=float)
    if eps.size < 2 or np.unique(eps).size < 2 or np.any(eps == 0):
        raise ConfigError("perturbation needs at least two distinct nonzero epsilon values")
    D = np.column_stack([eps, eps * eps])
    if np.linalg.matrix_rank(D) < 2:
        raise ConfigError("degenerate epsilon grid")
    return np.linalg.solve(D.T @ D, D.T)  # (2, E): rows give a and b


def perturbation_optimality_test(spec: ProblemSpec, eq, player: str = "follower",
                                 perturbations=None, eps=(-0.1, -0.05, 0.05, 0.1),
                                 seed: int = 0, n_paths: int = 20000, k: float = K_SE,
                                 chunk_size: int = 4096, resolve: bool = False,
                                 noise: NoiseRealization | None = None,
                                 backend: str | None = None) -> list[CheckEntry]:
    """First-order stationarity and convexity along deterministic directions.

    For each direction v the player's control becomes u + eps v on the same
    noise (common random numbers). Follower: u2 is replayed from the
    equilibrium run. Leader: the follower's open-loop term reacts through
    :func:`follower_reaction` (``resolve`` re-solves its embedding fixed point
    as well). Fits Delta J(eps) = a eps + b eps^2 by least squares and checks
    |a| <= k SE(a) and b > 0.
    """
    if player not in ("follower", "leader"):
        raise ConfigError("player must be follower or leader")
    law: FeedbackLaw = eq.law
    dirs = default_directions(spec) if perturbations is None else list(perturbations)
    V = [_direction_nodes(v, spec) for v in dirs]
    coef = _design(eps)
    eps = np.asarray(eps, dtype=float)
    N = spec.grid.steps
    if noise is None:
        noise = sample_noise(spec, seed, n_paths)
    P = min(int(n_paths), noise.n_paths)
    kin = KernelInputs.build(spec, law)
    c = spec.cost
    g, theta, runkey = (c.g1, c.theta1, "run1") if player == "follower" else (c.g2, c.theta2, "run2")
    react = []
    if player == "leader":
        P_traj = eq.P
        react = [follower_reaction(spec, P_traj, v, resolve=resolve)[0] for v in V]
    base_run = np.empty(P)
    base_X = np.empty((P, spec.n))
    pert_run = np.empty((len(V), eps.size, P))
    pert_X = np.empty((len(V), eps.size, P, spec.n))
    for start in range(0, P, chunk_size):
        stop = min(start + chunk_size, P)
        ch = noise_chunk(spec, noise, start, stop)
        base = simulate_chunk(spec, law, noise, start, stop, "controls", kin=kin,
                              chunk_noise=ch, backend=backend)
        base_run[start:stop] = base[runkey]
        base_X[start:stop] = base["X_T"]
        for i, v in enumerate(V):
            for j, e in enumerate(eps):
                if player == "follower":
                    ov = {"u1": base["u1"] + e * v[:N], "u2": base["u2"]}
                else:
                    ov = {"u2": base["u2"] + e * v[:N], "u1exo": base["u1exo"] + e * react[i][:N]}
                out = simulate_chunk(spec, law, noise, start, stop, "terminal", ov, kin=kin,
                                     chunk_noise=ch, backend=backend)
                pert_run[i, j, start:stop] = out[runkey]
                pert_X[i, j, start:stop] = out["X_T"]
    r0, m0, v0, i0 = _mv_parts(base_run, base_X, g, theta)
    J0 = r0 + m0 + v0
    entries = []
    for i in range(len(V)):
        dJ = np.empty(eps.size)
        dI = np.empty((eps.size, P))
        for j in range(eps.size):
            r, mm, vv, ii = _mv_parts(pert_run[i, j], pert_X[i, j], g, theta)
            dJ[j] = r + mm + vv - J0
            dI[j] = ii - i0
        a, b = coef @ dJ
        se_a = _se(coef[0] @ dI)
        se_b = _se(coef[1] @ dI)
        quad = 0.5 * float(np.sum(np.einsum("ki,kij,kj->k", V[i][:N],
                                            (spec.cells.R1 if player == "follower" else spec.cells.R2)[:N],
                                            V[i][:N])) * spec.grid.dt)
        tol = k * se_a + ROUNDOFF * max(1.0, abs(J0))
        ok = abs(a) <= tol and b > 0
        entries.append(CheckEntry(
            f"perturbation_{player}_{i}", _status(ok), float(a), float(tol), P, noise.seed,
            {"a": a, "se_a": se_a, "b": b, "se_b": se_b, "b_running_only": quad,
             "eps": eps.tolist(), "delta_J": dJ.tolist(), "J0": J0, "k": k,
             "noise_digest": noise.digest, "resolve": bool(resolve)}))
    return entries


# ---------------------------------------------------------------- equilibrium checks

def mean_consistency_test(eq: EquilibriumSolution, bundle: PathBundle, k: float = K_SE) -> CheckEntry:
    """Sample means of X, X-hat, X-check at T against the deterministic mean."""
    target = eq.mean_terminal()
    worst = 0.0
    det = {}
    ok = True
    for name in ("X", "Xhat", "Xcheck"):
        x = bundle.terminal(name)
        mu = x.mean(axis=0)
        se = x.std(axis=0, ddof=1) / np.sqrt(x.shape[0])
        z = np.abs(mu - target) / np.maximum(se, 1e-300)
        ok &= bool(np.all(np.abs(mu - target) <= k * se + ROUNDOFF))
        worst = max(worst, float(np.max(z)))
        det[name] = {"mean": mu, "se": se}
    det["target"] = target
    return CheckEntry("mean_consistency", _status(ok), worst, k, bundle.n_paths, bundle.seed, det)


def fixed_point_check(eq: EquilibriumSolution, tol: float = 1e-6) -> CheckEntry:
    r = eq.fixed_point_residuals()
    worst = max(r.values())
    return CheckEntry("fixed_point_residuals", _status(worst <= tol), worst, tol, 0, None,
                      {"residuals": r, "lambda1": eq.lambda1, "lambda2": eq.lambda2})


def stationarity_residuals(eq: EquilibriumSolution, bundle: PathBundle) -> dict:
    """Max |R1 u1 + B1^T (P xhat + phi)| and |R2 u2 + B2^T (m + P h)| over all
    grid points and paths, with phi and m from the alpha blocks."""
    spec = eq.spec
    c = spec.cells
    N = spec.grid.steps
    xh, xc, h = bundle["Xhat"], bundle["Xcheck"], bundle["h"]
    u1 = bundle["u1"]
    u2 = bundle["u2"]
    # Controls at T from the feedback formula (the kernel records left endpoints only).
    last = feedback_controls(eq, spec.grid.horizon, xc[:, -1], h[:, -1], xh[:, -1])
    u1 = np.concatenate([u1, np.atleast_2d(last.u1)[:, None, :]], axis=1)
    u2 = np.concatenate([u2, np.atleast_2d(last.u2)[:, None, :]], axis=1)
    Pv = eq.P.values
    phi = eq.phi_rep(xc, h)
    m = eq.m_rep(xc, h)
    r1 = (np.einsum("kij,pkj->pki", c.R1, u1)
          + np.einsum("kji,pkj->pki", c.B1, np.einsum("kij,pkj->pki", Pv, xh) + phi))
    r2 = (np.einsum("kij,pkj->pki", c.R2, u2)
          + np.einsum("kji,pkj->pki", c.B2, m + np.einsum("kij,pkj->pki", Pv, h)))
    scale = 1.0 + max(float(np.max(np.abs(u1))), float(np.max(np.abs(u2))))
    return {"follower": float(np.max(np.abs(r1))), "leader": float(np.max(np.abs(r2))),
            "scale": scale, "points": int(u1.shape[0] * (N + 1))}


def stationarity_check(eq: EquilibriumSolution, bundle: PathBundle, tol: float = 1e-10) -> CheckEntry:
    r = stationarity_residuals(eq, bundle)
    worst = max(r["follower"], r["leader"])
    return CheckEntry("smp_stationarity", _status(worst <= tol), worst, tol, bundle.n_paths,
                      bundle.seed, r)


def decoupling_terminal_residual(eq: EquilibriumSolution, bundle: PathBundle) -> np.ndarray:
    """Per-path |Y(T) - (theta2 Xcheck(T) + lambda2; lambda1)| with Y from the
    forward Euler scheme of its backward equation along the simulated path.

    -dY = (A6 X + A1^T Y) dt - Z dU - U dN2~ with Z = alpha1 [G; 0] and
    U(e) = alpha1 [D2(e); 0], started from Y(0) = alpha1(0) X(0) + alpha2(0).
    """
    spec = eq.spec
    c = spec.cells
    N, dt, n = spec.grid.steps, spec.grid.dt, spec.n
    Xs = np.concatenate([bundle["Xcheck"], bundle["h"]], axis=2)   # (P, N+1, 2n)
    dU = bundle["dU"]
    c2 = bundle.jumps[1].astype(float)
    dN = c2 - dt * c.nu2                                            # (P, N, M2)
    a1, a2 = eq.alpha1.values, eq.alpha2.values
    G = eq.law.gain_l
    P_ = Xs.shape[0]
    Y = np.einsum("ij,pj->pi", a1[0], Xs[:, 0]) + a2[0]
    pad = np.zeros(n)
    for k in range(N):
        A1, _, A6 = eq.system.blocks_from(k, eq.P.values[k])
        drift = np.einsum("ij,pj->pi", A6, Xs[:, k]) + np.einsum("ji,pj->pi", A1, Y)
        Z = a1[k] @ np.concatenate([G[k], pad])
        Y = Y - drift * dt + Z[None, :] * dU[:, k][:, None]
        if c.D2.shape[0]:
            Um = np.stack([a1[k] @ np.concatenate([d, pad]) for d in c.D2])  # (M2, 2n)
            Y = Y + dN[:, k] @ Um
    target = np.concatenate([spec.cost.theta2 * Xs[:, -1, :n] + eq.lambda2,
                             np.broadcast_to(eq.lambda1, (P_, n))], axis=1)
    return np.linalg.norm(Y - target, axis=1)


def decoupling_convergence(spec: ProblemSpec, seed: int, n_paths: int = 1000,
                           backend: str | None = None) -> dict:
    """RMS terminal decoupling residual at dt and dt/2 on shared Brownian paths."""
    fine = spec.with_steps(2 * spec.grid.steps)
    noise_f = sample_noise(fine, seed, n_paths)
    noise_c = noise_f.coarsen(2)
    out = {}
    for label, sp, nz in (("coarse", spec, noise_c), ("fine", fine, noise_f)):
        eq = solve_leader(sp)
        b = simulate_truth(sp, eq.law, nz, record="full", backend=backend)
        r = decoupling_terminal_residual(eq, b)
        out[label] = {"dt": sp.grid.dt, "rms": float(np.sqrt(np.mean(r * r)))}
    out["ratio"] = out["coarse"]["rms"] / out["fine"]["rms"] if out["fine"]["rms"] > 0 else np.inf
    return out


def decoupling_check(spec: ProblemSpec, seed: int, n_paths: int = 1000, band=(1.5, 3.0),
                     backend: str | None = None) -> CheckEntry:
    r = decoupling_convergence(spec, seed, n_paths, backend)
    ok = band[0] <= r["ratio"] <= band[1]
    r["monotone"] = r["fine"]["rms"] < r["coarse"]["rms"]
    return CheckEntry("decoupling_residual", _status(ok), float(r["ratio"]), float(band[1]),
                      n_paths, seed, {**r, "band": list(band)})


# ---------------------------------------------------------------- Riccati oracle

def riccati_oracle(steps: int = 1000, coarse=(10, 20, 40)) -> dict:
    """Scalar P with A=0, B1=R1=theta1=1, T=1 against p(t) = 1/(1 + T - t).

    The self-convergence ratio is measured on coarse grids: at dt = 1e-3 the
    RK4 error is already at rounding level and ratios there are noise.
    """
    def err(N):
        sp = make_spec(N=N, B1=[[1.0]], theta1=1.0)
        P = solve_riccati_P(sp).values[:, 0, 0]
        t = sp.grid.times
        return float(np.max(np.abs(P - 1.0 / (1.0 + (1.0 - t)))))

    e_main = err(steps)
    errs = [err(N) for N in coarse]
    ratios = [errs[i] / errs[i + 1] for i in range(len(errs) - 1)]
    return {"max_error": e_main, "steps": steps, "coarse_steps": list(coarse),
            "coarse_errors": errs, "ratios": ratios}


def riccati_check(tol: float = 1e-8, band=(8.0, 32.0)) -> CheckEntry:
    r = riccati_oracle()
    ok = r["max_error"] <= tol and all(band[0] <= q <= band[1] for q in r["ratios"])
    r["monotone"] = all(r["coarse_errors"][i + 1] < r["coarse_errors"][i]
                        for i in range(len(r["coarse_errors"]) - 1))
    return CheckEntry("riccati_oracle", _status(ok), r["max_error"], tol, 0, None,
                      {**r, "band": list(band)})


# ---------------------------------------------------------------- filters

def innovation_check(bundle: PathBundle, which: str = "follower", k: float = K_SE) -> CheckEntry:
    """Terminal innovation value has mean 0 and its quadratic variation mean T."""
    key, qkey = ("V_T", "qv_V") if which == "follower" else ("U_T", "qv_U")
    T = bundle.grid.horizon
    s = innovation_summary(bundle[key], bundle[qkey], T)
    z_mean = abs(s["terminal_mean"]) / s["terminal_se"] if s["terminal_se"] > 0 else np.inf
    z_qv = abs(s["qv_mean"] - T) / s["qv_se"] if s["qv_se"] > 0 else np.inf
    ok = z_mean <= k and z_qv <= k
    return CheckEntry(f"innovation_{which}", _status(ok), float(max(z_mean, z_qv)), k,
                      s["n_paths"], bundle.seed, {**s, "z_mean": z_mean, "z_qv": z_qv})


def filter_equivalence(spec: ProblemSpec, eq_law: FeedbackLaw, seed: int, n_obs_paths: int = 50,
                       particles=(1000, 4000), backend: str | None = None) -> dict:
    """Particle estimate of E[X | Y1] against the closed-form follower filter (H1 = 0).

    Returns the RMS difference over paths and grid nodes for each particle
    count, the RMS particle standard error sqrt(cloud variance / ESS), and the
    ratio of RMS differences between consecutive counts.
    """
    noise = sample_noise(spec, seed, n_obs_paths)
    b = simulate_truth(spec, eq_law, noise, record="full", backend=backend)
    xh = b["Xhat"]
    res = {"n_obs_paths": n_obs_paths, "particles": list(particles), "rms": [], "rms_se": []}
    for j, npart in enumerate(particles):
        run = particle_filter(spec, b, n_particles=npart, semantics="follower",
                              seed=seed * 1000 + 17 + j)
        d = run.mean - xh
        var = np.einsum("rkii->rk", run.cov)
        se2 = var / run.ess
        res["rms"].append(float(np.sqrt(np.mean(np.sum(d * d, axis=2)))))
        res["rms_se"].append(float(np.sqrt(np.mean(se2))))
    res["ratios"] = [res["rms"][i] / res["rms"][i + 1] for i in range(len(particles) - 1)]
    return res


def filter_equivalence_check(spec: ProblemSpec, eq_law: FeedbackLaw, seed: int,
                             n_obs_paths: int = 50, particles=(1000, 4000), k: float = K_SE,
                             band=(1.6, 2.5), backend: str | None = None) -> CheckEntry:
    r = filter_equivalence(spec, eq_law, seed, n_obs_paths, particles, backend)
    ok = r["rms"][-1] <= k * r["rms_se"][-1] and all(band[0] <= q <= band[1] for q in r["ratios"])
    return CheckEntry("filter_equivalence", _status(ok), r["rms"][-1], k * r["rms_se"][-1],
                      n_obs_paths, seed, {**r, "band": list(band), "k": k})


def lambda_instance(spec: ProblemSpec) -> ProblemSpec:
    """Follower-mode instance with an informative drift for the Lambda check.

    Uses the problem itself when H1 is nonzero; otherwise H1 is set to H2 (or
    to one when H2 vanishes too).
    """
    if np.any(spec.H1.values != 0):
        return spec
    H2 = spec.cells.H2[0]
    H1 = H2 if np.any(H2 != 0) else np.ones(spec.n)
    return spec.replace(H1=H1)


def lambda_martingale_test(spec: ProblemSpec, seed: int, n_obs_paths: int = 100,
                           n_particles: int = 2000, k: float = K_SE,
                           backend: str | None = None) -> dict:
    """Regression of the Lambda increments built from a particle estimate.

    The particle mean serves as the conditional mean x-hat; its cloud
    covariance gives the formula value k1 = cov H^T K^-1 + C1, and k2 is the
    jump size D1 of each observed mark.
    """
    fol = solve_follower_equilibrium(spec)
    noise = sample_noise(spec, seed, n_obs_paths)
    b = simulate_truth(spec, fol.law, noise, record="full", backend=backend)
    run = particle_filter(spec, b, n_particles=n_particles, semantics="follower",
                          seed=seed * 1000 + 29)
    c = spec.cells
    N, dt = spec.grid.steps, spec.grid.dt
    xh = run.mean
    # Innovation increments of the particle estimate.
    c1 = b.jumps[0].astype(float)
    dY = np.diff(b["Y1"], axis=1)
    dYc = dY - c1 @ c.f1 + dt * float(c.nu1 @ c.f1)
    pred = (np.einsum("ki,pki->pk", c.H1[:N], xh[:, :N]) + np.einsum("kj,pkj->pk", c.h11[:N], b["u1"])
            + np.einsum("kj,pkj->pk", c.h12[:N], b["u2"]))
    dv = (dYc - pred * dt) / c.K1[:N]
    k1 = np.einsum("pkij,kj->pki", run.cov[:, :N], c.H1[:N]) / c.K1[:N, None] + c.C1[:N]
    r = martingale_check_Lambda(spec, b, estimate=xh, innovations=dv, gain_k1=k1)
    r.pop("Lambda", None)
    return r


def lambda_check(spec: ProblemSpec, seed: int, n_obs_paths: int = 100, n_particles: int = 2000,
                 k: float = K_SE, backend: str | None = None) -> CheckEntry:
    inst = lambda_instance(spec)
    r = lambda_martingale_test(inst, seed, n_obs_paths, n_particles, k, backend)
    z = []
    for reg in r["regression"]:
        z.append(abs(reg["k1_delta"]) / reg["k1_se"])
        z.extend(abs(d) / s for d, s in zip(reg["k2_delta"], reg["k2_se"]))
    for pr in r["pairs"]:
        z.extend(abs(m) / s for m, s in zip(pr["mean"], pr["se"]) if s > 0)
    worst = float(max(z)) if z else 0.0
    return CheckEntry("lambda_martingale", _status(worst <= k), worst, k, n_obs_paths, seed,
                      {**r, "instance_digest": inst.digest})


# ---------------------------------------------------------------- suite

@dataclass(frozen=True)
class VerificationSettings:
    seed: int = 42
    n_paths: int = 20000
    n_particles: int = 4000
    pf_paths: int = 50
    lambda_paths: int = 100
    lambda_particles: int = 2000
    decoupling_paths: int = 1000
    innovation_paths: int = 10000
    stationarity_paths: int = 1000
    perturbation_paths: int | None = None
    eps: tuple = (-0.1, -0.05, 0.05, 0.1)
    k: float = K_SE
    chunk_size: int = 4096
    backend: str | None = None

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__ if f != "backend"}


def run_verification_suite(spec: ProblemSpec, settings: VerificationSettings | None = None,
                           progress=None) -> VerificationReport:
    """Run every check on ``spec``; deterministic given (spec, settings)."""
    s = settings or VerificationSettings()
    say = progress or (lambda msg: None)
    rep = VerificationReport(meta={"version": __version__, "spec_digest": spec.digest,
                                   "seed": s.seed, "grid": {"T": spec.grid.horizon,
                                                            "N": spec.grid.steps},
                                   "settings": s.to_dict()})
    say("riccati oracle")
    rep.add(riccati_check())
    say("equilibrium")
    eq = solve_leader(spec)
    rep.add(fixed_point_check(eq))

    say("terminal simulation")
    noise = sample_noise(spec, s.seed, s.n_paths)
    bundle = simulate_truth(spec, eq.law, noise, chunk_size=s.chunk_size, backend=s.backend)
    rep.add(mean_consistency_test(eq, bundle, s.k))
    rep.add(variance_decomposition_test(bundle, "follower", s.k))
    rep.add(variance_decomposition_test(bundle, "leader", s.k))
    rep.add(cost_decomposition_test(bundle, spec, "follower", s.k))
    rep.add(cost_decomposition_test(bundle, spec, "leader", s.k))
    ninn = min(s.innovation_paths, s.n_paths)
    sub = PathBundle(bundle.grid, ninn, {k_: v[:ninn] for k_, v in bundle.data.items()},
                     bundle.seed, bundle.noise_digest, bundle.spec_digest, bundle.record)
    rep.add(innovation_check(sub, "follower", s.k))
    rep.add(innovation_check(sub, "leader", s.k))

    say("stationarity")
    nst = min(s.stationarity_paths, s.n_paths)
    full = simulate_truth(spec, eq.law, noise, record="full", n_paths=nst, backend=s.backend)
    rep.add(stationarity_check(eq, full))

    say("decoupling residual")
    rep.add(decoupling_check(spec, s.seed, s.decoupling_paths, backend=s.backend))

    say("filter equivalence")
    rep.add(filter_equivalence_check(spec, eq.law, s.seed, s.pf_paths,
                                     (max(2, s.n_particles // 4), s.n_particles), s.k,
                                     backend=s.backend))
    say("lambda martingale")
    rep.add(lambda_check(spec, s.seed, s.lambda_paths, s.lambda_particles, s.k, s.backend))

    say("perturbation tests")
    npert = s.perturbation_paths or s.n_paths
    for player in ("follower", "leader"):
        rep.extend(perturbation_optimality_test(spec, eq, player, eps=s.eps, seed=s.seed,
                                                n_paths=npert, k=s.k, chunk_size=s.chunk_size,
                                                noise=noise if npert <= noise.n_paths else None,
                                                backend=s.backend))
    return rep


__all__ = [
    "COST_KINDS", "CostEstimate", "estimate_cost", "CheckEntry", "VerificationReport",
    "variance_decomposition_test", "cost_decomposition_test", "default_directions",
    "perturbation_optimality_test", "mean_consistency_test", "fixed_point_check",
    "stationarity_residuals", "stationarity_check", "decoupling_terminal_residual",
    "decoupling_convergence", "decoupling_check", "riccati_oracle", "riccati_check",
    "innovation_check", "filter_equivalence", "filter_equivalence_check", "lambda_instance",
    "lambda_martingale_test", "lambda_check", "VerificationSettings", "run_verification_suite",
]
