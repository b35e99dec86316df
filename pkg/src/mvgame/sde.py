"""Noise generation and closed-loop Euler simulation of the jump-diffusion game."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, ContractError, UnidentifiableJumpError
from .model import DISTINCT_EPS, MarkSpace, ProblemSpec, TimeGrid

# Stream domains inside one (seed, path) key.
_BROWNIAN, _JUMPS = 1, 2
DEFAULT_CHUNK = 4096


# ---------------------------------------------------------------- closed-loop law

@dataclass(frozen=True, eq=False)
class FeedbackLaw:
    """Affine closed-loop law evaluated at grid nodes (arrays of length N+1).

    u1 = K1x xhat + K1c xcheck + K1h h + k1o
    u2 = K2c xcheck + K2h h + k2o
    dh = (Mc xcheck + Mh h + mo) dt, h(0) = 0

    ``gain_f`` and ``gain_l`` are the innovation gains of the follower and
    leader filters. ``blocks`` carries named diagnostic trajectories.
    """

    grid: TimeGrid
    K1x: np.ndarray
    K1c: np.ndarray
    K1h: np.ndarray
    k1o: np.ndarray
    K2c: np.ndarray
    K2h: np.ndarray
    k2o: np.ndarray
    Mc: np.ndarray
    Mh: np.ndarray
    mo: np.ndarray
    gain_f: np.ndarray
    gain_l: np.ndarray
    kind: str = "custom"
    blocks: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("K1x", "K1c", "K1h", "k1o", "K2c", "K2h", "k2o", "Mc", "Mh", "mo",
                     "gain_f", "gain_l"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=float)
            if arr.shape[0] != self.grid.steps + 1:
                raise ContractError(f"law array {name} must have N+1 rows")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.K1x.shape[2]

    @property
    def m(self) -> int:
        return self.K1x.shape[1]

    def controls(self, k: int, xhat, xcheck, h):
        """(u1, u2) at node k for batches of filter states (P, n)."""
        mv = _mv
        u1 = mv(xhat, self.K1x[k]) + mv(xcheck, self.K1c[k]) + mv(h, self.K1h[k]) + self.k1o[k]
        u2 = mv(xcheck, self.K2c[k]) + mv(h, self.K2h[k]) + self.k2o[k]
        return u1, u2

    def with_gains(self, gain_f=None, gain_l=None) -> "FeedbackLaw":
        d = {name: getattr(self, name) for name in self.__dataclass_fields__}
        if gain_f is not None:
            d["gain_f"] = gain_f
        if gain_l is not None:
            d["gain_l"] = gain_l
        return FeedbackLaw(**d)


def _mv(X, M):
    X = np.atleast_2d(X)
    return np.einsum("pa,ba->pb", X, M)


def _nodes(x, grid: TimeGrid, shape: tuple) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        return np.full((grid.steps + 1,) + shape, float(arr))
    if arr.shape == shape or arr.size == int(np.prod(shape)) and arr.ndim <= len(shape):
        return np.broadcast_to(arr.reshape(shape), (grid.steps + 1,) + shape).copy()
    if arr.shape[0] == grid.steps and arr.shape[1:] == shape:
        return np.concatenate([arr, arr[-1:]], axis=0)
    if arr.shape[0] == grid.steps + 1:
        return arr.reshape((grid.steps + 1,) + shape)
    raise ContractError(f"cannot interpret schedule of shape {arr.shape} on the grid")


def default_gains(spec: ProblemSpec) -> tuple[np.ndarray, np.ndarray]:
    """Innovation gains without error-covariance terms: (C1, C2) on the nodes."""
    c = spec.cells
    return c.C1.copy(), c.C2.copy()


def open_loop_law(spec: ProblemSpec, u1=0.0, u2=0.0, gain_f=None, gain_l=None) -> FeedbackLaw:
    """Deterministic open-loop controls; ``u1``/``u2`` are constants or (N or N+1, m) arrays."""
    g, n, m = spec.grid, spec.n, spec.m
    zmn = np.zeros((g.steps + 1, m, n))
    znn = np.zeros((g.steps + 1, n, n))
    gf, gl = default_gains(spec)
    return FeedbackLaw(
        grid=g, K1x=zmn, K1c=zmn, K1h=zmn, k1o=_nodes(u1, g, (m,)),
        K2c=zmn, K2h=zmn, k2o=_nodes(u2, g, (m,)),
        Mc=znn, Mh=znn, mo=np.zeros((g.steps + 1, n)),
        gain_f=gf if gain_f is None else gain_f, gain_l=gl if gain_l is None else gain_l,
        kind="open-loop",
    )


# ---------------------------------------------------------------- noise

@dataclass(frozen=True)
class JumpEvents:
    """Sparse jump events of a batch of paths, sorted by (path, time)."""

    path: np.ndarray   # local path index
    time: np.ndarray
    mark: np.ndarray

    def step_index(self, grid: TimeGrid) -> np.ndarray:
        """Step k whose cell (t_k, t_{k+1}] contains the event."""
        k = np.ceil(self.time / grid.dt - 1e-12).astype(np.int64) - 1
        return np.clip(k, 0, grid.steps - 1)

    def counts(self, grid: TimeGrid, n_paths: int, n_marks: int, marks=None) -> np.ndarray:
        out = np.zeros((n_paths, grid.steps, n_marks), dtype=np.int32)
        mk = self.mark if marks is None else marks
        np.add.at(out, (self.path, self.step_index(grid), mk), 1)
        return out


def _philox(seed: int, path: int, domain: int) -> np.random.Generator:
    key = (int(seed) << 64) | (int(path) << 8) | domain
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True, eq=False)
class NoiseRealization:
    """Lazily generated driving noise, fully determined by (seed, path index).

    Brownian increments are drawn on a fine grid of ``grid.steps * resolution``
    steps and summed down to ``grid``; :meth:`coarsen` therefore yields the
    same Brownian paths on a coarser grid. Jump times are exact and
    independent of any grid.
    """

    seed: int
    n_paths: int
    grid: TimeGrid
    nu1: tuple
    nu2: tuple
    resolution: int = 1

    def __post_init__(self):
        if self.n_paths < 1:
            raise ConfigError("n_paths must be >= 1")
        if not (0 <= int(self.seed) < 2 ** 63):
            raise ConfigError("seed must lie in [0, 2^63)")

    @property
    def fine_steps(self) -> int:
        return self.grid.steps * self.resolution

    @property
    def digest(self) -> str:
        text = json.dumps([int(self.seed), self.n_paths, self.grid.horizon, self.fine_steps,
                           list(self.nu1), list(self.nu2)])
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def coarsen(self, factor: int) -> "NoiseRealization":
        return NoiseRealization(self.seed, self.n_paths, self.grid.coarsen(factor),
                                self.nu1, self.nu2, self.resolution * factor)

    def subset(self, n_paths: int) -> "NoiseRealization":
        return NoiseRealization(self.seed, n_paths, self.grid, self.nu1, self.nu2,
                                self.resolution)

    def _paths(self, start, stop):
        stop = self.n_paths if stop is None else min(stop, self.n_paths)
        if not 0 <= start < stop:
            raise ConfigError(f"empty path range [{start}, {stop})")
        return range(start, stop)

    def brownian(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        """Increments (dW1, dW2) of shape (P, N, 2)."""
        paths = self._paths(start, stop)
        Nf, r = self.fine_steps, self.resolution
        sd = np.sqrt(self.grid.horizon / Nf)
        out = np.empty((len(paths), self.grid.steps, 2))
        for i, p in enumerate(paths):
            z = _philox(self.seed, p, _BROWNIAN).standard_normal((Nf, 2)) * sd
            out[i] = z.reshape(self.grid.steps, r, 2).sum(axis=1) if r > 1 else z
        return out

    def events(self, start: int = 0, stop: int | None = None) -> tuple[JumpEvents, JumpEvents]:
        """Jump events of both mark spaces for paths [start, stop)."""
        paths = self._paths(start, stop)
        T = self.grid.horizon
        acc = ([], [])
        for i, p in enumerate(paths):
            gen = _philox(self.seed, p, _JUMPS)
            for sid, nus in enumerate((self.nu1, self.nu2)):
                for j, nu in enumerate(nus):
                    cnt = int(gen.poisson(nu * T)) if nu > 0 else 0
                    if cnt:
                        t = T * (1.0 - gen.random(cnt))   # in (0, T]
                        acc[sid].append((np.full(cnt, i), t, np.full(cnt, j)))
        res = []
        for parts in acc:
            if parts:
                pth = np.concatenate([a for a, _, _ in parts])
                tm = np.concatenate([b for _, b, _ in parts])
                mk = np.concatenate([c for _, _, c in parts])
                order = np.lexsort((tm, pth))
                res.append(JumpEvents(pth[order], tm[order], mk[order]))
            else:
                res.append(JumpEvents(np.zeros(0, np.int64), np.zeros(0), np.zeros(0, np.int64)))
        return res[0], res[1]


def sample_noise(spec: ProblemSpec, seed: int, n_paths: int, resolution: int = 1) -> NoiseRealization:
    """Noise for ``n_paths`` paths on the problem grid."""
    if n_paths < 1:
        raise ConfigError("n_paths must be >= 1")
    return NoiseRealization(int(seed), int(n_paths), spec.grid,
                            tuple(spec.E1.intensities().tolist()),
                            tuple(spec.E2.intensities().tolist()), resolution)


def recover_marks(spec: ProblemSpec, size, space: str | int = 1):
    """Mark label(s) whose observation jump equals ``size`` (scalar or array)."""
    sp = _space(spec, space)
    idx = recover_mark_indices(sp, size)
    labels = np.array(sp.labels, dtype=object)
    return labels[idx] if np.ndim(idx) else sp.labels[int(idx)]


def recover_mark_indices(space: MarkSpace, size):
    f = space.obs_jumps()
    s = np.asarray(size, dtype=float)
    if f.size == 0:
        if s.size:
            raise UnidentifiableJumpError("observed a jump but the mark space is empty")
        return s.astype(np.int64)
    diff = np.abs(s[..., None] - f)
    idx = np.argmin(diff, axis=-1)
    ok = np.take_along_axis(diff, idx[..., None], axis=-1)[..., 0] <= DISTINCT_EPS
    if not np.all(ok):
        bad = s[~ok].ravel()[0] if s.ndim else float(s)
        raise UnidentifiableJumpError(f"observed jump size {bad} matches no mark")
    return idx


def _space(spec: ProblemSpec, space) -> MarkSpace:
    if space in (1, "1", "E1"):
        return spec.E1
    if space in (2, "2", "E2"):
        return spec.E2
    raise ContractError(f"unknown mark space {space!r}")


# ---------------------------------------------------------------- kernel inputs

@dataclass(frozen=True, eq=False)
class KernelInputs:
    """Flat arrays consumed by both simulation backends."""

    n: int
    m: int
    dt: float
    x0: np.ndarray
    A: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    C1: np.ndarray
    C2: np.ndarray
    H1: np.ndarray
    h11: np.ndarray
    h12: np.ndarray
    K1: np.ndarray
    H2: np.ndarray
    h2: np.ndarray
    K2: np.ndarray
    R1: np.ndarray
    R2: np.ndarray
    D1: np.ndarray
    f1: np.ndarray
    nu1: np.ndarray
    D2: np.ndarray
    f2: np.ndarray
    nu2: np.ndarray
    K1x: np.ndarray
    K1c: np.ndarray
    K1h: np.ndarray
    k1o: np.ndarray
    K2c: np.ndarray
    K2h: np.ndarray
    k2o: np.ndarray
    Mc: np.ndarray
    Mh: np.ndarray
    mo: np.ndarray
    gain_f: np.ndarray
    gain_l: np.ndarray

    @classmethod
    def build(cls, spec: ProblemSpec, law: FeedbackLaw) -> "KernelInputs":
        if law.grid != spec.grid:
            raise ContractError(f"law grid {law.grid} differs from spec grid {spec.grid}")
        c = spec.cells
        arrs = {name: np.ascontiguousarray(getattr(c, name), dtype=float) for name in
                ("A", "B1", "B2", "C1", "C2", "H1", "h11", "h12", "K1", "H2", "h2", "K2",
                 "R1", "R2", "D1", "f1", "nu1", "D2", "f2", "nu2")}
        arrs.update({name: getattr(law, name) for name in
                     ("K1x", "K1c", "K1h", "k1o", "K2c", "K2h", "k2o", "Mc", "Mh", "mo",
                      "gain_f", "gain_l")})
        return cls(n=spec.n, m=spec.m, dt=spec.grid.dt,
                   x0=np.asarray(spec.x0, dtype=float), **arrs)


# ---------------------------------------------------------------- bundles

TERMINAL_KEYS = ("X_T", "Xhat_T", "Xcheck_T", "h_T", "Y1_T", "Y2_T", "run1", "run2",
                 "V_T", "U_T", "qv_V", "qv_U")
RECORD_LEVELS = {"terminal": 0, "controls": 1, "full": 2}


@dataclass(eq=False)
class PathBundle:
    """Simulated paths: grid-indexed series and per-path terminal summaries.

    Full series have shape (P, N+1, dim) for states, (P, N+1) for Y1/Y2 and
    (P, N, dim) for controls and innovation increments (left-endpoint values).
    """

    grid: TimeGrid
    n_paths: int
    data: dict
    seed: int
    noise_digest: str
    spec_digest: str
    record: str
    path_start: int = 0
    law_kind: str = ""
    jumps: tuple | None = None  # (counts1, counts2) in full mode

    def __contains__(self, key):
        return key in self.data

    def __getitem__(self, key):
        try:
            return self.data[key]
        except KeyError:
            raise ContractError(f"bundle has no series {key!r} (record={self.record})") from None

    def terminal(self, name: str) -> np.ndarray:
        """Terminal value of a state series, shape (P, n)."""
        key = name if name.endswith("_T") else name + "_T"
        if key in self.data:
            return self.data[key]
        if name in self.data:
            return self.data[name][:, -1]
        raise ContractError(f"bundle has no terminal value for {name!r}")


def _concat(parts: list[dict]) -> dict:
    return {k: np.concatenate([p[k] for p in parts], axis=0) for k in parts[0]}


def simulate_chunk(spec: ProblemSpec, law: FeedbackLaw, noise: NoiseRealization, start: int,
                   stop: int, record: str = "terminal", overrides: dict | None = None,
                   backend: str | None = None, kin: KernelInputs | None = None,
                   chunk_noise=None) -> dict:
    """Simulate paths [start, stop) and return the raw kernel outputs."""
    if noise.grid != spec.grid:
        raise ContractError("noise grid differs from spec grid")
    if kin is None:
        kin = KernelInputs.build(spec, law)
    if chunk_noise is None:
        chunk_noise = noise_chunk(spec, noise, start, stop)
    dW, c1, c2, oc1, oc2 = chunk_noise
    ov = overrides or {}
    level = RECORD_LEVELS[record]
    out = kernels.run_paths(kin, dW, c1, c2, oc1, oc2, u1_full=ov.get("u1"),
                            u1_exo=ov.get("u1exo"), u2_full=ov.get("u2"), record=level,
                            path_offset=start, backend=backend)
    if level >= 2:
        out["_c1"] = c1
        out["_c2"] = c2
    return out


def noise_chunk(spec: ProblemSpec, noise: NoiseRealization, start: int, stop: int):
    """Brownian increments, true jump counts and observation-identified counts."""
    dW = noise.brownian(start, stop)
    P = dW.shape[0]
    ev1, ev2 = noise.events(start, stop)
    c1 = ev1.counts(noise.grid, P, spec.E1.size)
    c2 = ev2.counts(noise.grid, P, spec.E2.size)
    # The filters only see the observation jump sizes; identify marks from them.
    m1 = recover_mark_indices(spec.E1, spec.E1.obs_jumps()[ev1.mark]) if ev1.mark.size else ev1.mark
    m2 = recover_mark_indices(spec.E2, spec.E2.obs_jumps()[ev2.mark]) if ev2.mark.size else ev2.mark
    oc1 = ev1.counts(noise.grid, P, spec.E1.size, marks=m1)
    oc2 = ev2.counts(noise.grid, P, spec.E2.size, marks=m2)
    return dW, c1, c2, oc1, oc2


def simulate_truth(spec: ProblemSpec, feedback: FeedbackLaw, noise: NoiseRealization,
                   record: str = "terminal", overrides: dict | None = None,
                   n_paths: int | None = None, chunk_size: int = DEFAULT_CHUNK,
                   backend: str | None = None) -> PathBundle:
    """Euler simulation of state, observations, filters and adjoint proxy h.

    ``overrides`` may hold full arrays (P, N, m) named ``u1``, ``u1exo`` or
    ``u2`` that replace the closed-loop values path by path.
    """
    if record not in RECORD_LEVELS:
        raise ConfigError(f"record must be one of {sorted(RECORD_LEVELS)}")
    P = noise.n_paths if n_paths is None else min(int(n_paths), noise.n_paths)
    if P < 1:
        raise ConfigError("n_paths must be >= 1")
    kin = KernelInputs.build(spec, feedback)
    parts = []
    for start in range(0, P, chunk_size):
        stop = min(start + chunk_size, P)
        ov = None
        if overrides:
            ov = {k: v[start:stop] for k, v in overrides.items() if v is not None}
        parts.append(simulate_chunk(spec, feedback, noise, start, stop, record, ov,
                                    backend=backend, kin=kin))
    data = _concat(parts)
    jumps = None
    if "_c1" in data:
        jumps = (data.pop("_c1"), data.pop("_c2"))
    return PathBundle(grid=spec.grid, n_paths=P, data=data, seed=noise.seed,
                      noise_digest=noise.digest, spec_digest=spec.digest, record=record,
                      law_kind=feedback.kind, jumps=jumps)


__all__ = [
    "FeedbackLaw", "open_loop_law", "default_gains", "JumpEvents", "NoiseRealization",
    "sample_noise", "recover_marks", "recover_mark_indices", "KernelInputs", "PathBundle",
    "simulate_truth", "simulate_chunk", "noise_chunk", "TERMINAL_KEYS",
]
