"""Problem instance: coefficient schedules, mark spaces, costs and validation."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Any

import numpy as np

from .errors import DomainError, ProblemFormatError

# Tolerances used by validation.
INVERTIBILITY_EPS = 1e-12
DISTINCT_EPS = 1e-9
GRID_EPS = 1e-9


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = k * dt on [0, T]."""

    horizon: float
    steps: int

    def __post_init__(self):
        if not (math.isfinite(self.horizon) and self.horizon > 0):
            raise DomainError(f"horizon must be positive, got {self.horizon}")
        if int(self.steps) != self.steps or self.steps < 2:
            raise DomainError(f"steps must be an integer >= 2, got {self.steps}")
        object.__setattr__(self, "steps", int(self.steps))

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.horizon, self.steps * factor)

    def coarsen(self, factor: int = 2) -> "TimeGrid":
        if self.steps % factor:
            raise DomainError(f"{self.steps} steps cannot be coarsened by {factor}")
        return TimeGrid(self.horizon, self.steps // factor)

    def index(self, t: float) -> int | None:
        """Grid index of ``t`` if it lies on the grid, else None."""
        k = round(t / self.dt)
        if abs(k * self.dt - t) <= GRID_EPS * max(1.0, self.horizon):
            return int(k)
        return None

    def cell(self, t: float) -> int:
        """Index of the cell [t_k, t_{k+1}) containing t (the last cell for t = T)."""
        k = int(math.floor(t / self.dt + GRID_EPS))
        return min(max(k, 0), self.steps - 1)


@dataclass(frozen=True, eq=False)
class CoefficientSchedule:
    """Piecewise-constant, right-continuous matrix-valued function of time.

    ``values[i]`` holds on ``[breakpoints[i], breakpoints[i+1])``.
    """

    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        bp = np.atleast_1d(np.asarray(self.breakpoints, dtype=float))
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 0 or vals.shape[0] != bp.shape[0]:
            vals = vals.reshape((bp.shape[0],) + vals.shape[1:]) if vals.size else vals
        bp.setflags(write=False)
        vals.setflags(write=False)
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", vals)

    @classmethod
    def constant(cls, value) -> "CoefficientSchedule":
        v = np.asarray(value, dtype=float)
        return cls(np.array([0.0]), v[None, ...])

    @property
    def shape(self) -> tuple:
        return tuple(self.values.shape[1:])

    @property
    def is_constant(self) -> bool:
        return self.values.shape[0] == 1

    def segment(self, t: float) -> int:
        return max(int(np.searchsorted(self.breakpoints, t, side="right")) - 1, 0)

    def __call__(self, t: float) -> np.ndarray:
        return self.values[self.segment(t)]

    def on_nodes(self, grid: TimeGrid) -> np.ndarray:
        """Values at t_0..t_N, shape (N+1, *shape)."""
        t = grid.times + GRID_EPS * grid.dt
        idx = np.searchsorted(self.breakpoints, t, side="right") - 1
        return self.values[np.clip(idx, 0, None)]

    def reshaped(self, shape: tuple) -> "CoefficientSchedule":
        return CoefficientSchedule(self.breakpoints, self.values.reshape((-1,) + tuple(shape)))

    def to_json(self):
        if self.is_constant:
            return self.values[0].tolist()
        return {"breakpoints": self.breakpoints.tolist(), "values": self.values.tolist()}


def eval_schedule(s: CoefficientSchedule, t: float, horizon: float | None = None) -> np.ndarray:
    """Evaluate a schedule at time ``t``; ``t`` must lie in ``[0, horizon]``."""
    if not math.isfinite(t) or t < 0 or (horizon is not None and t > horizon):
        raise DomainError(f"t={t} outside [0, {horizon}]")
    return s(t)


@dataclass(frozen=True)
class Mark:
    label: str
    intensity: float
    state_jump: np.ndarray
    obs_jump: float


@dataclass(frozen=True, eq=False)
class MarkSpace:
    """Finite mark space; every mark has a constant intensity and jump amplitudes."""

    marks: tuple = ()

    @property
    def size(self) -> int:
        return len(self.marks)

    @property
    def labels(self) -> list[str]:
        return [mk.label for mk in self.marks]

    def intensities(self) -> np.ndarray:
        return np.array([mk.intensity for mk in self.marks], dtype=float)

    def state_jumps(self, n: int) -> np.ndarray:
        """Matrix of state jumps D(e), shape (M, n)."""
        if not self.marks:
            return np.zeros((0, n))
        return np.array([np.asarray(mk.state_jump, dtype=float).reshape(n) for mk in self.marks])

    def obs_jumps(self) -> np.ndarray:
        return np.array([mk.obs_jump for mk in self.marks], dtype=float)

    def index_of(self, label: str) -> int:
        return self.labels.index(label)


@dataclass(frozen=True, eq=False)
class CostSpec:
    R1: CoefficientSchedule
    R2: CoefficientSchedule
    theta1: float
    theta2: float
    g1: np.ndarray
    g2: np.ndarray


@dataclass(frozen=True, eq=False)
class CellTables:
    """Coefficients evaluated at the grid nodes, ready for array kernels.

    Every array has leading length N+1; entry k is the value on [t_k, t_{k+1}).
    Mark arrays are time constant.
    """

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
    S1: np.ndarray  # B1 R1^-1 B1^T
    S2: np.ndarray  # B2 R2^-1 B2^T
    R1inv: np.ndarray
    R2inv: np.ndarray
    D1: np.ndarray
    f1: np.ndarray
    nu1: np.ndarray
    D2: np.ndarray
    f2: np.ndarray
    nu2: np.ndarray

    @property
    def jump_cov1(self) -> np.ndarray:
        """sum_e D1 D1^T nu1."""
        return (self.D1.T * self.nu1) @ self.D1

    @property
    def jump_cov2(self) -> np.ndarray:
        return (self.D2.T * self.nu2) @ self.D2


SCHEDULE_FIELDS = ("A", "B1", "B2", "C1", "C2", "H1", "h11", "h12", "K1", "H2", "h2", "K2")


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """A full game instance.

    Scalar observations are used throughout: ``H1``, ``H2`` have shape (n,),
    ``h11``, ``h12``, ``h2`` shape (m,), ``K1``, ``K2`` are scalars and the
    Brownian coefficients ``C1``, ``C2`` are vectors of shape (n,).
    """

    n: int
    m: int
    x0: np.ndarray
    grid: TimeGrid
    A: CoefficientSchedule
    B1: CoefficientSchedule
    B2: CoefficientSchedule
    C1: CoefficientSchedule
    C2: CoefficientSchedule
    H1: CoefficientSchedule
    h11: CoefficientSchedule
    h12: CoefficientSchedule
    K1: CoefficientSchedule
    H2: CoefficientSchedule
    h2: CoefficientSchedule
    K2: CoefficientSchedule
    E1: MarkSpace
    E2: MarkSpace
    cost: CostSpec
    name: str = "problem"

    def expected_shapes(self) -> dict[str, tuple]:
        n, m = self.n, self.m
        return {
            "A": (n, n), "B1": (n, m), "B2": (n, m), "C1": (n,), "C2": (n,),
            "H1": (n,), "h11": (m,), "h12": (m,), "K1": (), "H2": (n,), "h2": (m,),
            "K2": (), "R1": (m, m), "R2": (m, m),
        }

    def schedule(self, name: str) -> CoefficientSchedule:
        if name in ("R1", "R2"):
            return getattr(self.cost, name)
        return getattr(self, name)

    def replace(self, **changes) -> "ProblemSpec":
        cost_keys = {f.name for f in dataclasses.fields(CostSpec)}
        cost_changes = {k: changes.pop(k) for k in list(changes) if k in cost_keys}
        for key in list(changes):
            if key in SCHEDULE_FIELDS and not isinstance(changes[key], CoefficientSchedule):
                changes[key] = CoefficientSchedule.constant(changes[key])
        for key in ("R1", "R2"):
            if key in cost_changes and not isinstance(cost_changes[key], CoefficientSchedule):
                cost_changes[key] = CoefficientSchedule.constant(cost_changes[key])
        for key in ("g1", "g2"):
            if key in cost_changes:
                cost_changes[key] = np.asarray(cost_changes[key], dtype=float).reshape(self.n)
        if "x0" in changes:
            changes["x0"] = np.asarray(changes["x0"], dtype=float).reshape(self.n)
        if cost_changes:
            changes["cost"] = dataclasses.replace(self.cost, **cost_changes)
        return dataclasses.replace(self, **changes)

    def with_steps(self, steps: int) -> "ProblemSpec":
        return dataclasses.replace(self, grid=TimeGrid(self.grid.horizon, steps))

    @cached_property
    def cells(self) -> CellTables:
        g = self.grid
        n = self.n
        vals = {k: self.schedule(k).on_nodes(g) for k in SCHEDULE_FIELDS + ("R1", "R2")}
        R1inv = np.linalg.inv(vals["R1"])
        R2inv = np.linalg.inv(vals["R2"])
        B1, B2 = vals["B1"], vals["B2"]
        S1 = B1 @ R1inv @ np.swapaxes(B1, 1, 2)
        S2 = B2 @ R2inv @ np.swapaxes(B2, 1, 2)
        tables = CellTables(
            **vals, S1=S1, S2=S2, R1inv=R1inv, R2inv=R2inv,
            D1=self.E1.state_jumps(n), f1=self.E1.obs_jumps(), nu1=self.E1.intensities(),
            D2=self.E2.state_jumps(n), f2=self.E2.obs_jumps(), nu2=self.E2.intensities(),
        )
        for f in dataclasses.fields(tables):
            getattr(tables, f.name).setflags(write=False)
        return tables

    def to_dict(self) -> dict:
        def marks(space):
            return [{"label": mk.label, "intensity": mk.intensity,
                     "D": np.asarray(mk.state_jump, dtype=float).tolist(), "f": mk.obs_jump}
                    for mk in space.marks]

        return {
            "name": self.name,
            "dims": {"n": self.n, "m": self.m},
            "grid": {"T": self.grid.horizon, "N": self.grid.steps},
            "x0": self.x0.tolist(),
            "state": {k: getattr(self, k).to_json() for k in ("A", "B1", "B2", "C1", "C2")},
            "observations": {k: getattr(self, k).to_json()
                             for k in ("H1", "h11", "h12", "K1", "H2", "h2", "K2")},
            "marks": {"E1": marks(self.E1), "E2": marks(self.E2)},
            "cost": {"R1": self.cost.R1.to_json(), "R2": self.cost.R2.to_json(),
                     "theta1": self.cost.theta1, "theta2": self.cost.theta2,
                     "g1": self.cost.g1.tolist(), "g2": self.cost.g2.tolist()},
        }

    @cached_property
    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


# ---------------------------------------------------------------- parsing

def _schedule_from_json(raw, shape: tuple, where: str) -> CoefficientSchedule:
    try:
        if isinstance(raw, dict):
            if set(raw) - {"breakpoints", "values"} or "values" not in raw:
                raise ProblemFormatError(f"{where}: schedule needs 'breakpoints' and 'values'")
            bp = np.asarray(raw.get("breakpoints", [0.0]), dtype=float)
            vals = np.asarray(raw["values"], dtype=float)
            if vals.shape[0] != bp.shape[0]:
                raise ProblemFormatError(
                    f"{where}: {bp.shape[0]} breakpoints but {vals.shape[0]} values")
            sched = CoefficientSchedule(bp, vals)
        else:
            sched = CoefficientSchedule.constant(np.asarray(raw, dtype=float))
    except (TypeError, ValueError) as exc:
        raise ProblemFormatError(f"{where}: not a numeric array ({exc})") from None
    if sched.shape != shape and int(np.prod(sched.shape)) == int(np.prod(shape)):
        sched = sched.reshaped(shape)
    return sched


def _vector(raw, n: int, where: str, default=None) -> np.ndarray:
    if raw is None:
        if default is None:
            raise ProblemFormatError(f"missing field {where}")
        raw = default
    try:
        v = np.asarray(raw, dtype=float)
    except (TypeError, ValueError):
        raise ProblemFormatError(f"{where}: not numeric") from None
    if v.ndim == 0:
        v = np.full(n, float(v))
    return v.reshape(-1) if v.size == n else v


def _marks_from_json(raw, n: int, where: str) -> MarkSpace:
    if raw is None:
        return MarkSpace(())
    if not isinstance(raw, list):
        raise ProblemFormatError(f"{where}: expected a list of marks")
    out = []
    for i, item in enumerate(raw):
        if not isinstance(item, dict):
            raise ProblemFormatError(f"{where}[{i}]: mark must be an object")
        try:
            label = str(item.get("label", f"e{i}"))
            nu = float(item.get("intensity", 0.0))
            D = _vector(item.get("D"), n, f"{where}[{i}].D")
            f = float(item.get("f"))
        except (TypeError, ValueError):
            raise ProblemFormatError(f"{where}[{i}]: malformed mark") from None
        out.append(Mark(label, nu, D, f))
    return MarkSpace(tuple(out))


def parse_problem(doc: dict[str, Any]) -> ProblemSpec:
    """Build a ProblemSpec from the JSON document layout."""
    if not isinstance(doc, dict):
        raise ProblemFormatError("problem document must be a JSON object")
    for key in ("dims", "grid", "state", "cost"):
        if key not in doc:
            raise ProblemFormatError(f"missing section '{key}'")
    try:
        n = int(doc["dims"]["n"])
        m = int(doc["dims"]["m"])
        T = float(doc["grid"]["T"])
        N = int(doc["grid"]["N"])
    except (KeyError, TypeError, ValueError):
        raise ProblemFormatError("dims needs integers n, m and grid needs T, N") from None
    if n < 1 or m < 1:
        raise ProblemFormatError("dims n and m must be >= 1")
    try:
        grid = TimeGrid(T, N)
    except DomainError as exc:
        raise ProblemFormatError(f"grid: {exc}") from None

    shapes = {"A": (n, n), "B1": (n, m), "B2": (n, m), "C1": (n,), "C2": (n,),
              "H1": (n,), "h11": (m,), "h12": (m,), "K1": (), "H2": (n,), "h2": (m,),
              "K2": (), "R1": (m, m), "R2": (m, m)}
    defaults = {"A": np.zeros((n, n)), "B1": np.zeros((n, m)), "B2": np.zeros((n, m)),
                "C1": np.zeros(n), "C2": np.zeros(n), "H1": np.zeros(n), "h11": np.zeros(m),
                "h12": np.zeros(m), "K1": 1.0, "H2": np.zeros(n), "h2": np.zeros(m), "K2": 1.0,
                "R1": np.eye(m), "R2": np.eye(m)}
    state = doc.get("state", {})
    obs = doc.get("observations", {})
    cost = doc.get("cost", {})
    for section, name in ((state, "state"), (obs, "observations"), (cost, "cost")):
        if not isinstance(section, dict):
            raise ProblemFormatError(f"section '{name}' must be an object")

    def sched(section, key, where):
        raw = section.get(key, defaults[key])
        return _schedule_from_json(raw, shapes[key], f"{where}.{key}")

    sch = {k: sched(state, k, "state") for k in ("A", "B1", "B2", "C1", "C2")}
    sch.update({k: sched(obs, k, "observations") for k in ("H1", "h11", "h12", "K1", "H2", "h2", "K2")})
    marks = doc.get("marks", {}) or {}
    try:
        theta1 = float(cost.get("theta1", 1.0))
        theta2 = float(cost.get("theta2", 1.0))
    except (TypeError, ValueError):
        raise ProblemFormatError("cost.theta1/theta2 must be numbers") from None
    cost_spec = CostSpec(
        R1=sched(cost, "R1", "cost"), R2=sched(cost, "R2", "cost"),
        theta1=theta1, theta2=theta2,
        g1=_vector(cost.get("g1"), n, "cost.g1", default=1.0),
        g2=_vector(cost.get("g2"), n, "cost.g2", default=1.0),
    )
    return ProblemSpec(
        n=n, m=m, x0=_vector(doc.get("x0"), n, "x0", default=0.0), grid=grid, **sch,
        E1=_marks_from_json(marks.get("E1"), n, "marks.E1"),
        E2=_marks_from_json(marks.get("E2"), n, "marks.E2"),
        cost=cost_spec, name=str(doc.get("name", "problem")),
    )


def load_problem(path) -> ProblemSpec:
    """Read a problem file. JSON syntax errors carry line and column."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProblemFormatError(
            f"{path}: JSON parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from None
    return parse_problem(doc)


# ---------------------------------------------------------------- validation

@dataclass(frozen=True)
class Violation:
    code: str
    location: str
    message: str

    def __str__(self):
        return f"[{self.code}] {self.location}: {self.message}"


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok

    def __len__(self):
        return len(self.violations)

    def __iter__(self):
        return iter(self.violations)

    def codes(self) -> list[str]:
        return [v.code for v in self.violations]


def validate_spec(spec: ProblemSpec, mode: str = "follower") -> ValidationReport:
    """Collect every violated invariant of ``spec``.

    ``mode="leader"`` additionally requires H1 to vanish identically.
    """
    out: list[Violation] = []
    add = lambda code, loc, msg: out.append(Violation(code, loc, msg))  # noqa: E731
    n, grid = spec.n, spec.grid
    T = grid.horizon

    x0 = np.asarray(spec.x0)
    if x0.shape != (n,):
        add("shape", "x0", f"expected shape ({n},), got {x0.shape}")
    elif not np.all(np.isfinite(x0)):
        add("finite", "x0", "non-finite entries")

    shapes_ok = True
    for name, shape in spec.expected_shapes().items():
        loc = ("cost." if name in ("R1", "R2") else "") + name
        s = spec.schedule(name)
        if s.shape != shape:
            add("shape", loc, f"expected shape {shape}, got {s.shape}")
            shapes_ok = False
            continue
        if not np.all(np.isfinite(s.values)):
            add("bounded", loc, "non-finite entries")
        bp = s.breakpoints
        if bp.size == 0 or abs(bp[0]) > GRID_EPS:
            add("breakpoints", loc, "first breakpoint must be 0")
        if np.any(np.diff(bp) <= 0):
            add("breakpoints", loc, "breakpoints must be strictly ascending")
        if np.any(bp >= T) or np.any(bp < 0):
            add("breakpoints", loc, f"breakpoints must lie in [0, {T})")
        for b in bp:
            if grid.index(float(b)) is None:
                add("breakpoints", loc, f"breakpoint {b} is not a grid point")

    if shapes_ok:
        times = grid.times
        for name, label in (("K1", "K₁"), ("K2", "K₂")):
            vals = spec.schedule(name).on_nodes(grid)
            bad = np.nonzero(~(np.abs(vals) > INVERTIBILITY_EPS))[0]
            if bad.size:
                add("invertible-noise-gain", f"observations.{name}",
                    f"{label} not invertible at t={times[bad[0]]:g}")
        for name in ("R1", "R2"):
            for seg in range(spec.schedule(name).values.shape[0]):
                R = spec.schedule(name).values[seg]
                if not np.all(np.isfinite(R)):
                    continue
                if not np.allclose(R, R.T, atol=1e-12, rtol=0):
                    add("positive-cost-weights", f"cost.{name}", f"{name} not symmetric (segment {seg})")
                elif np.min(np.linalg.eigvalsh(R)) <= 0:
                    add("positive-cost-weights", f"cost.{name}",
                        f"{name} not positive definite (segment {seg})")
        if mode == "leader" and np.any(spec.H1.values != 0):
            add("leader-mode", "observations.H1", "leader synthesis requires H₁ ≡ 0")

    for name, theta in (("theta1", spec.cost.theta1), ("theta2", spec.cost.theta2)):
        if not (math.isfinite(theta) and theta > 0):
            add("positive-cost-weights", f"cost.{name}", f"{name} must be > 0, got {theta}")
    for name in ("g1", "g2"):
        g = np.asarray(getattr(spec.cost, name))
        if g.shape != (n,):
            add("shape", f"cost.{name}", f"expected shape ({n},), got {g.shape}")
        elif not np.all(np.isfinite(g)):
            add("finite", f"cost.{name}", "non-finite entries")

    for sid, space in (("E1", spec.E1), ("E2", spec.E2)):
        for i, mk in enumerate(space.marks):
            loc = f"marks.{sid}[{i}]"
            if not (math.isfinite(mk.intensity) and mk.intensity >= 0):
                add("intensity", loc, f"intensity must be finite and >= 0, got {mk.intensity}")
            D = np.asarray(mk.state_jump)
            if D.shape != (n,):
                add("shape", f"{loc}.D", f"expected shape ({n},), got {D.shape}")
            elif not np.all(np.isfinite(D)):
                add("finite", f"{loc}.D", "non-finite entries")
            if not math.isfinite(mk.obs_jump) or abs(mk.obs_jump) <= DISTINCT_EPS:
                add("distinct-jump-sizes", f"{loc}.f", f"obsJump must be nonzero in {sid}")
        f = space.obs_jumps()
        for i in range(len(f)):
            for j in range(i + 1, len(f)):
                if abs(f[i] - f[j]) <= DISTINCT_EPS:
                    add("distinct-jump-sizes", f"marks.{sid}",
                        f"obsJump values not distinct in {sid} ({space.marks[i].label}, "
                        f"{space.marks[j].label})")
        labels = space.labels
        if len(set(labels)) != len(labels):
            add("labels", f"marks.{sid}", f"duplicate mark labels in {sid}")
    return ValidationReport(tuple(out))


# ---------------------------------------------------------------- instances

def toy_document(steps: int = 1000) -> dict:
    """The reference 1-d instance used by the test-suite and the CLI examples."""
    return {
        "name": "toy-1d",
        "dims": {"n": 1, "m": 1},
        "grid": {"T": 1.0, "N": steps},
        "x0": [1.0],
        "state": {"A": [[0.0]], "B1": [[1.0]], "B2": [[1.0]], "C1": [0.2], "C2": [0.2]},
        "observations": {"H1": [0.0], "h11": [0.0], "h12": [0.0], "K1": 1.0,
                         "H2": [0.5], "h2": [0.0], "K2": 1.0},
        "marks": {"E1": [{"label": "a", "intensity": 1.0, "D": [0.1], "f": 0.5}],
                  "E2": [{"label": "b", "intensity": 1.0, "D": [0.1], "f": 0.5}]},
        "cost": {"R1": [[1.0]], "R2": [[1.0]], "theta1": 1.0, "theta2": 1.0,
                 "g1": [1.0], "g2": [1.0]},
    }


def toy_spec(steps: int = 1000) -> ProblemSpec:
    return parse_problem(toy_document(steps))


def make_spec(n: int = 1, m: int = 1, T: float = 1.0, N: int = 1000, x0=None,
              E1=(), E2=(), theta1: float = 1.0, theta2: float = 1.0, g1=None, g2=None,
              R1=None, R2=None, name: str = "problem", **coefs) -> ProblemSpec:
    """Programmatic constructor; unspecified coefficients are zero (K's one).

    Marks are given as tuples ``(label, intensity, D, f)``.
    """
    doc = {
        "name": name, "dims": {"n": n, "m": m}, "grid": {"T": T, "N": N},
        "x0": np.zeros(n).tolist() if x0 is None else np.asarray(x0, dtype=float).reshape(n).tolist(),
        "state": {}, "observations": {},
        "marks": {sid: [{"label": lab, "intensity": nu, "D": np.asarray(D, dtype=float).reshape(n).tolist(), "f": f}
                        for lab, nu, D, f in marks]
                  for sid, marks in (("E1", E1), ("E2", E2))},
        "cost": {"theta1": theta1, "theta2": theta2,
                 "g1": 1.0 if g1 is None else np.asarray(g1, dtype=float).tolist(),
                 "g2": 1.0 if g2 is None else np.asarray(g2, dtype=float).tolist()},
    }
    if R1 is not None:
        doc["cost"]["R1"] = np.asarray(R1, dtype=float).tolist()
    if R2 is not None:
        doc["cost"]["R2"] = np.asarray(R2, dtype=float).tolist()
    for key, val in coefs.items():
        section = "state" if key in ("A", "B1", "B2", "C1", "C2") else "observations"
        if key not in SCHEDULE_FIELDS:
            raise TypeError(f"unknown coefficient {key}")
        if isinstance(val, dict):
            doc[section][key] = val
        else:
            doc[section][key] = np.asarray(val, dtype=float).tolist()
    return parse_problem(doc)


__all__ = [
    "TimeGrid", "CoefficientSchedule", "eval_schedule", "Mark", "MarkSpace", "CostSpec",
    "CellTables", "ProblemSpec", "parse_problem", "load_problem", "Violation",
    "ValidationReport", "validate_spec", "toy_document", "toy_spec", "make_spec",
]
