"""Command line front end.

Exit codes: 0 ok, 1 usage or parse error, 2 validation failure, 3 numerical
failure, 4 verification failure.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import io
from .errors import (ConfigError, DegenerateFilterError, DomainError, FixedPointSingularError,
                     MVGameError, ProblemFormatError, SimulationDivergedError, SingularityError,
                     UnsupportedModeError)
from .model import ProblemSpec, load_problem, validate_spec

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_VERIFY = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive(kind):
    def conv(text):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid {kind.__name__} value: {text!r}") from None
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v
    return conv


def _nonneg_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid int value: {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mvgame", description="Mean-variance Stackelberg games with partial "
                "information and jumps.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def common(sp, out=True, seed=False, paths=False, particles=False):
        sp.add_argument("problem", nargs="?", help="problem file (JSON)")
        sp.add_argument("--config", metavar="PATH", help="problem file (alternative to the positional)")
        sp.add_argument("--dt", type=_positive(float), help="override the time step")
        if out:
            sp.add_argument("--out", metavar="DIR", default=".", help="output directory")
        if seed:
            sp.add_argument("--seed", type=_nonneg_int, default=42)
        if paths:
            sp.add_argument("--paths", type=_positive(int), default=None)
        if particles:
            sp.add_argument("--particles", type=_positive(int), default=None)

    common(sub.add_parser("validate", help="check a problem file"), out=False)
    common(sub.add_parser("synthesize", help="write gains.csv and lambda.json"))
    s = sub.add_parser("simulate", help="simulate closed-loop paths, write paths.csv")
    common(s, seed=True, paths=True)
    s.add_argument("--save", type=_positive(int), default=10, help="paths written to the CSV")
    f = sub.add_parser("filter", help="filter series and diagnostics for one observation path")
    common(f, seed=True, paths=True, particles=True)
    common(sub.add_parser("evaluate", help="cost estimates, write costs.csv"), seed=True, paths=True)
    v = sub.add_parser("verify", help="run the verification suite, write report.json")
    common(v, seed=True, paths=True, particles=True)
    pl = sub.add_parser("plot", help="render CSV columns as an SVG line chart")
    pl.add_argument("csv", nargs="?", help="input CSV")
    pl.add_argument("--config", metavar="PATH", help="input CSV (alternative to the positional)")
    pl.add_argument("--columns", nargs="+", required=True)
    pl.add_argument("--out", metavar="PATH", default=".", help="output directory or .svg path")
    pl.add_argument("--path", type=_nonneg_int, default=None,
                    help="for long tables with a path column, plot this path only")
    return p


# ---------------------------------------------------------------- helpers

def _problem(args) -> ProblemSpec:
    path = args.config or args.problem
    if not path:
        raise UsageError("a problem file is required (positional or --config)")
    if args.problem and args.config and args.problem != args.config:
        raise UsageError("give the problem file once")
    try:
        spec = load_problem(path)
    except FileNotFoundError:
        raise UsageError(f"no such file: {path}") from None
    if getattr(args, "dt", None):
        steps = spec.grid.horizon / args.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise UsageError(f"--dt {args.dt} does not divide the horizon {spec.grid.horizon}")
        spec = spec.with_steps(int(round(steps)))
    return spec


def _require_valid(spec: ProblemSpec, mode: str = "leader"):
    rep = validate_spec(spec, mode=mode)
    if not rep.ok:
        for v in rep:
            print(str(v), file=sys.stderr)
        raise _ValidationFailed()


class _ValidationFailed(Exception):
    pass


def _out(args) -> Path:
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    return d


# ---------------------------------------------------------------- commands

def cmd_validate(args) -> int:
    spec = _problem(args)
    rep = validate_spec(spec, mode="follower")
    lead = validate_spec(spec, mode="leader")
    if not rep.ok:
        for v in rep:
            print(str(v))
        return EXIT_VALIDATION
    print(f"ok: {spec.name} (n={spec.n}, m={spec.m}, T={spec.grid.horizon}, N={spec.grid.steps})")
    if not lead.ok:
        for v in lead:
            print(f"note (leader mode): {v}")
    return EXIT_OK


def cmd_synthesize(args) -> int:
    from .game import solve_leader
    spec = _problem(args)
    _require_valid(spec)
    eq = solve_leader(spec)
    d = _out(args)
    meta = io.metadata(spec, None, command="synthesize", fixed_point=eq.meta["fixed_point"])
    io.write_gains(d / "gains.csv", eq, meta)
    io.write_lambda(d / "lambda.json", eq, meta)
    r = eq.fixed_point_residuals()
    print(f"lambda1={eq.lambda1.tolist()} lambda2={eq.lambda2.tolist()} "
          f"residuals=({r['lambda1']:.3e}, {r['lambda2']:.3e})")
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .game import solve_leader
    from .sde import sample_noise, simulate_truth
    spec = _problem(args)
    _require_valid(spec)
    n_paths = args.paths or 100
    eq = solve_leader(spec)
    save = min(args.save, n_paths)
    noise = sample_noise(spec, args.seed, n_paths)
    full = simulate_truth(spec, eq.law, noise, record="full", n_paths=save)
    d = _out(args)
    meta = io.metadata(spec, args.seed, command="simulate", n_paths=n_paths, n_saved=save)
    h, rows = io.paths_table(full, save)
    io.write_csv(d / "paths.csv", h, rows, meta)
    if n_paths > save:
        term = simulate_truth(spec, eq.law, noise)
    else:
        term = full
    xT = term.terminal("X")
    print(f"simulated {n_paths} paths; mean X(T) = {xT.mean(axis=0).tolist()}, "
          f"expected {eq.mean_terminal().tolist()}")
    return EXIT_OK


def cmd_filter(args) -> int:
    from .filtering import innovation_diagnostics, particle_filter
    from .game import solve_leader
    from .sde import sample_noise, simulate_truth
    spec = _problem(args)
    _require_valid(spec)
    eq = solve_leader(spec)
    n_paths = args.paths or 1
    noise = sample_noise(spec, args.seed, n_paths)
    b = simulate_truth(spec, eq.law, noise, record="full")
    n = spec.n
    t = spec.grid.times
    cols = [t, b["Xhat"][0], eq.sigma.values.reshape(len(t), -1), eq.xi[1].reshape(len(t), -1),
            b["Xcheck"][0]]
    header = (["t"] + [f"xhat_{i}" for i in range(n)]
              + [f"Sigma_{i}{j}" for i in range(n) for j in range(n)]
              + [f"Xi1_{i}{j}" for i in range(n) for j in range(n)]
              + [f"xcheck_{i}" for i in range(n)])
    if args.particles:
        run = particle_filter(spec, b, n_particles=args.particles, semantics="follower",
                              paths=[0], seed=args.seed)
        cols.append(run.mean[0])
        header += [f"pf_xhat_{i}" for i in range(n)]
    d = _out(args)
    meta = io.metadata(spec, args.seed, command="filter", n_paths=n_paths,
                       n_particles=args.particles, closure="approximate")
    io.write_csv(d / "filter.csv", header, np.column_stack(cols).tolist(), meta)
    diag = {}
    for name, key in (("follower", "dV"), ("leader", "dU")):
        r = innovation_diagnostics(b[key], spec.grid.horizon)
        r.pop("qv")
        diag[name] = r
    io.write_json(d / "diagnostics.json", diag, meta)
    print(f"filter series written for path 0 of {n_paths}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluate import COST_KINDS, estimate_cost
    from .game import solve_leader
    from .sde import sample_noise, simulate_truth
    spec = _problem(args)
    _require_valid(spec)
    n_paths = args.paths or 10000
    eq = solve_leader(spec)
    noise = sample_noise(spec, args.seed, n_paths)
    b = simulate_truth(spec, eq.law, noise)
    ests = []
    for w in COST_KINDS:
        lam = eq.lambda1 if w == "aux1" else eq.lambda2 if w == "aux2" else None
        ests.append(estimate_cost(b, spec, w, lam))
    d = _out(args)
    meta = io.metadata(spec, args.seed, command="evaluate", n_paths=n_paths)
    io.write_costs(d / "costs.csv", ests, args.seed, meta)
    for e in ests:
        print(f"{e.which:8s} {e.value: .6f} +- {e.stderr:.2e}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .evaluate import VerificationSettings, run_verification_suite
    spec = _problem(args)
    _require_valid(spec)
    kw = {"seed": args.seed}
    if args.paths:
        kw["n_paths"] = args.paths
        kw["innovation_paths"] = min(args.paths, VerificationSettings.innovation_paths)
    if args.particles:
        kw["n_particles"] = args.particles
    settings = VerificationSettings(**kw)
    rep = run_verification_suite(spec, settings,
                                 progress=lambda m: print(f"[verify] {m}", file=sys.stderr))
    d = _out(args)
    meta = io.metadata(spec, args.seed, command="verify", settings=settings.to_dict())
    body = rep.to_dict()
    body.pop("meta", None)
    io.write_json(d / "report.json", body, meta)
    for c in rep.checks:
        print(f"{c.status.upper():4s} {c.name}: statistic={c.statistic:.4g} tolerance={c.tolerance:.4g}")
    print("all checks passed" if rep.ok else f"failed: {', '.join(rep.failed())}")
    return EXIT_OK if rep.ok else EXIT_VERIFY


def cmd_plot(args) -> int:
    src = args.config or args.csv
    if not src:
        raise UsageError("an input CSV is required")
    try:
        meta, header, data = io.read_csv(src)
    except FileNotFoundError:
        raise UsageError(f"no such file: {src}") from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    missing = [c for c in args.columns if c not in header]
    if missing:
        raise UsageError(f"unknown column(s) {missing}; have {header}")
    if "t" not in header:
        raise UsageError("CSV has no t column")
    rows = data
    if "path" in header:
        p = 0 if args.path is None else args.path
        rows = data[data[:, header.index("path")] == p]
    x = rows[:, header.index("t")]
    series = {c: rows[:, header.index(c)] for c in args.columns}
    svg_meta = {"tool": "mvgame", "version": io.__version__, "source": Path(src).name,
                "spec_digest": meta.get("spec_digest"), "seed": meta.get("seed"),
                "grid": meta.get("grid")}
    out = Path(args.out)
    if out.suffix.lower() != ".svg":
        out.mkdir(parents=True, exist_ok=True)
        out = out / (Path(src).stem + "_" + "_".join(args.columns) + ".svg")
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(io.svg_line_chart(x, series, xlabel="t", ylabel=", ".join(args.columns),
                                     title=Path(src).name, meta=svg_meta))
    print(str(out))
    return EXIT_OK


COMMANDS = {"validate": cmd_validate, "synthesize": cmd_synthesize, "simulate": cmd_simulate,
            "filter": cmd_filter, "evaluate": cmd_evaluate, "verify": cmd_verify, "plot": cmd_plot}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"mvgame: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ProblemFormatError as exc:
        print(f"mvgame: parse error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _ValidationFailed:
        return EXIT_VALIDATION
    except UnsupportedModeError as exc:
        print(f"mvgame: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ConfigError, DomainError) as exc:
        print(f"mvgame: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SingularityError, FixedPointSingularError, SimulationDivergedError,
            DegenerateFilterError) as exc:
        print(f"mvgame: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except MVGameError as exc:
        print(f"mvgame: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
