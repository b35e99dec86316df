"""Output files: CSV and JSON with a metadata header, and SVG line charts.

CSV files start with ``#``-comment lines carrying the tool version, spec
digest, seed and grid; JSON files carry the same record under ``meta``.
Numbers are written with ``repr`` so reruns are byte-identical.
"""
from __future__ import annotations

import csv
import io as _io
import json
from pathlib import Path

import numpy as np

from ._version import __version__


def metadata(spec=None, seed=None, **extra) -> dict:
    meta = {"tool": "mvgame", "version": __version__}
    if spec is not None:
        meta["spec_digest"] = spec.digest
        meta["grid"] = {"T": spec.grid.horizon, "N": spec.grid.steps}
    meta["seed"] = seed
    meta.update(extra)
    return meta


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _header_lines(meta: dict) -> list[str]:
    return [f"# {k}: {json.dumps(v, sort_keys=True)}" for k, v in meta.items()]


def write_csv(path, header: list[str], rows, meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = _io.StringIO()
    for line in _header_lines(meta):
        buf.write(line + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    path.write_text(buf.getvalue())
    return path


def _num(v: str) -> float:
    try:
        return float(v)
    except ValueError:
        return float("nan")


def read_csv(path) -> tuple[dict, list[str], np.ndarray]:
    """Return (metadata, column names, float array) of a file written by :func:`write_csv`.

    Non-numeric cells (such as the ``which`` column of costs.csv) read as NaN.
    """
    meta, body = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition(":")
            try:
                meta[key.strip()] = json.loads(val.strip())
            except json.JSONDecodeError:
                meta[key.strip()] = val.strip()
        elif line.strip():
            body.append(line)
    rows = list(csv.reader(body))
    if not rows:
        raise ValueError(f"{path}: no header row")
    header = rows[0]
    data = (np.array([[_num(v) for v in r] for r in rows[1:]]) if len(rows) > 1
            else np.zeros((0, len(header))))
    return meta, header, data


def write_json(path, obj: dict, meta: dict) -> Path:
    from .evaluate import _jsonable
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"meta": meta}
    payload.update(obj)
    path.write_text(json.dumps(_jsonable(payload), indent=2) + "\n")
    return path


# ---------------------------------------------------------------- tables

def _mat_cols(prefix: str, rows: int, cols: int) -> list[str]:
    return [f"{prefix}_{i}{j}" for i in range(rows) for j in range(cols)]


def gains_table(eq) -> tuple[list[str], list[list]]:
    """Columns t, P_ij, a1_ij (2n x 2n) and a2_i (2n) on the grid nodes."""
    n = eq.n
    header = ["t"] + _mat_cols("P", n, n) + _mat_cols("a1", 2 * n, 2 * n) + [f"a2_{i}" for i in range(2 * n)]
    t = eq.spec.grid.times
    P = eq.P.values.reshape(len(t), -1)
    a1 = eq.alpha1.values.reshape(len(t), -1)
    a2 = eq.alpha2.values.reshape(len(t), -1)
    rows = np.column_stack([t, P, a1, a2])
    return header, rows.tolist()


def write_gains(path, eq, meta) -> Path:
    h, rows = gains_table(eq)
    return write_csv(path, h, rows, meta)


def write_lambda(path, eq, meta) -> Path:
    r = eq.fixed_point_residuals()
    return write_json(path, {"lambda1": eq.lambda1, "lambda2": eq.lambda2,
                             "residuals": [r["lambda1"], r["lambda2"]],
                             "phi_check_relation": eq.meta.get("phi_check_relation")}, meta)


def paths_table(bundle, n_save: int | None = None) -> tuple[list[str], list[list]]:
    """Long table of the first ``n_save`` paths.

    Columns path, t, X, Y1, Y2, Xhat, Xcheck, h, u1, u2. Controls are
    left-endpoint values, so the last node carries NaN controls.
    """
    P = bundle.n_paths if n_save is None else min(int(n_save), bundle.n_paths)
    n = bundle["X"].shape[2]
    m = bundle["u1"].shape[2]
    header = (["path", "t"] + [f"X_{i}" for i in range(n)] + ["Y1", "Y2"]
              + [f"{nm}_{i}" for nm in ("Xhat", "Xcheck", "h") for i in range(n)]
              + [f"{nm}_{i}" for nm in ("u1", "u2") for i in range(m)])
    t = bundle.grid.times
    pad = np.full((1, m), np.nan)
    rows = []
    for p in range(P):
        block = np.column_stack([np.full(len(t), p), t, bundle["X"][p], bundle["Y1"][p], bundle["Y2"][p],
                                 bundle["Xhat"][p], bundle["Xcheck"][p], bundle["h"][p],
                                 np.vstack([bundle["u1"][p], pad]), np.vstack([bundle["u2"][p], pad])])
        for r in block:
            rows.append([int(r[0])] + r[1:].tolist())
    return header, rows


def write_costs(path, estimates, seed, meta) -> Path:
    header = ["which", "value", "stderr", "running", "mean", "variance", "n_paths", "seed"]
    rows = [[e.which, e.value, e.stderr, e.running, e.mean, e.variance, e.n_paths, seed]
            for e in estimates]
    return write_csv(path, header, rows, meta)


# ---------------------------------------------------------------- SVG

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def _nice(x: float) -> str:
    return f"{x:.4g}"


def svg_line_chart(x, series: dict, xlabel: str = "t", ylabel: str = "", title: str = "",
                   meta: dict | None = None, width: int = 640, height: int = 400) -> str:
    """Standalone SVG: one polyline per series, axes with labels and a legend."""
    x = np.asarray(x, dtype=float)
    left, right, top, bottom = 70, 150, 40, 50
    pw, ph = width - left - right, height - top - bottom
    ys = [np.asarray(v, dtype=float) for v in series.values()]
    allv = np.concatenate(ys) if ys else np.zeros(1)
    finite = allv[np.isfinite(allv)]
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    if hi - lo < 1e-300:
        lo, hi = lo - 0.5, hi + 0.5
    xlo, xhi = (float(x.min()), float(x.max())) if x.size else (0.0, 1.0)
    if xhi - xlo < 1e-300:
        xhi = xlo + 1.0

    def px(v):
        return left + (v - xlo) / (xhi - xlo) * pw

    def py(v):
        return top + (hi - v) / (hi - lo) * ph

    out = []
    if meta:
        out.append("<!-- " + json.dumps(meta, sort_keys=True).replace("--", "- -") + " -->")
    out.append(f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
               f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">')
    out.append(f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>')
    if title:
        out.append(f'<text x="{width / 2:.1f}" y="20" text-anchor="middle">{title}</text>')
    # axes
    out.append(f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>')
    out.append(f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>')
    for i in range(5):
        fx = xlo + (xhi - xlo) * i / 4
        fy = lo + (hi - lo) * i / 4
        out.append(f'<line x1="{px(fx):.2f}" y1="{top + ph}" x2="{px(fx):.2f}" y2="{top + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{px(fx):.2f}" y="{top + ph + 18}" text-anchor="middle">{_nice(fx)}</text>')
        out.append(f'<line x1="{left - 5}" y1="{py(fy):.2f}" x2="{left}" y2="{py(fy):.2f}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{py(fy) + 4:.2f}" text-anchor="end">{_nice(fy)}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">{xlabel}</text>')
    out.append(f'<text x="15" y="{top + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 15 {top + ph / 2:.1f})">{ylabel}</text>')
    for j, (name, y) in enumerate(zip(series, ys)):
        col = _PALETTE[j % len(_PALETTE)]
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, y) if np.isfinite(b))
        out.append(f'<polyline fill="none" stroke="{col}" stroke-width="1.5" points="{pts}"/>')
        ly = top + 10 + 18 * j
        out.append(f'<line x1="{left + pw + 12}" y1="{ly}" x2="{left + pw + 32}" y2="{ly}" '
                   f'stroke="{col}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 38}" y="{ly + 4}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


__all__ = ["metadata", "write_csv", "read_csv", "write_json", "gains_table", "write_gains",
           "write_lambda", "paths_table", "write_costs", "svg_line_chart"]
