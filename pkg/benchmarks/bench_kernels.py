"""Timing of the path-simulation kernel: compiled extension against numpy.

    python3 benchmarks/bench_kernels.py --paths 4096 --steps 1000 --repeat 3

Noise is generated once per run and shared by both backends, so the timings
cover the integration loop only. Results are checked for agreement first.
"""
from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from mvgame import kernels
from mvgame.game import solve_leader
from mvgame.model import toy_spec
from mvgame.sde import KernelInputs, noise_chunk, sample_noise, simulate_chunk


def bench(paths: int, steps: int, repeat: int, record: str, seed: int = 0) -> dict:
    spec = toy_spec(steps)
    eq = solve_leader(spec)
    noise = sample_noise(spec, seed, paths)
    t0 = time.perf_counter()
    ch = noise_chunk(spec, noise, 0, paths)
    t_noise = time.perf_counter() - t0
    kin = KernelInputs.build(spec, eq.law)
    out = {"paths": paths, "steps": steps, "record": record, "noise_s": t_noise}
    ref = None
    for name in kernels.AVAILABLE:
        times = []
        for _ in range(repeat):
            t0 = time.perf_counter()
            r = simulate_chunk(spec, eq.law, noise, 0, paths, record, kin=kin, chunk_noise=ch,
                               backend=name)
            times.append(time.perf_counter() - t0)
        if ref is None:
            ref = r
        else:
            err = max(float(np.max(np.abs(ref[k] - r[k]))) for k in ref if not k.startswith("_"))
            out["max_abs_diff"] = err
        out[name] = statistics.median(times)
    if "cython" in out:
        out["speedup"] = out["numpy"] / out["cython"]
    return out


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--paths", type=int, default=4096)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--record", default="terminal", choices=("terminal", "controls", "full"))
    a = p.parse_args(argv)
    r = bench(a.paths, a.steps, a.repeat, a.record)
    print(f"backends available: {', '.join(kernels.AVAILABLE)}")
    print(f"{r['paths']} paths x {r['steps']} steps, record={r['record']}")
    print(f"  noise generation  {r['noise_s']:.3f} s")
    for name in kernels.AVAILABLE:
        print(f"  {name:<8}          {r[name]:.3f} s")
    if "speedup" in r:
        print(f"  speedup           {r['speedup']:.2f}x   (max |diff| {r['max_abs_diff']:.1e})")


if __name__ == "__main__":
    main()
