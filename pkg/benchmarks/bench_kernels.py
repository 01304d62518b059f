"""Compare the numba and numpy kernel paths.

Per-call timings of ``follow`` and ``window_counts`` at several vehicle
counts, then an end-to-end scenario run under each path (the path is picked
at import from MIXTRAFFIC_NUMBA, so those runs happen in subprocesses).

    python benchmarks/bench_kernels.py [--ticks 500] [--repeat 200]
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from mixtraffic import kernels

PARAMS = (2.6, 4.5, 1.0, 5.0, 2.0)  # accel, decel, dt, length, min gap


def make_lanes(n_vehicles: int, n_lanes: int, rng: np.random.Generator):
    lane_of = np.sort(rng.integers(0, n_lanes, n_vehicles))
    pos = np.empty(n_vehicles)
    for lane in range(n_lanes):
        idx = np.flatnonzero(lane_of == lane)
        pos[idx] = np.sort(rng.uniform(0, 100, idx.size))[::-1]
    speed = rng.uniform(0, 14, n_vehicles)
    is_rv = rng.random(n_vehicles) < 0.55
    return pos, speed, lane_of, is_rv


def bench_calls(sizes, repeat: int) -> None:
    rng = np.random.default_rng(0)
    print(f"{'kernel':<14}{'vehicles':>9}{'numpy us':>11}{'numba us':>11}{'speedup':>9}")
    for n in sizes:
        lanes = max(1, n // 4)
        pos, speed, lane_of, is_rv = make_lanes(n, lanes, rng)
        front = rng.uniform(50, 150, lanes)
        vmax = np.full(lanes, 13.9)
        cases = {
            "follow": (kernels.follow_numpy, kernels.follow_numba,
                       (pos, speed, lane_of, front, vmax, *PARAMS)),
            "window_counts": (kernels.window_counts_numpy, kernels.window_counts_numba,
                              (pos, lane_of, is_rv, 30.0)),
        }
        for name, (f_np, f_nb, args) in cases.items():
            f_nb(*args)  # compile outside the timing
            t_np = min(timeit.repeat(lambda: f_np(*args), number=repeat, repeat=3)) / repeat
            t_nb = min(timeit.repeat(lambda: f_nb(*args), number=repeat, repeat=3)) / repeat
            print(f"{name:<14}{n:>9}{t_np * 1e6:>11.1f}{t_nb * 1e6:>11.1f}{t_np / t_nb:>9.1f}x")


RUN_SNIPPET = """
import time
from mixtraffic.config import bundled_scenario
from mixtraffic.runner import run_scenario
cfg = bundled_scenario("evening-rush", duration={ticks}, demand_profile=[[0, 1.2]])
run_scenario(cfg.replace(duration=5))  # warm-up (numba compile / cache load)
t = time.perf_counter()
run_scenario(cfg)
print(time.perf_counter() - t)
"""


def bench_run(ticks: int) -> None:
    out = {}
    for flag in ("0", "1"):
        env = dict(os.environ, MIXTRAFFIC_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", RUN_SNIPPET.format(ticks=ticks)],
                             env=env, capture_output=True, text=True, check=True)
        out[flag] = float(res.stdout.strip().splitlines()[-1])
    print(f"\n{ticks}-tick scenario run: numpy {out['0']:.2f}s, numba {out['1']:.2f}s "
          f"({out['0'] / out['1']:.2f}x)")


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[50, 200, 1000])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--ticks", type=int, default=500)
    ap.add_argument("--skip-run", action="store_true", help="only time the kernels")
    args = ap.parse_args(argv)
    bench_calls(args.sizes, args.repeat)
    if not args.skip_run:
        bench_run(args.ticks)
    return 0


if __name__ == "__main__":
    sys.exit(main())
