"""Acceptance criteria C1-C10, each run at its stated tolerance.

Every test records one PASS/FAIL line (printed in the terminal summary)
before asserting, so a failing criterion still reports its measurement.
"""
from __future__ import annotations

import json
import time
from fractions import Fraction

import numpy as np
import pytest

from conftest import fan_in_doc
from mixtraffic import forecast as fc
from mixtraffic.cli import main as cli_main
from mixtraffic.config import bundled_scenario
from mixtraffic.engine import CONTROL_MODES
from mixtraffic.network import generate_grid, load_network, predecessors
from mixtraffic.routing import (
    INFINITE,
    Assignment,
    RerouteTask,
    RouteResponse,
    deficit,
    shortage_index,
    shortage_threshold_met,
)
from mixtraffic.runner import ScenarioRun, evaluate_forecasts, generate_dataset, load_split
from mixtraffic.sensing import LocalObservation, aggregate
from oracles import ceil_deficit, gap_index, mean_rate_and_size, normal_equations
from protocol_cases import check_round, random_round

pytestmark = pytest.mark.acceptance

SEEDS = range(5)
# Decision cadence used for the rebalancing runs (ticks between rounds).
REBALANCE_CADENCE = 5

# conflict_ticks of every simulation run by this module, for C5
CONFLICTS: list[tuple[str, int]] = []


def _run(cfg, label):
    s = ScenarioRun(cfg).run()
    CONFLICTS.append((label, s.conflict_ticks))
    return s


# --------------------------------------------------------------------- C1


def test_c1_forecast_beats_const(tmp_path, report):
    t0 = time.perf_counter()
    cfg = bundled_scenario("evening-rush", duration=2000)
    generate_dataset(cfg, 20, tmp_path)
    manifest = tmp_path / "manifest.json"
    graph = cfg.build_graph()
    res = evaluate_forecasts(graph, load_split(manifest, "train"), load_split(manifest, "eval"),
                             horizons=(10, 50, 100), window=10, self_lag=True)
    elapsed = time.perf_counter() - t0
    ordering = all(
        getattr(res[h]["propagation"], k) < getattr(res[h]["CONST"], k)
        for h in (10, 50, 100) for k in ("mae", "rmse", "mape")
    )
    ratio = res[10]["propagation"].mae / res[10]["CONST"].mae
    detail = ", ".join(
        f"h={h}: MAE {res[h]['propagation'].mae:.4f} vs {res[h]['CONST'].mae:.4f}" for h in (10, 50, 100)
    )
    ok = ordering and ratio <= 0.5 and elapsed < 300
    report("C1", ok, f"ordering={ordering}, MAE ratio at h=10 {ratio:.3f} (need <= 0.5), "
                     f"{detail}, {elapsed:.0f}s")
    assert ordering, res
    assert ratio <= 0.5
    assert elapsed < 300


# --------------------------------------------------------------------- C2


def test_c2_least_squares_matches_normal_equations(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        k = int(rng.integers(1, 7))
        g = load_network(fan_in_doc(k))
        X = rng.uniform(0, 10, (50, len(g.ids), 2))
        m = fc.fit(g, X)
        cols = [g.index[p] for p in predecessors(g, "out")]
        for f in range(2):
            A = np.column_stack([X[:-1, cols, f], np.ones(49)])
            sol = normal_equations(A, X[1:, g.index["out"], f])
            got = np.append(m.alpha["out"][f], m.intercept["out"][f])
            worst = max(worst, float(np.max(np.abs(got - sol))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 30
    report("C2", ok, f"max |fit - oracle| = {worst:.2e} over 100 instances, {elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------------- C3


def test_c3_rebalancing_reduces_shortage(report):
    t0 = time.perf_counter()
    base, full = [], []
    for seed in SEEDS:
        cfg = bundled_scenario("evening-rush", seed=seed, duration=900, p_target=0.5,
                               cadence=REBALANCE_CADENCE)
        base.append(_run(cfg, f"C3 shortest {seed}").shortage_index)
        full.append(_run(cfg.replace(router="rebalance"), f"C3 rebalance {seed}").shortage_index)
    elapsed = time.perf_counter() - t0
    reduction = 1 - np.mean(full) / np.mean(base)
    ok = reduction >= 0.30 and elapsed < 300
    report("C3", ok, f"shortage index {np.mean(base):.4f} -> {np.mean(full):.4f}, "
                     f"reduction {reduction:.1%} (need >= 30%), {elapsed:.0f}s")
    assert ok


# --------------------------------------------------------------------- C4


def test_c4_rebalancing_reduces_waiting(report):
    t0 = time.perf_counter()
    waits = {}
    for method, router in (("control", "shortest"), ("full", "rebalance")):
        w = []
        for seed in SEEDS:
            cfg = bundled_scenario("evening-rush", rv_rate=0.5, seed=seed, duration=1000,
                                   control_mode="IntersectionControl", router=router,
                                   cadence=REBALANCE_CADENCE)
            w.append(_run(cfg, f"C4 {method} {seed}").avg_waiting_time)
        waits[method] = float(np.mean(w))
    elapsed = time.perf_counter() - t0
    reduction = 1 - waits["full"] / waits["control"]
    ok = reduction >= 0.10 and elapsed < 600
    report("C4", ok, f"avg waiting {waits['control']:.2f}s (control) vs {waits['full']:.2f}s (full), "
                     f"reduction {reduction:.1%} (need >= 10%), {elapsed:.0f}s")
    assert ok


# --------------------------------------------------------------------- C6


def test_c6_protocol_invariants(report):
    t0 = time.perf_counter()
    g = load_network(generate_grid(4, 4))
    rounds = assigned = 0
    for seed in range(1000):
        r = random_round(g, seed)
        check_round(r)
        rounds += 1
        assigned += len(r.assignments)
    elapsed = time.perf_counter() - t0
    ok = elapsed < 30
    report("C6", ok, f"{rounds} random rounds, {assigned} assignments, invariants hold, {elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------------- C7

SCHEMAS = {
    "observation": {"reporter_rv_id", "segment_id", "observed_total", "observed_rv", "p_v", "tick"},
    "task": {"task_id", "shortage_segment", "veh_id", "tick"},
    "response": {"task_id", "veh_id", "score"},
    "assignment": {"veh_id", "shortage_segment", "message"},
}
PRIVATE = {"route", "new_route", "destination", "position", "segments", "plans", "speed",
           "observed_vehicles", "vehicle_ids", "waiting_time"}


def test_c7_privacy_schema(report):
    samples = {
        "observation": LocalObservation(1, "e", 3, 2, 2 / 3, 0).to_dict(),
        "task": RerouteTask(0, "e", 1, 0).to_dict(),
        "response": RouteResponse(0, 1, 12.5).to_dict(),
        "assignment": Assignment(1, "e").to_dict(),
    }
    problems = [k for k, d in samples.items() if set(d) != SCHEMAS[k]]
    if set(RouteResponse(0, 1, INFINITE).to_dict()) != SCHEMAS["response"]:
        problems.append("response(inf)")
    # every coordinator-bound message of a real rebalancing run
    run = ScenarioRun(bundled_scenario("evening-rush", seed=3, duration=300, router="rebalance",
                                       cadence=REBALANCE_CADENCE))
    run.run()
    wire = {"task": SCHEMAS["task"] - {"tick"}, "response": SCHEMAS["response"],
            "assignment": SCHEMAS["assignment"], "shortage": {"segment_id", "deficit"}}
    lines = run.coordinator.replay
    for line in lines:
        e = json.loads(line)
        body = set(e) - {"round", "tick", "type"}
        if body != wire[e["type"]] or body & PRIVATE:
            problems.append(line)
    ok = not problems and len(lines) > 0
    report("C7", ok, f"4 message types exact, {len(lines)} replayed messages checked, "
                     f"violations: {problems[:3] or 'none'}")
    assert ok


# --------------------------------------------------------------------- C8


def test_c8_rate_deficit_index_arithmetic(report):
    grid = [Fraction(i, 20) for i in range(1, 21)]
    lam = Fraction(1, 20)
    mismatches, checks = [], 0
    for p in grid:
        for n in range(1, 31):
            # n reporters: all seeing p, and p alternating with a partner rate
            partner = grid[(grid.index(p) + 7) % 20]
            for rates in ([p] * n, [p if i % 2 == 0 else partner for i in range(n)]):
                obs = [LocalObservation(i, "e", 20, int(r * 20), float(r), 0) for i, r in enumerate(rates)]
                est = aggregate(obs)
                want_p, want_n = mean_rate_and_size(rates)
                checks += 1
                if (est.p_e, est.n_e) != (float(want_p), float(want_n)):
                    mismatches.append(("rate", p, n))
            for target in grid:
                checks += 2
                if p < target and deficit(float(p), float(n), float(target)) != ceil_deficit(p, Fraction(n), target):
                    mismatches.append(("deficit", p, n, target))
                if shortage_index(float(p), float(target)) != float(gap_index(p, target)):
                    mismatches.append(("index", p, target))
                if target - lam > 0 and shortage_threshold_met(float(p), float(target), float(lam)) != (p < target - lam):
                    mismatches.append(("threshold", p, target))
    ok = not mismatches
    report("C8", ok, f"{checks} grid points exact, mismatches: {mismatches[:3] or 'none'}")
    assert ok


# --------------------------------------------------------------------- C9


def test_c9_cli_runs_are_byte_identical(tmp_path, report, capsys):
    outs = []
    for tag in ("a", "b"):
        m, r = tmp_path / f"{tag}.csv", tmp_path / f"{tag}.jsonl"
        rc = cli_main(["run", "--seed", "9", "--duration", "400", "--router", "rebalance",
                       "--cadence", str(REBALANCE_CADENCE), "--metrics", str(m), "--replay", str(r)])
        assert rc == 0
        outs.append((m.read_bytes(), r.read_bytes()))
    capsys.readouterr()
    same = outs[0] == outs[1]
    ok = same and len(outs[0][1].splitlines()) > 1
    report("C9", ok, f"metrics {len(outs[0][0])} B, replay {len(outs[0][1])} B, identical={same}")
    assert ok


# -------------------------------------------------------------------- C10


def test_c10_scale_budget(report):
    cfg = bundled_scenario("evening-rush", seed=0, duration=1000, demand_profile=[[0, 1.2]],
                           router="rebalance", cadence=100)
    run = ScenarioRun(cfg)
    t0 = time.perf_counter()
    s = run.run()
    elapsed = time.perf_counter() - t0
    CONFLICTS.append(("C10", s.conflict_ticks))
    active = np.array([float(line.split(",")[1]) for line in run.metrics_csv().splitlines()[2:]])
    mean_active = float(active[200:].mean())
    ok = elapsed < 60 and mean_active >= 150
    report("C10", ok, f"1000 ticks, mean {mean_active:.0f} / peak {active.max():.0f} concurrent "
                      f"vehicles, {elapsed:.1f}s (budget 60s)")
    assert ok


# ------------------------------------------------ C5 (runs last: audits all)


def test_c5_conflict_free_in_every_mode(report):
    for mode in CONTROL_MODES:
        for router in ("shortest", "rebalance"):
            cfg = bundled_scenario("evening-rush", seed=11, duration=1000, control_mode=mode,
                                   router=router, cadence=REBALANCE_CADENCE)
            _run(cfg, f"C5 {mode} {router}")
    bad = [(label, n) for label, n in CONFLICTS if n]
    ok = not bad
    report("C5", ok, f"{len(CONFLICTS)} runs across {len(CONTROL_MODES)} modes, "
                     f"conflicting runs: {bad or 'none'}")
    assert ok
