"""End-to-end run loop, dataset generation, forecast evaluation and
baseline sweeps."""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import forecast as fc
from . import sensing
from .config import ScenarioConfig, ScenarioError
from .engine import CONTROL, NOTL, RV, TL, Simulator, SpawnSpec, avg_waiting_time
from .network import NetworkGraph, predecessors, shortest_route
from .routing import Coordinator, shortage_index

log = logging.getLogger(__name__)


@dataclass
class RunSummary:
    config_hash: str
    seed: int
    ticks: int
    metrics_path: str | None
    shortage_index: float | None
    avg_waiting_time: float | None
    spawned: int
    departed: int
    deferred_spawns: int
    rv_share: float | None
    conflict_ticks: int
    deadlock_events: int
    clamp_events: int = 0
    rounds: int = 0
    tasks: int = 0
    assignments: int = 0
    applied: int = 0
    expired: int = 0
    shortfall: int = 0
    wall_seconds: float = 0.0
    segment_shortage: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        for k in ("wall_seconds", "metrics_path"):  # keep the document reproducible
            d.pop(k)
        return json.dumps(d, indent=1, sort_keys=True)


def spawn_priors(graph: NetworkGraph, specs: Sequence[SpawnSpec]) -> dict[str, float]:
    """Fallback RV rate per segment: that of the nearest upstream spawn point
    (by route length; ties by segment id), or the demand-weighted mean."""
    if not specs:
        return {s: 0.0 for s in graph.ids}
    total = sum(s.rate for s in specs)
    mean = (
        sum(s.rate * s.rv_probability for s in specs) / total
        if total > 0
        else float(np.mean([s.rv_probability for s in specs]))
    )
    priors = {}
    for seg in graph.ids:
        best = None
        for s in specs:
            try:
                d = shortest_route(graph, s.segment, seg).total_length
            except ValueError:
                continue
            key = (d, s.segment)
            if best is None or key < best[0]:
                best = (key, s.rv_probability)
        priors[seg] = best[1] if best else mean
    return priors


def _scaled(specs: list[SpawnSpec], factor: float) -> list[SpawnSpec]:
    if factor == 1.0:
        return specs
    return [SpawnSpec(s.segment, s.rate * factor, s.rv_probability, s.destinations) for s in specs]


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.6g}"


class ScenarioRun:
    """One configured run; ``run()`` executes it tick by tick."""

    def __init__(
        self,
        cfg: ScenarioConfig,
        model: fc.PropagationModel | None = None,
        graph: NetworkGraph | None = None,
        record_series: bool = False,
    ):
        self.cfg = cfg
        self.graph = cfg.validate(graph)
        self.specs = cfg.spawn_specs()
        self.sim = Simulator(self.graph, cfg.sim_params(), cfg.control_mode, seed=cfg.seed)
        self.model = model
        if model is None and cfg.forecast_model and cfg.router == "rebalance":
            self.model = fc.PropagationModel.from_json(Path(cfg.forecast_model).read_text())
        if self.model is not None:
            self.model.check_graph(self.graph)
        self.priors = spawn_priors(self.graph, self.specs)
        self.coordinator = (
            Coordinator(self.graph, cfg.p_target, cfg.lam) if cfg.router == "rebalance" else None
        )
        self.table: dict[str, sensing.SegmentEstimate] = {}
        self.record_series = record_series
        self.series: list[np.ndarray] = []
        self.recent: list[np.ndarray] = []
        self.truth: list[np.ndarray] = []
        self.interior = [i for i, s in enumerate(self.graph.ids) if predecessors(self.graph, s)]
        n = self.sim.n_seg
        self.veh_ticks = np.zeros(n)
        self.rv_ticks = np.zeros(n)
        self.rows: list[str] = []

    # ----------------------------------------------------------- one tick

    def _decision_round(self, observations: list[sensing.LocalObservation]) -> None:
        cfg = self.cfg
        tick = self.sim.state.tick
        ids = self.graph.ids
        if self.model is not None:
            W = self.model.window
            X = sensing.table_to_matrix(self.table, ids)
            X_in = np.mean(self.recent[-W:], axis=0) if W > 1 else X
            Xh = fc.predict_multi(self.model, X_in, max(1, round(cfg.horizon / W)))[-1]
            target = {
                s: (Xh[i, fc.RATE], Xh[i, fc.COUNT] if Xh[i, fc.COUNT] > 0 else X[i, fc.COUNT])
                for i, s in enumerate(ids)
            }
        else:
            target = self.table
        located: dict[str, list[int]] = {}
        for o in observations:
            located.setdefault(o.segment_id, []).append(o.reporter_rv_id)
        self.coordinator.round(self.sim, target, self.table, located, tick)

    def tick(self) -> None:
        cfg = self.cfg
        sim = self.sim
        st = sim.state
        sim.spawn(_scaled(self.specs, cfg.demand_factor(st.tick)))
        observations = sensing.sense_all(sim, cfg.sense_radius)
        fresh = sensing.aggregate_all(observations)
        self.table = sensing.snapshot(self.table, fresh, st.tick, cfg.staleness_limit, self.priors)
        if self.record_series or (self.model is not None and self.model.window > 1):
            X = sensing.table_to_matrix(self.table, self.graph.ids)
            if self.record_series:
                self.series.append(X)
            if self.model is not None:
                self.recent = (self.recent + [X])[-self.model.window:]
        if self.coordinator is not None and st.tick % cfg.cadence == 0:
            self._decision_round(observations)
        sim.step()

        n, r = sim.segment_counts()
        self.veh_ticks += n
        self.rv_ticks += r
        if self.record_series:
            self.truth.append(np.column_stack([n, np.divide(r, n, out=np.zeros(len(n)), where=n > 0)]))
        vs = list(st.vehicles.values())
        speed = float(np.mean([v.speed for v in vs])) if vs else None
        wait = float(np.mean([v.waiting_time for v in vs])) if vs else None
        rates = [_fmt(r[i] / n[i]) if n[i] else "" for i in range(len(n))]
        self.rows.append(",".join([str(st.tick), str(len(vs)), _fmt(speed), _fmt(wait), *rates]))

    # --------------------------------------------------------------- run

    def segment_shortage(self) -> dict[str, float]:
        """Shortage index per interior segment of its time-aggregated RV share."""
        out = {}
        for i in self.interior:
            if self.veh_ticks[i] > 0:
                out[self.graph.ids[i]] = float(shortage_index(
                    self.rv_ticks[i] / self.veh_ticks[i], self.cfg.p_target
                ))
        return out

    def run(self) -> RunSummary:
        cfg = self.cfg
        t0 = time.perf_counter()
        for _ in range(cfg.duration):
            self.tick()
        st = self.sim.state
        seg_si = self.segment_shortage()
        total_ticks = self.veh_ticks.sum()
        c = self.coordinator.counters if self.coordinator else None
        summary = RunSummary(
            config_hash=cfg.config_hash(),
            seed=cfg.seed,
            ticks=st.tick,
            metrics_path=cfg.metrics_path,
            shortage_index=float(np.mean(list(seg_si.values()))) if seg_si else None,
            avg_waiting_time=avg_waiting_time(self.sim),
            spawned=st.spawned,
            departed=st.departed,
            deferred_spawns=st.deferred_spawns,
            rv_share=float(self.rv_ticks.sum() / total_ticks) if total_ticks else None,
            conflict_ticks=st.conflict_ticks,
            deadlock_events=st.deadlock_events,
            clamp_events=self.model.clamp_events if self.model else 0,
            rounds=c.rounds if c else 0,
            tasks=c.tasks if c else 0,
            assignments=c.assignments if c else 0,
            applied=c.applied if c else 0,
            expired=c.expired if c else 0,
            shortfall=c.shortfall if c else 0,
            wall_seconds=time.perf_counter() - t0,
            segment_shortage=seg_si,
        )
        self._write_outputs(summary)
        return summary

    def metrics_csv(self) -> str:
        cfg = self.cfg
        buf = io.StringIO()
        buf.write(f"# config_hash={cfg.config_hash()} seed={cfg.seed}\n")
        header = ["tick", "active_vehicles", "mean_speed", "mean_waiting_time"]
        header += [f"rv_rate:{s}" for s in self.graph.ids]
        buf.write(",".join(header) + "\n")
        for row in self.rows:
            buf.write(row + "\n")
        return buf.getvalue()

    def replay_log(self) -> str:
        cfg = self.cfg
        head = json.dumps({"type": "header", "config_hash": cfg.config_hash(), "seed": cfg.seed})
        lines = [head] + (self.coordinator.replay if self.coordinator else [])
        return "\n".join(lines) + "\n"

    def _write_outputs(self, summary: RunSummary) -> None:
        cfg = self.cfg
        if cfg.metrics_path:
            Path(cfg.metrics_path).write_text(self.metrics_csv())
        if cfg.summary_path:
            Path(cfg.summary_path).write_text(summary.to_json() + "\n")
        if cfg.replay_path:
            Path(cfg.replay_path).write_text(self.replay_log())


def run_scenario(cfg: ScenarioConfig, model: fc.PropagationModel | None = None) -> RunSummary:
    return ScenarioRun(cfg, model).run()


# ------------------------------------------------------------- datasets


def write_flow_csv(path: str | Path, ids: Sequence[str], series: np.ndarray, header: str = "") -> None:
    with open(path, "w", newline="") as f:
        if header:
            f.write(f"# {header}\n")
        w = csv.writer(f)
        w.writerow(["tick", "segment_id", "vehicle_count", "rv_rate"])
        for t in range(series.shape[0]):
            for i, s in enumerate(ids):
                w.writerow([t, s, repr(float(series[t, i, 0])), repr(float(series[t, i, 1]))])


def read_flow_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as f:
        rows = [r for r in csv.reader(line for line in f if not line.startswith("#"))]
    if not rows or rows[0] != ["tick", "segment_id", "vehicle_count", "rv_rate"]:
        raise ScenarioError(f"{path}: not a flow CSV")
    body = rows[1:]
    ids = sorted({r[1] for r in body})
    idx = {s: i for i, s in enumerate(ids)}
    T = max(int(r[0]) for r in body) + 1 if body else 0
    X = np.zeros((T, len(ids), 2))
    for t, s, n, p in body:
        X[int(t), idx[s]] = (float(n), float(p))
    return ids, X


def split_runs(n: int) -> dict[str, list[int]]:
    """70/20/10 train/eval/validation split by whole runs (floor for the
    smaller parts, remainder to training)."""
    if n < 1:
        raise ValueError("need at least one run")
    n_eval = (n * 2) // 10
    n_val = n // 10
    n_train = n - n_eval - n_val
    if n == 1:
        log.warning("a single run cannot be split; using it for training only")
    return {
        "train": list(range(n_train)),
        "eval": list(range(n_train, n_train + n_eval)),
        "validation": list(range(n_train + n_eval, n)),
    }


def simulate_series(cfg: ScenarioConfig, source: str = "estimate") -> np.ndarray:
    """Per-tick flow matrices of one run: sensed estimates or ground truth."""
    run = ScenarioRun(cfg.replace(metrics_path=None, summary_path=None, replay_path=None),
                      record_series=True)
    run.run()
    series = run.series if source == "estimate" else run.truth
    return np.stack(series) if series else np.zeros((0, run.sim.n_seg, 2))


def generate_dataset(
    cfg: ScenarioConfig, runs: int, out_dir: str | Path, source: str = "estimate"
) -> dict:
    """One flow CSV per run (seeds seed..seed+runs-1) plus a manifest."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    graph = cfg.validate()
    files = []
    for k in range(runs):
        c = cfg.replace(seed=cfg.seed + k)
        X = simulate_series(c, source)
        name = f"run_{k:03d}.csv"
        write_flow_csv(out / name, graph.ids, X, f"config_hash={c.config_hash()} seed={c.seed}")
        files.append(name)
    split = split_runs(runs)
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "source": source,
        "graph_hash": graph.digest,
        "runs": files,
        "split": {k: [files[i] for i in v] for k, v in split.items()},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def load_split(manifest_path: str | Path, part: str) -> list[np.ndarray]:
    base = Path(manifest_path).parent
    manifest = json.loads(Path(manifest_path).read_text())
    return [read_flow_csv(base / f)[1] for f in manifest["split"][part]]


TABLE_METHODS = ("CONST", "AR", "propagation")
TABLE_METRICS = ("MAE", "RMSE", "MAPE")


def evaluate_forecasts(
    graph: NetworkGraph,
    train: Sequence[np.ndarray],
    test: Sequence[np.ndarray],
    horizons: Sequence[int] = (10, 50, 100),
    feature: int = fc.RATE,
    window: int = 1,
    self_lag: bool = False,
    stride: int = 1,
    model: fc.PropagationModel | None = None,
) -> dict[int, dict[str, fc.ErrorMetrics]]:
    """Error of each method at each horizon on one feature of held-out runs."""
    train = [fc.window_series(r, window) for r in train]
    test = [fc.window_series(r, window) for r in test]
    model = model or fc.fit(graph, train, self_lag=self_lag, window=window)
    ar = fc.ar_baseline_fit(train)
    out: dict[int, dict[str, fc.ErrorMetrics]] = {}
    for h in horizons:
        X0, Y = fc.horizon_pairs(test, h, stride)
        preds = {
            "CONST": fc.const_baseline(X0, h)[-1],
            "AR": fc.ar_baseline_predict(ar, X0, h)[-1],
            "propagation": fc.predict_multi(model, X0, h)[-1],
        }
        out[h] = {m: fc.error_metrics(Y[..., feature], p[..., feature]) for m, p in preds.items()}
    return out


def forecast_table_csv(results: dict[int, dict[str, fc.ErrorMetrics]], header: str = "") -> str:
    buf = io.StringIO()
    if header:
        buf.write(f"# {header}\n")
    cols = [f"{m}_{k}" for m in TABLE_METHODS for k in TABLE_METRICS]
    buf.write(",".join(["horizon", *cols]) + "\n")
    for h, by_method in results.items():
        vals = []
        for m in TABLE_METHODS:
            e = by_method[m]
            vals += [f"{e.mae:.6f}", f"{e.rmse:.6f}", f"{e.mape:.6f}"]
        buf.write(",".join([str(h), *vals]) + "\n")
    return buf.getvalue()


# ------------------------------------------------------------ baselines

COMPARE_METHODS = {
    "NoTL": (NOTL, "shortest"),
    "TL": (TL, "shortest"),
    "control": (CONTROL, "shortest"),
    "full": (CONTROL, "rebalance"),
}


def compare_baselines(
    base: ScenarioConfig,
    rv_rates: Sequence[float] = (0.5, 0.6, 0.8),
    methods: Sequence[str] = tuple(COMPARE_METHODS),
    seeds: Sequence[int] | None = None,
) -> list[dict]:
    """Average waiting time per (method, RV rate), mean over seeds.

    The RV rate replaces every spawn point's rv_probability except the
    designated low-RV points (those below the base rate keep their value).
    """
    seeds = list(seeds) if seeds is not None else [base.seed]
    base_rate = max(float(s["rv_probability"]) for s in base.spawns) if base.spawns else 0.0
    rows = []
    for rate in rv_rates:
        spawns = [
            {**s, "rv_probability": rate if float(s["rv_probability"]) >= base_rate else s["rv_probability"]}
            for s in base.spawns
        ]
        for m in methods:
            if m not in COMPARE_METHODS:
                raise ScenarioError(f"unknown method {m!r}")
            mode, router = COMPARE_METHODS[m]
            waits = []
            for seed in seeds:
                cfg = base.replace(
                    spawns=spawns, control_mode=mode, router=router, seed=seed,
                    metrics_path=None, summary_path=None, replay_path=None,
                )
                waits.append(run_scenario(cfg).avg_waiting_time)
            valid = [w for w in waits if w is not None]
            rows.append({
                "method": m,
                "rv_rate": rate,
                "avg_waiting_time": float(np.mean(valid)) if valid else None,
                "seeds": len(seeds),
            })
    return rows
