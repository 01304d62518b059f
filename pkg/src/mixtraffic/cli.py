"""Command-line entry point: ``mixtraffic <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import forecast as fc
from .config import SCENARIO_NAMES, ScenarioConfig, bundled_scenario
from .engine import CONTROL_MODES
from .network import dump_network, generate_grid, load_network
from .runner import (
    COMPARE_METHODS,
    compare_baselines,
    evaluate_forecasts,
    forecast_table_csv,
    generate_dataset,
    load_split,
    run_scenario,
)

log = logging.getLogger("mixtraffic")

# flag name -> ScenarioConfig field
_SCENARIO_FLAGS = {
    "duration": "duration",
    "control_mode": "control_mode",
    "router": "router",
    "p_target": "p_target",
    "lam": "lam",
    "cadence": "cadence",
    "horizon": "horizon",
    "sense_radius": "sense_radius",
    "staleness_limit": "staleness_limit",
    "model": "forecast_model",
    "metrics": "metrics_path",
    "summary": "summary_path",
    "replay": "replay_path",
}


def _add_scenario_args(p: argparse.ArgumentParser, seed_required: bool = False) -> None:
    p.add_argument("--config", help="scenario JSON; its values override flags")
    p.add_argument("--scenario", choices=SCENARIO_NAMES, default="evening-rush",
                   help="bundled scenario used when no --config is given")
    p.add_argument("--network", help="network JSON file (default: bundled 4x4 grid)")
    p.add_argument("--seed", type=int, required=seed_required, default=None if seed_required else 0)
    p.add_argument("--duration", type=int)
    p.add_argument("--control-mode", choices=CONTROL_MODES)
    p.add_argument("--router", choices=("shortest", "rebalance"))
    p.add_argument("--rv-rate", type=float, default=0.55, help="RV share at regular spawn points")
    p.add_argument("--low-rv-rate", type=float, default=0.2, help="RV share at low-RV spawn points")
    p.add_argument("--p-target", type=float)
    p.add_argument("--lam", type=float, help="shortage threshold margin")
    p.add_argument("--cadence", type=int, help="ticks between rebalancing rounds")
    p.add_argument("--horizon", type=int, help="forecast horizon in ticks")
    p.add_argument("--sense-radius", type=float)
    p.add_argument("--staleness-limit", type=int)


def _scenario_from_args(args: argparse.Namespace) -> ScenarioConfig:
    cfg = bundled_scenario(args.scenario, rv_rate=args.rv_rate, low_rv_rate=args.low_rv_rate)
    changes = {"seed": args.seed}
    for flag, fld in _SCENARIO_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            changes[fld] = value
    if args.network:
        changes["network"] = {"file": args.network}
    cfg = cfg.replace(**changes)
    if args.config:
        overrides = json.loads(Path(args.config).read_text())
        cfg = ScenarioConfig.from_dict({**cfg.to_dict(), **overrides})
    return cfg


# ----------------------------------------------------------- subcommands


def cmd_gen_net(args: argparse.Namespace) -> int:
    doc = generate_grid(args.rows, args.cols, args.segment_length, args.speed_limit)
    g = load_network(doc)
    Path(args.out).write_text(dump_network(doc))
    print(f"wrote {args.out}: {len(g.ids)} segments, {len(g.intersections)} intersections")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _scenario_from_args(args)
    s = run_scenario(cfg)
    print(s.to_json() if args.json else
          f"config {s.config_hash} seed {s.seed}: avg wait {s.avg_waiting_time}, "
          f"shortage index {s.shortage_index}, assignments {s.assignments}, "
          f"{s.wall_seconds:.1f}s")
    return 0


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = _scenario_from_args(args)
    m = generate_dataset(cfg, args.runs, args.out_dir, args.source)
    sizes = {k: len(v) for k, v in m["split"].items()}
    print(f"wrote {len(m['runs'])} runs to {args.out_dir} (split {sizes})")
    return 0


def _graph_for_manifest(manifest_path: str):
    m = json.loads(Path(manifest_path).read_text())
    return ScenarioConfig.from_dict(m["config"]).build_graph()


def cmd_fit(args: argparse.Namespace) -> int:
    graph = _graph_for_manifest(args.manifest)
    train = [fc.window_series(r, args.window) for r in load_split(args.manifest, "train")]
    model = fc.fit(graph, train, self_lag=args.self_lag, window=args.window)
    Path(args.out).write_text(model.to_json())
    print(f"wrote {args.out}: {len(model.ids)} segments, {model.series_length} steps")
    return 0


def cmd_eval_forecast(args: argparse.Namespace) -> int:
    graph = _graph_for_manifest(args.manifest)
    model = fc.PropagationModel.from_json(Path(args.model).read_text()) if args.model else None
    window = model.window if model else args.window
    results = evaluate_forecasts(
        graph,
        load_split(args.manifest, "train"),
        load_split(args.manifest, args.split),
        horizons=args.horizons,
        feature=fc.FEATURES.index(args.feature),
        window=window,
        self_lag=model.self_lag if model else args.self_lag,
        stride=args.stride,
        model=model,
    )
    m = json.loads(Path(args.manifest).read_text())
    text = forecast_table_csv(results, f"config_hash={m['config_hash']} feature={args.feature}")
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    base = _scenario_from_args(args)
    rows = compare_baselines(base, args.rates, args.methods, args.seeds or [base.seed])
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        out.write(f"# config_hash={base.config_hash()} seeds={args.seeds or [base.seed]}\n")
        w = csv.DictWriter(out, fieldnames=["method", "rv_rate", "avg_waiting_time", "seeds"])
        w.writeheader()
        w.writerows(rows)
    finally:
        if args.out:
            out.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mixtraffic", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-net", help="write a grid network document")
    p.add_argument("--rows", type=int, default=4)
    p.add_argument("--cols", type=int, default=4)
    p.add_argument("--segment-length", type=float, default=100.0)
    p.add_argument("--speed-limit", type=float, default=13.9)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_net)

    p = sub.add_parser("run", help="run one scenario")
    _add_scenario_args(p, seed_required=True)
    p.add_argument("--model", help="fitted forecast model for the rebalancing rounds")
    p.add_argument("--metrics", help="per-tick metrics CSV")
    p.add_argument("--summary", help="run summary JSON")
    p.add_argument("--replay", help="protocol replay log (JSON lines)")
    p.add_argument("--json", action="store_true", help="print the summary as JSON")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gen-data", help="simulate runs into a flow dataset")
    _add_scenario_args(p)
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--source", choices=("estimate", "truth"), default="estimate")
    p.set_defaults(func=cmd_gen_data, duration=2000)

    p = sub.add_parser("fit", help="fit the propagation model on a dataset's training runs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=1)
    p.add_argument("--self-lag", action="store_true")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval-forecast", help="forecast error table on held-out runs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", help="fitted model (default: fit on the training runs)")
    p.add_argument("--horizons", type=int, nargs="+", default=[10, 50, 100])
    p.add_argument("--feature", choices=fc.FEATURES, default="rv_rate")
    p.add_argument("--split", choices=("eval", "validation"), default="eval")
    p.add_argument("--window", type=int, default=1)
    p.add_argument("--self-lag", action="store_true")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_forecast)

    p = sub.add_parser("compare", help="average waiting time per method and RV rate")
    _add_scenario_args(p)
    p.add_argument("--rates", type=float, nargs="+", default=[0.5, 0.6, 0.8])
    p.add_argument("--methods", nargs="+", choices=tuple(COMPARE_METHODS),
                   default=list(COMPARE_METHODS))
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as e:
        log.error("%s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
