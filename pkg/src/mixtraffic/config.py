"""Scenario configuration and the bundled demand scenarios."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .engine import CONTROL, CONTROL_MODES, SimParams, SpawnSpec
from .network import NetworkGraph, generate_grid, load_network

ROUTERS = ("shortest", "rebalance")
DEFAULT_GRID = {"rows": 4, "cols": 4, "segment_length": 100.0, "speed_limit": 13.9}


class ScenarioError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    name: str = "custom"
    network: dict[str, Any] = field(default_factory=lambda: {"grid": dict(DEFAULT_GRID)})
    duration: int = 1000
    seed: int = 0
    control_mode: str = CONTROL
    router: str = "shortest"
    # each entry: segment, rate (veh/s), rv_probability, optional destinations
    spawns: list[dict[str, Any]] = field(default_factory=list)
    # piecewise demand multipliers: [[start_tick, factor], ...]
    demand_profile: list[list[float]] = field(default_factory=list)
    p_target: float = 0.5
    lam: float = 0.05
    cadence: int = 100
    horizon: int = 100
    sense_radius: float = 30.0
    staleness_limit: int = 50
    forecast_model: str | None = None
    forecast_window: int = 1
    sim: dict[str, Any] = field(default_factory=dict)
    metrics_path: str | None = None
    summary_path: str | None = None
    replay_path: str | None = None

    # ------------------------------------------------------------ loading

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ScenarioConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**copy.deepcopy(d))

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def replace(self, **changes: Any) -> "ScenarioConfig":
        d = self.to_dict()
        d.update(copy.deepcopy(changes))
        return ScenarioConfig.from_dict(d)

    # -------------------------------------------------------- derived data

    def build_graph(self) -> NetworkGraph:
        net = self.network
        if "file" in net:
            return load_network(Path(net["file"]).read_text())
        if "grid" in net:
            return load_network(generate_grid(**{**DEFAULT_GRID, **net["grid"]}))
        if "document" in net:
            return load_network(net["document"])
        raise ScenarioError("network must specify 'file', 'grid' or 'document'")

    def sim_params(self) -> SimParams:
        return SimParams.from_dict(self.sim)

    def spawn_specs(self) -> list[SpawnSpec]:
        return [
            SpawnSpec(s["segment"], float(s["rate"]), float(s["rv_probability"]), s.get("destinations"))
            for s in self.spawns
        ]

    def demand_factor(self, tick: int) -> float:
        f = 1.0
        for start, factor in self.demand_profile:
            if tick >= start:
                f = float(factor)
        return f

    def validate(self, graph: NetworkGraph | None = None) -> NetworkGraph:
        if self.duration < 0:
            raise ScenarioError("duration must be >= 0")
        if self.control_mode not in CONTROL_MODES:
            raise ScenarioError(f"control_mode must be one of {CONTROL_MODES}")
        if self.router not in ROUTERS:
            raise ScenarioError(f"router must be one of {ROUTERS}")
        if not 0 < self.p_target < 1 or not 0 <= self.lam < self.p_target:
            raise ScenarioError("need 0 < P_target < 1 and 0 <= lambda < P_target")
        if self.cadence < 1 or self.horizon < 1 or self.forecast_window < 1:
            raise ScenarioError("cadence, horizon and forecast_window must be >= 1")
        if self.sense_radius <= 0 or self.staleness_limit < 0:
            raise ScenarioError("sense_radius must be > 0 and staleness_limit >= 0")
        graph = graph or self.build_graph()
        for s in self.spawns:
            seg = s.get("segment")
            if seg not in graph.segments:
                raise ScenarioError(f"spawn segment {seg!r} not in network")
            if not graph.segments[seg].spawn:
                raise ScenarioError(f"segment {seg!r} is not a spawn segment")
            if not 0 <= float(s["rv_probability"]) <= 1:
                raise ScenarioError(f"rv_probability of {seg!r} must lie in [0, 1]")
            if float(s["rate"]) < 0:
                raise ScenarioError(f"rate of {seg!r} must be >= 0")
            for d in (s.get("destinations") or {}):
                if d not in graph.segments:
                    raise ScenarioError(f"destination {d!r} not in network")
        self.sim_params()
        return graph

    def config_hash(self) -> str:
        """Hash of everything that influences results (output paths excluded)."""
        d = self.to_dict()
        for k in ("metrics_path", "summary_path", "replay_path"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


# --------------------------------------------------------- bundled demand

GRID_SPAWNS = [
    "x0_0-n0_0", "x0_1-n0_1", "x0_2-n0_2", "x1_0-n1_0", "x1_3-n1_3",
    "x2_0-n2_0", "x2_3-n2_3", "x3_1-n3_1", "x3_2-n3_2", "x3_3-n3_3",
]

# Per-scenario (base rate, per-spawn rate overrides, low-RV spawn points).
_SCENARIOS: dict[str, dict[str, Any]] = {
    "morning-rush": {
        "rate": 0.10,
        "boost": {"x0_0-n0_0": 0.14, "x0_1-n0_1": 0.14, "x0_2-n0_2": 0.14},
        "low_rv": ["x1_3-n1_3", "x2_3-n2_3"],
    },
    "evening-rush": {
        "rate": 0.10,
        "boost": {"x3_1-n3_1": 0.14, "x3_2-n3_2": 0.14, "x3_3-n3_3": 0.14},
        "low_rv": ["x1_0-n1_0", "x2_0-n2_0"],
    },
    "late-evening": {
        "rate": 0.05,
        "boost": {},
        "low_rv": ["x0_2-n0_2", "x3_1-n3_1"],
    },
}
SCENARIO_NAMES = tuple(_SCENARIOS)


def bundled_scenario(
    name: str,
    rv_rate: float = 0.55,
    low_rv_rate: float = 0.2,
    seed: int = 0,
    **overrides: Any,
) -> ScenarioConfig:
    """One of the three bundled 4x4-grid demand scenarios.

    They differ only in spawn rates and where the two low-RV spawn points
    sit; ``rv_rate`` applies to every other spawn point.
    """
    if name not in _SCENARIOS:
        raise ScenarioError(f"unknown scenario {name!r}; choose from {SCENARIO_NAMES}")
    sc = _SCENARIOS[name]
    spawns = [
        {
            "segment": s,
            "rate": sc["boost"].get(s, sc["rate"]),
            "rv_probability": low_rv_rate if s in sc["low_rv"] else rv_rate,
        }
        for s in GRID_SPAWNS
    ]
    cfg = ScenarioConfig(name=name, seed=seed, spawns=spawns)
    return cfg.replace(**overrides) if overrides else cfg
