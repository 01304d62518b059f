"""RV rebalancing protocol.

Coordinator side: find segments whose RV rate is below target, compute a
quota, send reroute tasks to RVs on richer predecessor segments and pick the
cheapest responders. RV side: plan a detour through the shortage segment,
keep the planned route private and answer with a score only.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, fields
from typing import Iterable, Mapping, Sequence

from .engine import RV, Simulator, Vehicle
from .network import NetworkGraph, NetworkError, Route, predecessors, shortest_route_via

log = logging.getLogger(__name__)

DEFAULT_LAMBDA = 0.05
CHANGE_ROUTE = "change_route"
_EPS = 1e-9


class ProtocolError(RuntimeError):
    pass


class _Infinite:
    """Score of a declined or unroutable task; sorts after every number."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "INFINITE"

    def __reduce__(self):
        return (_Infinite, ())


INFINITE = _Infinite()


def is_finite(score) -> bool:
    return score is not INFINITE


def _score_to_wire(score):
    return "inf" if score is INFINITE else score


def _score_from_wire(value):
    return INFINITE if value == "inf" else float(value)


# ------------------------------------------------------------- messages


@dataclass(frozen=True)
class ShortageReport:
    segment_id: str
    p_e: float
    n_e: float
    deficit: int
    tick: int


@dataclass(frozen=True)
class RerouteTask:
    task_id: int
    shortage_segment: str
    veh_id: int
    tick: int

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class RouteResponse:
    task_id: int
    veh_id: int
    score: object  # float meters or INFINITE

    def to_dict(self) -> dict:
        return {"task_id": self.task_id, "veh_id": self.veh_id, "score": _score_to_wire(self.score)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "RouteResponse":
        return cls(int(d["task_id"]), int(d["veh_id"]), _score_from_wire(d["score"]))


@dataclass(frozen=True)
class Assignment:
    veh_id: int
    shortage_segment: str
    message: str = CHANGE_ROUTE

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ------------------------------------------------------------ arithmetic


def shortage_threshold_met(p_e: float, p_target: float, lam: float) -> bool:
    """``p_e < p_target - lam``, with a tolerance so decimal ties count as
    not below threshold."""
    return p_e < p_target - lam - 1e-12


def deficit(p_e: float, n_e: float, p_target: float) -> int:
    """Quota ceil((p_target - p_e) * n_e), robust to float noise at integers."""
    return math.ceil((p_target - p_e) * n_e - _EPS)


def shortage_index(p_e: float, p_target: float) -> float:
    """How far ``p_e`` falls below the target, zero at or above it.

    The gap is snapped to 12 decimals so decimal rates give decimal gaps
    (0.15 - 0.05 is 0.1, not 0.09999999999999999).
    """
    return round(p_target - p_e, 12) if p_e < p_target else 0.0


def _validate_target(p_target: float, lam: float) -> None:
    if not 0 < p_target < 1:
        raise ValueError("P_target must lie in (0, 1)")
    if not 0 <= lam < p_target:
        raise ValueError("lambda must lie in [0, P_target)")


def _pn(value) -> tuple[float, float]:
    if hasattr(value, "p_e"):
        return float(value.p_e), float(value.n_e)
    p, n = value
    return float(p), float(n)


def detect_shortage(
    table: Mapping[str, object],
    p_target: float,
    lam: float = DEFAULT_LAMBDA,
    tick: int = 0,
) -> list[ShortageReport]:
    """Reports for every segment below ``p_target - lam``.

    ``table`` maps segment ids to SegmentEstimate-like objects or
    ``(p_e, n_e)`` pairs. Segments with no estimated vehicles are skipped.
    """
    _validate_target(p_target, lam)
    out = []
    for seg in sorted(table):
        p, n = _pn(table[seg])
        if n <= 0 or not shortage_threshold_met(p, p_target, lam):
            continue
        d = deficit(p, n, p_target)
        if d >= 1:
            out.append(ShortageReport(seg, p, n, d, tick))
    return out


def issue_tasks(
    reports: Sequence[ShortageReport],
    graph: NetworkGraph,
    table: Mapping[str, object],
    rv_locations: Mapping[str, Iterable[int]],
    p_target: float,
    tick: int = 0,
    first_task_id: int = 0,
) -> list[RerouteTask]:
    """One task per (shortage segment, RV on a predecessor richer than target).

    ``rv_locations`` maps a segment to the RVs currently reporting from it.
    Task ids run consecutively in (segment, predecessor, RV id) order.
    """
    tasks: list[RerouteTask] = []
    seen: set[tuple[int, str]] = set()
    tid = first_task_id
    for rep in sorted(reports, key=lambda r: r.segment_id):
        served = False
        for pre in predecessors(graph, rep.segment_id):
            est = table.get(pre)
            if est is None or _pn(est)[0] <= p_target:
                continue
            for vid in sorted(rv_locations.get(pre, ())):
                if (vid, rep.segment_id) in seen:
                    continue
                seen.add((vid, rep.segment_id))
                tasks.append(RerouteTask(tid, rep.segment_id, vid, tick))
                tid += 1
                served = True
        if not served:
            log.debug("tick %d: shortage on %s has no RV-rich feeder", tick, rep.segment_id)
    return tasks


# --------------------------------------------------------------- RV side


def _remaining(graph: NetworkGraph, segments: Sequence[str], position: float) -> float:
    return graph.segments[segments[0]].length - position + sum(
        graph.segments[s].length for s in segments[1:]
    )


def score_route(
    rv: Vehicle, new_route: Route, curr_route: Route, shortage_segment: str, graph: NetworkGraph
) -> float:
    """Distance to the shortage segment along the new route plus the
    increase in remaining route length."""
    new, curr = new_route.segments, curr_route.segments
    if new[0] != rv.segment or curr[0] != rv.segment:
        raise ValueError("routes must start at the vehicle's current segment")
    if shortage_segment not in new[1:]:
        raise ValueError(f"new route does not reach {shortage_segment!r}")
    k = new.index(shortage_segment, 1)
    dis = _remaining(graph, new[:k], rv.position)
    return dis + _remaining(graph, new, rv.position) - _remaining(graph, curr, rv.position)


def plan_routes(rv: Vehicle, tasks: Sequence[RerouteTask], graph: NetworkGraph) -> list[RouteResponse]:
    """Score every task, keep only the cheapest finite and mask the rest.

    Planned routes are stored on the vehicle; only scores are returned.
    An RV that still has an unexecuted reroute declines everything, and an RV
    whose remaining route already crosses a shortage segment declines that
    task: it is part of the segment's supply already, so assigning it would
    use up quota without adding an RV.
    """
    if any(t.veh_id != rv.id for t in tasks):
        raise ValueError("tasks addressed to another vehicle")
    rv.plans.clear()
    scores: dict[int, object] = {}
    if rv.pending_reroute is not None:
        return [RouteResponse(t.task_id, rv.id, INFINITE) for t in tasks]
    curr = Route(rv.remaining_route(), graph.route_length(rv.remaining_route()))
    ahead = set(curr.segments[1:])
    for t in tasks:
        if t.shortage_segment in ahead:
            scores[t.task_id] = INFINITE
            continue
        try:
            new = shortest_route_via(graph, rv.segment, t.shortage_segment, rv.destination)
            scores[t.task_id] = score_route(rv, new, curr, t.shortage_segment, graph)
            rv.plans[t.shortage_segment] = new
        except (NetworkError, ValueError):
            scores[t.task_id] = INFINITE
    finite = [(s, tid) for tid, s in scores.items() if s is not INFINITE]
    best = min(finite)[1] if finite else None
    out = []
    for t in tasks:
        keep = t.task_id == best
        out.append(RouteResponse(t.task_id, rv.id, scores[t.task_id] if keep else INFINITE))
        if not keep:
            rv.plans.pop(t.shortage_segment, None)
    return out


# ------------------------------------------------------ coordinator side


def select_routes(
    responses: Sequence[RouteResponse], quota: int, shortage_segment: str
) -> list[Assignment]:
    """Assign the ``quota`` cheapest finite responders (ties by vehicle id)."""
    finite = sorted((r for r in responses if r.score is not INFINITE), key=lambda r: (r.score, r.veh_id))
    chosen = finite[: max(quota, 0)]
    if len(chosen) < quota:
        log.debug("%s: quota %d, only %d finite responses", shortage_segment, quota, len(chosen))
    return [Assignment(r.veh_id, shortage_segment) for r in chosen]


def apply_assignment(sim: Simulator, assignment: Assignment) -> bool:
    """Activate the vehicle's stored plan; False if the assignment expired."""
    v = sim.state.vehicles.get(assignment.veh_id)
    if v is None or v.lane >= sim.n_seg:
        return False
    plan = v.plans.get(assignment.shortage_segment)
    if plan is None or plan.segments[0] != v.segment:
        return False
    v.pending_reroute = plan
    v.plans.clear()
    return True


@dataclass
class ProtocolCounters:
    rounds: int = 0
    shortages: int = 0
    tasks: int = 0
    assignments: int = 0
    applied: int = 0
    expired: int = 0
    shortfall: int = 0
    unserviceable: int = 0


@dataclass
class Coordinator:
    """Runs decision rounds and records every protocol message."""

    graph: NetworkGraph
    p_target: float
    lam: float = DEFAULT_LAMBDA
    counters: ProtocolCounters = field(default_factory=ProtocolCounters)
    next_task_id: int = 0
    replay: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        _validate_target(self.p_target, self.lam)

    def _log(self, kind: str, tick: int, payload: dict) -> None:
        entry = {"round": self.counters.rounds, "tick": tick, "type": kind, **payload}
        self.replay.append(json.dumps(entry, sort_keys=True))

    def round(
        self,
        sim: Simulator,
        shortage_table: Mapping[str, object],
        feeder_table: Mapping[str, object],
        rv_locations: Mapping[str, Iterable[int]],
        tick: int,
    ) -> list[Assignment]:
        """One detect / issue / plan / select / apply cycle.

        ``shortage_table`` drives detection (typically the forecast);
        ``feeder_table`` decides which predecessors count as RV-rich.
        """
        c = self.counters
        reports = detect_shortage(shortage_table, self.p_target, self.lam, tick)
        tasks = issue_tasks(
            reports, self.graph, feeder_table, rv_locations, self.p_target, tick, self.next_task_id
        )
        self.next_task_id += len(tasks)
        c.shortages += len(reports)
        c.tasks += len(tasks)
        for r in reports:
            self._log("shortage", tick, {"segment_id": r.segment_id, "deficit": r.deficit})
        for t in tasks:
            self._log("task", tick, t.to_dict())

        by_rv: dict[int, list[RerouteTask]] = {}
        for t in tasks:
            by_rv.setdefault(t.veh_id, []).append(t)
        responses: list[RouteResponse] = []
        for vid in sorted(by_rv):
            v = sim.state.vehicles.get(vid)
            if v is None or v.kind != RV or v.lane >= sim.n_seg:
                responses += [RouteResponse(t.task_id, vid, INFINITE) for t in by_rv[vid]]
                continue
            responses += plan_routes(v, by_rv[vid], self.graph)
        for r in responses:
            self._log("response", tick, r.to_dict())

        task_seg = {t.task_id: t.shortage_segment for t in tasks}
        assignments: list[Assignment] = []
        for rep in reports:
            mine = [r for r in responses if task_seg[r.task_id] == rep.segment_id]
            if not mine:
                c.unserviceable += 1
                continue
            chosen = select_routes(mine, rep.deficit, rep.segment_id)
            c.shortfall += rep.deficit - len(chosen)
            assignments += chosen
        if len({a.veh_id for a in assignments}) != len(assignments):
            raise ProtocolError("a vehicle received two assignments in one round")
        for a in assignments:
            self._log("assignment", tick, a.to_dict())
            if apply_assignment(sim, a):
                c.applied += 1
            else:
                c.expired += 1
        c.assignments += len(assignments)
        # plans for tasks that were not assigned are discarded
        for vid in by_rv:
            v = sim.state.vehicles.get(vid)
            if v is not None:
                v.plans.clear()
        c.rounds += 1
        return assignments
