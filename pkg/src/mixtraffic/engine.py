"""Discrete-time microscopic traffic engine (1 step = 1 s).

Every segment and every turning movement inside an intersection is a
single-file *lane*; vehicles are kept per lane from front to back and moved
by a gap-limited safe-speed rule (see ``kernels.follow``). Intersection
entry is decided per tick by the active control mode:

* ``NoTL``: no signals and every driver behaves as an HV (full stop at the
  entrance line, first-stopped-first-served gap acceptance).
* ``TL``: fixed-time signals with all-red clearance.
* ``IntersectionControl``: RVs at the head of a queue inside the
  coordination zone decide Go/Stop with a pluggable policy; requests are
  arbitrated conflict-free, HVs follow an RV-led platoon or fall back to
  the first-stopped-first-served rule.
"""
from __future__ import annotations

import hashlib
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import kernels
from .control import (
    Action,
    Observation,
    Policy,
    Request,
    SignalPlan,
    arbitrate,
    cell_at,
    default_signal_plan,
    fixed_time_signal,
    has_conflict,
    priority_policy,
    movement_cells,
    normalize_wait,
)
from .network import LEFT, NetworkGraph, Route, shortest_route

log = logging.getLogger(__name__)

HV = "HV"
RV = "RV"

NOTL = "NoTL"
TL = "TL"
CONTROL = "IntersectionControl"
CONTROL_MODES = (NOTL, TL, CONTROL)

_EXIT_LIMIT = 1e9


class SimulationError(RuntimeError):
    """Internal invariant violated; ``dump`` carries a state summary."""

    def __init__(self, message: str, dump: dict | None = None):
        super().__init__(message)
        self.dump = dump or {}


@dataclass
class SimParams:
    dt: float = 1.0
    accel: float = 2.6
    decel: float = 4.5
    min_gap: float = 2.0
    vehicle_length: float = 5.0
    stop_speed: float = 0.1
    zone_radius: float = 30.0
    tau_norm: float = 30.0
    lambda_local: float = 1.0
    conflict_penalty: float = 5.0
    grid_resolution: int = 4
    stop_line_tolerance: float = 1.0
    link_through: float = 15.0
    link_left: float = 20.0
    link_right: float = 8.0
    turn_speed: float = 8.0
    hv_platoon_max: int = 3
    straight_green: int = 20
    left_green: int = 10
    clearance: int = 3
    signal_grouping: str = "approach"
    check_invariants: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "SimParams":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown intersection/sim parameters: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SpawnSpec:
    segment: str
    rate: float  # vehicles per second
    rv_probability: float
    destinations: dict[str, float] | None = None


@dataclass(eq=False)
class Vehicle:
    id: int
    kind: str
    route: Route
    route_index: int = 0
    position: float = 0.0
    speed: float = 0.0
    waiting_time: float = 0.0
    pending_reroute: Route | None = None
    lane: int = -1
    local_wait: float = 0.0
    stopped_since: int = -1
    rv_led: bool = False
    platoon: int = 0
    direction: int = -1
    spawn_tick: int = 0
    # RV-private: routes planned for reroute tasks, keyed by shortage segment.
    # Never leaves the vehicle; only scores are reported.
    plans: dict[str, Route] = field(default_factory=dict)

    @property
    def segment(self) -> str:
        return self.route.segments[self.route_index]

    @property
    def destination(self) -> str:
        return self.route.segments[-1]

    def next_segment(self) -> str | None:
        pending = self.pending_reroute
        if pending is not None and pending.segments[0] == self.segment:
            return pending.segments[1] if len(pending.segments) > 1 else None
        if self.route_index + 1 < len(self.route.segments):
            return self.route.segments[self.route_index + 1]
        return None

    def remaining_route(self) -> tuple[str, ...]:
        return self.route.segments[self.route_index :]


@dataclass
class Link:
    """A turning movement through an intersection interior."""

    lane: int
    from_lane: int
    to_lane: int
    node: str
    direction: int
    movement: str
    length: float
    vmax: float
    cells: list[tuple[int, int]]


@dataclass
class SimState:
    tick: int = 0
    vehicles: dict[int, Vehicle] = field(default_factory=dict)
    lanes: list[list[int]] = field(default_factory=list)
    rng: dict[str, np.random.Generator] = field(default_factory=dict)
    next_id: int = 0
    spawned: int = 0
    departed: int = 0
    deferred_spawns: int = 0
    backlog: list[deque] = field(default_factory=list)
    finished_waits: list[float] = field(default_factory=list)
    conflict_ticks: int = 0
    deadlock_events: int = 0
    stalled_ticks: int = 0
    last_entered: dict[str, int] = field(default_factory=dict)
    signal_phase: dict[str, frozenset[int]] = field(default_factory=dict)


def make_rng(seed: int) -> dict[str, np.random.Generator]:
    """Independent per-subsystem streams from one seed."""
    spawn_ss, policy_ss = np.random.SeedSequence(seed).spawn(2)
    return {"spawn": np.random.default_rng(spawn_ss), "policy": np.random.default_rng(policy_ss)}


class Simulator:
    """Owns the static lane layout of a network plus the mutable state."""

    def __init__(
        self,
        graph: NetworkGraph,
        params: SimParams | None = None,
        control_mode: str = CONTROL,
        policy: Policy = priority_policy,
        seed: int = 0,
        signal_plans: dict[str, SignalPlan] | None = None,
    ):
        if control_mode not in CONTROL_MODES:
            raise ValueError(f"unknown control mode {control_mode!r}")
        self.graph = graph
        self.params = params or SimParams()
        self.mode = control_mode
        self.policy = policy
        p = self.params

        self.n_seg = len(graph.ids)
        lane_len = [graph.segments[s].length for s in graph.ids]
        lane_vmax = [graph.segments[s].speed_limit for s in graph.ids]
        self.links: list[Link] = []
        self.link_of: dict[tuple[int, int], Link] = {}
        for node, inter in graph.intersections.items():
            for c in graph.connections:
                a = c.from_segment
                if graph.segments[a].to_node != node:
                    continue
                kind = graph.direction_kind(a, c.to_segment)
                length = {"left": p.link_left, "right": p.link_right}.get(c.movement, p.link_through)
                vmax = min(graph.segments[a].speed_limit, graph.segments[c.to_segment].speed_limit)
                if c.movement != "through":
                    vmax = min(vmax, p.turn_speed)
                link = Link(
                    lane=self.n_seg + len(self.links),
                    from_lane=graph.index[a],
                    to_lane=graph.index[c.to_segment],
                    node=node,
                    direction=inter.direction_index(a, kind),
                    movement=c.movement,
                    length=length,
                    vmax=vmax,
                    cells=movement_cells(c.movement, inter.quadrant[a], p.grid_resolution),
                )
                self.links.append(link)
                self.link_of[(link.from_lane, link.to_lane)] = link
                lane_len.append(length)
                lane_vmax.append(vmax)
        self.lane_len = np.array(lane_len, dtype=float)
        self.lane_vmax = np.array(lane_vmax, dtype=float)
        self.n_lanes = len(lane_len)
        self.node_links: dict[str, list[Link]] = {n: [] for n in graph.intersections}
        for link in self.links:
            self.node_links[link.node].append(link)

        self.signal_plans: dict[str, SignalPlan] = {}
        if control_mode == TL:
            for node, inter in graph.intersections.items():
                plan = (signal_plans or {}).get(node) or default_signal_plan(
                    inter, p.straight_green, p.left_green, p.clearance, p.signal_grouping
                )
                plan.validate(inter)
                self.signal_plans[node] = plan

        self.state = SimState(
            lanes=[[] for _ in range(self.n_lanes)],
            rng=make_rng(seed),
        )
        self._dest_cache: dict[tuple[str, tuple], tuple[list[str], np.ndarray]] = {}

    # ------------------------------------------------------------ helpers

    def lane_name(self, lane: int) -> str:
        if lane < self.n_seg:
            return self.graph.ids[lane]
        link = self.links[lane - self.n_seg]
        return f"{self.graph.ids[link.from_lane]}>{self.graph.ids[link.to_lane]}"

    def _tail_room(self, lane: int) -> float:
        """Furthest front position available to a vehicle entering ``lane``."""
        st = self.state
        ids = st.lanes[lane]
        p = self.params
        if ids:
            return st.vehicles[ids[-1]].position - p.vehicle_length - p.min_gap
        if lane >= self.n_seg:
            link = self.links[lane - self.n_seg]
            return self.lane_len[lane] + self._tail_room(link.to_lane)
        return self.lane_len[lane]

    def _box_room(self, out_lane: int, inbound: dict[int, int]) -> bool:
        """Whether one more vehicle fits on ``out_lane`` after those already
        committed to it (do not block the intersection)."""
        p = self.params
        need = (p.vehicle_length + p.min_gap) * (inbound.get(out_lane, 0) + 1)
        return self._tail_room(out_lane) + p.vehicle_length + p.min_gap >= need + 1e-9

    # ------------------------------------------------------------ spawning

    def _destinations(self, spec: SpawnSpec) -> tuple[list[str], np.ndarray]:
        key = (spec.segment, tuple(sorted((spec.destinations or {}).items())))
        hit = self._dest_cache.get(key)
        if hit is not None:
            return hit
        g = self.graph
        if spec.destinations:
            names = sorted(spec.destinations)
            weights = np.array([spec.destinations[d] for d in names], dtype=float)
        else:
            names = [e for e in g.exit_segments if e != spec.segment]
            weights = np.ones(len(names))
        keep = []
        for i, d in enumerate(names):
            try:
                shortest_route(g, spec.segment, d)
            except ValueError:
                continue
            if d != spec.segment and weights[i] > 0:
                keep.append(i)
        names = [names[i] for i in keep]
        weights = weights[keep]
        if not names:
            raise ValueError(f"spawn segment {spec.segment!r} has no reachable destination")
        cdf = np.cumsum(weights) / weights.sum()
        self._dest_cache[key] = (names, cdf)
        return names, cdf

    def spawn(self, specs: list[SpawnSpec]) -> None:
        """Draw arrivals for this tick and insert queued vehicles where the
        entry area is clear. Draws are made unconditionally so paired runs
        see identical demand."""
        st = self.state
        p = self.params
        rng = st.rng["spawn"]
        while len(st.backlog) < len(specs):
            st.backlog.append(deque())
        for i, spec in enumerate(specs):
            u = rng.random(3)
            if spec.rate > 0 and u[0] < spec.rate * p.dt:
                names, cdf = self._destinations(spec)
                dest = names[min(int(np.searchsorted(cdf, u[2], side="right")), len(names) - 1)]
                kind = RV if u[1] < spec.rv_probability else HV
                st.backlog[i].append((kind, dest, False))
            queue = st.backlog[i]
            if not queue:
                continue
            lane = self.graph.index[spec.segment]
            room = self._tail_room(lane)
            if room < 0:
                kind, dest, counted = queue[0]
                if not counted:
                    st.deferred_spawns += 1
                    queue[0] = (kind, dest, True)
                continue
            kind, dest, _ = queue.popleft()
            route = shortest_route(self.graph, spec.segment, dest)
            bdt = p.decel * p.dt
            v_safe = -bdt + math.sqrt(bdt * bdt + 2 * p.decel * max(room, 0.0))
            v = Vehicle(
                id=st.next_id,
                kind=kind,
                route=route,
                position=0.0,
                speed=min(self.lane_vmax[lane], v_safe),
                lane=lane,
                spawn_tick=st.tick,
            )
            st.next_id += 1
            st.vehicles[v.id] = v
            st.lanes[lane].append(v.id)
            st.spawned += 1

    def place(self, kind: str, route: Route, position: float = 0.0, speed: float = 0.0) -> Vehicle:
        """Insert a vehicle on the first segment of ``route`` (fixtures and
        hand-built scenarios). The lane is kept ordered front to back."""
        st = self.state
        lane = self.graph.index[route.segments[0]]
        if not 0 <= position <= self.lane_len[lane]:
            raise ValueError(f"position {position} is off segment {route.segments[0]!r}")
        v = Vehicle(id=st.next_id, kind=kind, route=route, position=float(position),
                    speed=float(speed), lane=lane, spawn_tick=st.tick)
        st.next_id += 1
        st.vehicles[v.id] = v
        ids = st.lanes[lane]
        k = 0
        while k < len(ids) and st.vehicles[ids[k]].position > position:
            k += 1
        ids.insert(k, v.id)
        st.spawned += 1
        return v

    # -------------------------------------------------------- observation

    def _queued(self, approach_lane: int, kind: str) -> list[Vehicle]:
        """Vehicles of ``approach_lane`` within the zone that will take a
        movement of ``kind``; front first."""
        st = self.state
        length = self.lane_len[approach_lane]
        a = self.graph.ids[approach_lane]
        out = []
        for vid in st.lanes[approach_lane]:
            v = st.vehicles[vid]
            if length - v.position > self.params.zone_radius:
                break
            nxt = v.next_segment()
            if nxt is None:
                continue
            if self.graph.direction_kind(a, nxt) == kind:
                out.append(v)
        return out

    def direction_stats(self, node: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-direction queue length, normalized mean wait and occupancy maps."""
        inter = self.graph.intersections[node]
        p = self.params
        J = inter.J
        l = np.zeros(J)
        w = np.zeros(J)
        maps = np.zeros((J, p.grid_resolution, p.grid_resolution), dtype=bool)
        for j, (a, kind) in enumerate(inter.directions):
            queued = self._queued(self.graph.index[a], kind)
            l[j] = len(queued)
            if queued:
                w[j] = normalize_wait(sum(v.local_wait for v in queued) / len(queued), p.tau_norm)
        for link in self.node_links[node]:
            for vid in self.state.lanes[link.lane]:
                r, c = cell_at(link.cells, self.state.vehicles[vid].position / link.length)
                maps[link.direction, r, c] = True
        return l, w, maps

    def observe(self, vehicle: Vehicle, stats=None) -> tuple[str, Observation]:
        if vehicle.lane >= self.n_seg:
            raise ValueError(f"vehicle {vehicle.id} is inside an intersection")
        seg = self.graph.segments[vehicle.segment]
        dist = seg.length - vehicle.position
        nxt = vehicle.next_segment()
        node = seg.to_node
        if nxt is None or node not in self.graph.intersections or dist > self.params.zone_radius:
            raise ValueError(f"vehicle {vehicle.id} is outside the coordination zone")
        inter = self.graph.intersections[node]
        j = inter.direction_index(seg.id, self.graph.direction_kind(seg.id, nxt))
        l, w, maps = stats if stats is not None else self.direction_stats(node)
        head = self.state.lanes[vehicle.lane][0] == vehicle.id
        ready = np.zeros(inter.J, dtype=bool)
        for a in inter.incoming:
            ids = self.state.lanes[self.graph.index[a]]
            if not ids:
                continue
            h = self.state.vehicles[ids[0]]
            h_next = h.next_segment()
            if (
                h_next is not None
                and self.graph.segments[a].length - h.position <= self.params.zone_radius
                and self._tail_room(self.graph.index[h_next]) >= 0
            ):
                ready[inter.direction_index(a, self.graph.direction_kind(a, h_next))] = True
        return node, Observation(
            l, w, maps, float(dist), ego_direction=j, ego_at_head=head, ready=ready,
            conflicts=inter.conflict_matrix,
        )

    # ----------------------------------------------------------- decisions

    def _decide(self, node: str, inbound: dict[int, int]) -> set[int]:
        """Approach lanes whose head vehicle may enter the intersection."""
        st = self.state
        g = self.graph
        p = self.params
        inter = g.intersections[node]
        C = inter.conflict_matrix
        occupied: set[int] = set()
        for link in self.node_links[node]:
            if st.lanes[link.lane]:
                occupied.add(link.direction)

        heads = []
        for a in inter.incoming:
            lane = g.index[a]
            ids = st.lanes[lane]
            if not ids:
                continue
            v = st.vehicles[ids[0]]
            nxt = v.next_segment()
            if nxt is None:
                continue
            j = inter.direction_index(a, g.direction_kind(a, nxt))
            heads.append((a, lane, v, j, self.lane_len[lane] - v.position, g.index[nxt]))
        if not heads:
            return set()

        granted_lanes: set[int] = set()
        granted_dirs: set[int] = set()

        def try_grant(lane: int, j: int, out_lane: int, blockers: set[int]) -> bool:
            against = occupied | granted_dirs | blockers
            if any(C[j, k] for k in against if k != j):
                return False
            if not self._box_room(out_lane, inbound):
                return False
            granted_lanes.add(lane)
            granted_dirs.add(j)
            inbound[out_lane] = inbound.get(out_lane, 0) + 1
            return True

        if self.mode == TL:
            permitted = fixed_time_signal(st.tick, self.signal_plans[node])
            st.signal_phase[node] = permitted
            for a, lane, v, j, d, out_lane in heads:
                reach = 2 * v.speed * p.dt + v.speed**2 / (2 * p.decel)
                if j in permitted and d <= max(p.zone_radius, reach):
                    try_grant(lane, j, out_lane, set())
            return granted_lanes

        reserved: set[int] = set()
        hv_heads = []
        if self.mode == CONTROL:
            rv_heads = [h for h in heads if h[2].kind == RV and h[4] <= p.zone_radius]
            if rv_heads:
                stats = self.direction_stats(node)
                l, w, _ = stats
                requests = []
                for a, lane, v, j, d, out_lane in rv_heads:
                    _, obs = self.observe(v, stats)
                    requests.append(Request(j, float(w[j]), float(l[j]), self.policy(obs)))
                grants, denied = arbitrate(requests, C, occupied)
                for a, lane, v, j, d, out_lane in rv_heads:
                    if j in grants:
                        if not try_grant(lane, j, out_lane, set()):
                            denied.add(j)
                top = max(
                    (r for r in requests if r.action == Action.GO),
                    key=lambda r: (r.wait, r.queue, -r.direction),
                    default=None,
                )
                if top is not None and top.direction in denied:
                    reserved.add(top.direction)
            hv_heads = [h for h in heads if h[2].kind != RV]
        else:
            hv_heads = heads

        followers = []
        stopped = []
        for h in hv_heads:
            a, lane, v, j, d, out_lane = h
            if self.mode == CONTROL and d <= p.zone_radius:
                prev = st.vehicles.get(st.last_entered.get(a, -1))
                if (
                    prev is not None
                    and prev.lane >= self.n_seg
                    and self.links[prev.lane - self.n_seg].node == node
                    and prev.direction == j
                    and prev.rv_led
                    and prev.platoon < p.hv_platoon_max
                ):
                    followers.append(h)
                    continue
            if v.stopped_since >= 0:
                stopped.append(h)
        for a, lane, v, j, d, out_lane in followers:
            try_grant(lane, j, out_lane, reserved)
        stopped.sort(key=lambda h: (h[2].stopped_since, h[0]))
        for a, lane, v, j, d, out_lane in stopped:
            try_grant(lane, j, out_lane, reserved)
        return granted_lanes

    # ---------------------------------------------------------------- step

    def step(self) -> SimState:
        st = self.state
        p = self.params
        g = self.graph
        n_seg = self.n_seg

        inbound: dict[int, int] = {}
        for link in self.links:
            n = len(st.lanes[link.lane])
            if n:
                inbound[link.to_lane] = inbound.get(link.to_lane, 0) + n
        granted: set[int] = set()
        for node in g.intersections:
            granted |= self._decide(node, inbound)

        front_limit = self.lane_len.copy()
        for lane in range(n_seg):
            ids = st.lanes[lane]
            if not ids:
                continue
            v = st.vehicles[ids[0]]
            nxt = v.next_segment()
            if nxt is None:
                front_limit[lane] = _EXIT_LIMIT
            elif lane in granted:
                link = self.link_of[(lane, g.index[nxt])]
                front_limit[lane] = self.lane_len[lane] + self._tail_room(link.lane)
        for link in self.links:
            if st.lanes[link.lane]:
                front_limit[link.lane] = link.length + self._tail_room(link.to_lane)

        order: list[Vehicle] = []
        lane_of: list[int] = []
        for lane, ids in enumerate(st.lanes):
            for vid in ids:
                order.append(st.vehicles[vid])
                lane_of.append(lane)
        if order:
            pos = np.fromiter((v.position for v in order), float, len(order))
            speed = np.fromiter((v.speed for v in order), float, len(order))
            new_pos, new_speed = kernels.follow(
                pos, speed, np.array(lane_of, dtype=np.int64), front_limit, self.lane_vmax,
                p.accel, p.decel, p.dt, p.vehicle_length, p.min_gap,
            )
            if p.check_invariants:
                moved = new_pos - pos
                vmax = self.lane_vmax[lane_of]
                if np.any(moved > vmax * p.dt + 1e-6) or np.any(moved < -1e-9):
                    raise SimulationError("vehicle moved farther than the speed limit allows",
                                          self.dump())
            for v, x, s in zip(order, new_pos.tolist(), new_speed.tolist()):
                v.position = x
                v.speed = s
            if np.all(new_speed < p.stop_speed):
                st.stalled_ticks += 1
                if st.stalled_ticks == 60:
                    st.deadlock_events += 1
                    log.warning("tick %d: no vehicle has moved for 60 s (%d vehicles): gridlock",
                                st.tick, len(order))
            else:
                st.stalled_ticks = 0

        self._transfer()

        for v in st.vehicles.values():
            if v.speed < p.stop_speed:
                v.waiting_time += p.dt
                v.local_wait += p.dt
                if (
                    v.lane < n_seg
                    and v.stopped_since < 0
                    and st.lanes[v.lane][0] == v.id
                    and self.lane_len[v.lane] - v.position <= p.stop_line_tolerance
                ):
                    v.stopped_since = st.tick

        for node in g.intersections:
            dirs = [link.direction for link in self.node_links[node] if st.lanes[link.lane]]
            if len(dirs) > 1 and has_conflict(dirs, g.intersections[node].conflict_matrix):
                st.conflict_ticks += 1
                if p.check_invariants:
                    raise SimulationError(f"conflicting movements inside {node}", self.dump())

        st.tick += 1
        if p.check_invariants:
            self.check_invariants()
        return st

    def _transfer(self) -> None:
        st = self.state
        g = self.graph
        n_seg = self.n_seg
        for lane in range(self.n_lanes):
            ids = st.lanes[lane]
            if not ids:
                continue
            v = st.vehicles[ids[0]]
            if v.position <= self.lane_len[lane]:
                continue
            ids.pop(0)
            while v.position > self.lane_len[v.lane]:
                cur = v.lane
                if cur < n_seg:
                    nxt = v.next_segment()
                    if nxt is None:
                        self._depart(v)
                        break
                    if v.pending_reroute is not None and v.pending_reroute.segments[0] == v.segment:
                        v.route, v.route_index = v.pending_reroute, 0
                        v.pending_reroute = None
                    link = self.link_of[(cur, g.index[nxt])]
                    a = g.ids[cur]
                    prev = st.vehicles.get(st.last_entered.get(a, -1))
                    if self.mode == CONTROL and v.kind == RV:
                        v.rv_led, v.platoon = True, 0
                    elif (
                        self.mode == CONTROL
                        and v.stopped_since < 0
                        and prev is not None
                        and prev.lane >= n_seg
                        and prev.rv_led
                    ):
                        v.rv_led, v.platoon = True, prev.platoon + 1
                    else:
                        v.rv_led, v.platoon = False, 0
                    st.last_entered[a] = v.id
                    v.position -= self.lane_len[cur]
                    v.lane = link.lane
                    v.direction = link.direction
                    v.stopped_since = -1
                else:
                    link = self.links[cur - n_seg]
                    v.position -= link.length
                    v.lane = link.to_lane
                    v.route_index += 1
                    v.local_wait = 0.0
                    v.direction = -1
            else:
                st.lanes[v.lane].append(v.id)

    def _depart(self, v: Vehicle) -> None:
        st = self.state
        del st.vehicles[v.id]
        st.departed += 1
        st.finished_waits.append(v.waiting_time)

    # ---------------------------------------------------------- checking

    def check_invariants(self) -> None:
        st = self.state
        p = self.params
        seen: set[int] = set()
        for lane, ids in enumerate(st.lanes):
            prev = None
            for vid in ids:
                if vid in seen:
                    raise SimulationError(f"vehicle {vid} listed twice", self.dump())
                seen.add(vid)
                v = st.vehicles[vid]
                if v.lane != lane:
                    raise SimulationError(f"vehicle {vid} lane mismatch", self.dump())
                if not (-1e-9 <= v.position <= self.lane_len[lane] + 1e-9):
                    raise SimulationError(f"vehicle {vid} off its lane", self.dump())
                if prev is not None and prev - v.position < p.vehicle_length + p.min_gap - 1e-6:
                    raise SimulationError(f"vehicle {vid} overlaps its leader", self.dump())
                prev = v.position
        if len(seen) != len(st.vehicles):
            raise SimulationError("occupancy lists and vehicle table disagree", self.dump())
        if st.spawned - st.departed != len(st.vehicles):
            raise SimulationError("vehicle conservation violated", self.dump())

    def dump(self) -> dict[str, Any]:
        st = self.state
        return {
            "tick": st.tick,
            "vehicles": {
                vid: (self.lane_name(v.lane), round(v.position, 3), round(v.speed, 3), v.kind)
                for vid, v in st.vehicles.items()
            },
        }

    def state_hash(self) -> str:
        st = self.state
        h = hashlib.sha256(str(st.tick).encode())
        for lane, ids in enumerate(st.lanes):
            for vid in ids:
                v = st.vehicles[vid]
                h.update(f"{lane}:{vid}:{v.position!r}:{v.speed!r}:{v.waiting_time!r};".encode())
        return h.hexdigest()

    # ----------------------------------------------------------- metrics

    def segment_counts(self) -> tuple[np.ndarray, np.ndarray]:
        """True (vehicles, RVs) per segment, in graph id order."""
        st = self.state
        n = np.zeros(self.n_seg, dtype=np.int64)
        r = np.zeros(self.n_seg, dtype=np.int64)
        for lane in range(self.n_seg):
            ids = st.lanes[lane]
            n[lane] = len(ids)
            r[lane] = sum(1 for vid in ids if st.vehicles[vid].kind == RV)
        return n, r


def step(sim: Simulator) -> SimState:
    return sim.step()


def encode_observation(sim: Simulator, vehicle: Vehicle) -> Observation:
    return sim.observe(vehicle)[1]


def avg_waiting_time(sim_or_waits) -> float | None:
    """Mean final waiting time over every vehicle seen, departed included.

    Accepts a Simulator or a plain sequence of waiting times; returns None
    when no vehicle was observed.
    """
    if isinstance(sim_or_waits, Simulator):
        st = sim_or_waits.state
        waits = list(st.finished_waits) + [v.waiting_time for v in st.vehicles.values()]
    else:
        waits = list(sim_or_waits)
    if not waits:
        return None
    return float(sum(waits) / len(waits))
