"""Road network: segments, turning connections, intersections and routing.

Segments are the graph nodes and turning connections the edges (a line
graph), which is the representation used both for routing and forecasting.
The network document is JSON::

    {
      "format": 1,
      "nodes": [{"id": "n0_0", "x": 0.0, "y": 0.0}, ...],          # optional
      "segments": [{"id": "a", "from": "n0", "to": "n1", "length_m": 100,
                    "speed_mps": 13.9, "lanes": 1,
                    "spawn": false, "exit": false}, ...],
      "connections": [{"from": "a", "to": "b", "movement": "through"}, ...]
    }

Node coordinates are only used to derive intersection conflict matrices;
without them every pair of movements from different approaches conflicts.
"""
from __future__ import annotations

import hashlib
import heapq
import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterable

import numpy as np

FORMAT_VERSION = 1
MOVEMENTS = ("left", "right", "through")

# Direction kinds: right turns share the straight-ahead direction, as in the
# usual 8-direction encoding of a four-way intersection.
STRAIGHT = "S"
LEFT = "L"


class NetworkError(ValueError):
    """Malformed or inconsistent network document."""


class UnreachableError(NetworkError):
    """No connected route exists between the requested segments."""


@dataclass(frozen=True)
class RoadSegment:
    id: str
    from_node: str
    to_node: str
    length: float
    speed_limit: float
    lane_count: int = 1
    spawn: bool = False
    exit: bool = False

    def __post_init__(self) -> None:
        if not self.length > 0:
            raise NetworkError(f"segment {self.id!r}: non-positive length {self.length}")
        if not self.speed_limit > 0:
            raise NetworkError(f"segment {self.id!r}: non-positive speed {self.speed_limit}")
        if self.lane_count < 1:
            raise NetworkError(f"segment {self.id!r}: lane count must be >= 1")
        if self.from_node == self.to_node:
            raise NetworkError(f"segment {self.id!r}: self-loop at node {self.from_node!r}")


@dataclass(frozen=True)
class Connection:
    from_segment: str
    to_segment: str
    movement: str = "through"


@dataclass(frozen=True)
class Route:
    segments: tuple[str, ...]
    total_length: float

    def __len__(self) -> int:
        return len(self.segments)

    @property
    def destination(self) -> str:
        return self.segments[-1]


@dataclass
class Intersection:
    node: str
    incoming: list[str]
    outgoing: list[str]
    # (approach segment id, kind) pairs, kind in {STRAIGHT, LEFT}
    directions: list[tuple[str, str]]
    conflict_matrix: np.ndarray
    geometry: str
    # approach segment -> quadrant index 0..3 (rotation of the canonical
    # north-bound approach), used for occupancy maps
    quadrant: dict[str, int] = field(default_factory=dict)

    @property
    def J(self) -> int:
        return len(self.directions)

    def direction_index(self, approach: str, kind: str) -> int:
        return self.directions.index((approach, kind))


@dataclass(eq=False)
class NetworkGraph:
    segments: dict[str, RoadSegment]
    connections: tuple[Connection, ...]
    ids: tuple[str, ...]
    index: dict[str, int]
    adjacency: np.ndarray
    intersections: dict[str, Intersection]
    coords: dict[str, tuple[float, float]]
    _succ: dict[str, tuple[str, ...]] = field(repr=False, default_factory=dict)
    _pred: dict[str, tuple[str, ...]] = field(repr=False, default_factory=dict)
    _movement: dict[tuple[str, str], str] = field(repr=False, default_factory=dict)
    _trees: dict[str, dict[str, tuple[float, tuple[str, ...]]]] = field(
        repr=False, default_factory=dict
    )
    digest: str = ""

    def successors(self, segment: str) -> tuple[str, ...]:
        self._check(segment)
        return self._succ[segment]

    def movement(self, from_segment: str, to_segment: str) -> str:
        return self._movement[(from_segment, to_segment)]

    def direction_kind(self, from_segment: str, to_segment: str) -> str:
        return LEFT if self._movement[(from_segment, to_segment)] == "left" else STRAIGHT

    @property
    def spawn_segments(self) -> list[str]:
        return [s for s in self.ids if self.segments[s].spawn]

    @property
    def exit_segments(self) -> list[str]:
        return [s for s in self.ids if self.segments[s].exit]

    def route_length(self, segments: Iterable[str]) -> float:
        return float(sum(self.segments[s].length for s in segments))

    def _check(self, segment: str) -> None:
        if segment not in self.segments:
            raise NetworkError(f"unknown segment {segment!r}")


# ---------------------------------------------------------------- loading


def _opt(entry: dict[str, Any], *keys: str, default: Any = None) -> Any:
    for k in keys:
        if k in entry:
            return entry[k]
    return default


def load_network(text: str | dict) -> NetworkGraph:
    """Parse and validate a network document (JSON text or decoded dict)."""
    doc = json.loads(text) if isinstance(text, (str, bytes)) else text
    if doc.get("format") != FORMAT_VERSION:
        raise NetworkError(f"unsupported network format {doc.get('format')!r}")

    coords: dict[str, tuple[float, float]] = {}
    for node in doc.get("nodes", []):
        if "x" in node and "y" in node:
            coords[str(node["id"])] = (float(node["x"]), float(node["y"]))

    segments: dict[str, RoadSegment] = {}
    for raw in doc.get("segments", []):
        sid = str(raw["id"])
        if sid in segments:
            raise NetworkError(f"duplicate segment {sid!r}")
        segments[sid] = RoadSegment(
            id=sid,
            from_node=str(raw["from"]),
            to_node=str(raw["to"]),
            length=float(_opt(raw, "length_m", "length")),
            speed_limit=float(_opt(raw, "speed_mps", "speed_limit")),
            lane_count=int(_opt(raw, "lanes", "lane_count", default=1)),
            spawn=bool(raw.get("spawn", False)),
            exit=bool(raw.get("exit", False)),
        )
    if not segments:
        raise NetworkError("network has no segments")

    connections: list[Connection] = []
    seen: set[tuple[str, str]] = set()
    for raw in doc.get("connections", []):
        a, b = str(raw["from"]), str(raw["to"])
        movement = str(raw.get("movement", "through"))
        for sid in (a, b):
            if sid not in segments:
                raise NetworkError(f"connection {a!r}->{b!r}: dangling segment reference {sid!r}")
        if movement not in MOVEMENTS:
            raise NetworkError(f"connection {a!r}->{b!r}: unknown movement {movement!r}")
        sa, sb = segments[a], segments[b]
        if sa.to_node != sb.from_node:
            raise NetworkError(f"connection {a!r}->{b!r}: segments are not contiguous")
        if sb.to_node == sa.from_node:
            raise NetworkError(f"connection {a!r}->{b!r}: U-turn is not permitted")
        if (a, b) in seen:
            raise NetworkError(f"duplicate connection {a!r}->{b!r}")
        seen.add((a, b))
        connections.append(Connection(a, b, movement))

    return _build(segments, connections, coords)


def _build(
    segments: dict[str, RoadSegment],
    connections: list[Connection],
    coords: dict[str, tuple[float, float]],
) -> NetworkGraph:
    ids = tuple(sorted(segments))
    index = {s: i for i, s in enumerate(ids)}
    adjacency = np.zeros((len(ids), len(ids)), dtype=bool)
    succ: dict[str, list[str]] = {s: [] for s in ids}
    pred: dict[str, list[str]] = {s: [] for s in ids}
    movement: dict[tuple[str, str], str] = {}
    for c in connections:
        adjacency[index[c.from_segment], index[c.to_segment]] = True
        succ[c.from_segment].append(c.to_segment)
        pred[c.to_segment].append(c.from_segment)
        movement[(c.from_segment, c.to_segment)] = c.movement

    spawns = [s for s in ids if segments[s].spawn]
    if not spawns:
        raise NetworkError("network has no spawn segments")
    reached = set(spawns)
    frontier = list(spawns)
    while frontier:
        s = frontier.pop()
        for t in succ[s]:
            if t not in reached:
                reached.add(t)
                frontier.append(t)
    for s in ids:
        if s not in reached:
            raise NetworkError(f"segment {s!r} is unreachable from every spawn segment")

    graph = NetworkGraph(
        segments=dict(segments),
        connections=tuple(sorted(connections, key=lambda c: (c.from_segment, c.to_segment))),
        ids=ids,
        index=index,
        adjacency=adjacency,
        intersections={},
        coords=dict(coords),
        _succ={s: tuple(sorted(v)) for s, v in succ.items()},
        _pred={s: tuple(sorted(v)) for s, v in pred.items()},
        _movement=movement,
    )
    graph.intersections = _build_intersections(graph)
    graph.digest = _digest(graph)
    return graph


def _digest(graph: NetworkGraph) -> str:
    h = hashlib.sha256()
    for s in graph.ids:
        seg = graph.segments[s]
        h.update(f"{s}|{seg.from_node}|{seg.to_node}|{seg.length!r}\n".encode())
    for c in graph.connections:
        h.update(f"{c.from_segment}>{c.to_segment}\n".encode())
    return h.hexdigest()[:16]


def _heading(graph: NetworkGraph, seg: RoadSegment) -> tuple[float, float] | None:
    a = graph.coords.get(seg.from_node)
    b = graph.coords.get(seg.to_node)
    if a is None or b is None:
        return None
    dx, dy = b[0] - a[0], b[1] - a[1]
    norm = math.hypot(dx, dy)
    if norm == 0:
        return None
    return dx / norm, dy / norm


def _relation(h1: tuple[float, float] | None, h2: tuple[float, float] | None) -> str:
    if h1 is None or h2 is None:
        return "unknown"
    dot = h1[0] * h2[0] + h1[1] * h2[1]
    if dot < -math.cos(math.radians(45)):
        return "opposite"
    if dot > math.cos(math.radians(45)):
        return "parallel"
    return "perpendicular"


def directions_conflict(rel: str, same_approach: bool, kind1: str, kind2: str) -> bool:
    if same_approach:
        return False
    if rel == "opposite":
        return kind1 != kind2
    return True


def _quadrant(h: tuple[float, float] | None) -> int:
    # 0: heading north, 1: west, 2: south, 3: east (counter-clockwise turns)
    if h is None:
        return 0
    angle = math.degrees(math.atan2(h[1], h[0]))  # east = 0, north = 90
    return int(round((angle - 90.0) / 90.0)) % 4


def _build_intersections(graph: NetworkGraph) -> dict[str, Intersection]:
    by_node: dict[str, list[Connection]] = {}
    for c in graph.connections:
        by_node.setdefault(graph.segments[c.from_segment].to_node, []).append(c)

    out: dict[str, Intersection] = {}
    for node in sorted(by_node):
        incoming = sorted(s for s in graph.ids if graph.segments[s].to_node == node)
        outgoing = sorted(s for s in graph.ids if graph.segments[s].from_node == node)
        legs = {graph.segments[s].from_node for s in incoming} | {
            graph.segments[s].to_node for s in outgoing
        }
        if len(legs) > 4:
            raise NetworkError(f"node {node!r} has {len(legs)} legs; at most four are supported")
        directions: list[tuple[str, str]] = []
        for a in incoming:
            kinds = {graph.direction_kind(a, b) for b in graph._succ[a]}
            for kind in (STRAIGHT, LEFT):
                if kind in kinds:
                    directions.append((a, kind))
        J = len(directions)
        headings = {a: _heading(graph, graph.segments[a]) for a in incoming}
        conflict = np.zeros((J, J), dtype=bool)
        for i, (a1, k1) in enumerate(directions):
            for j, (a2, k2) in enumerate(directions):
                if i == j:
                    continue
                rel = _relation(headings[a1], headings[a2])
                conflict[i, j] = directions_conflict(rel, a1 == a2, k1, k2)
        geometry = "four-way" if len(legs) == 4 else "three-way"
        out[node] = Intersection(
            node=node,
            incoming=incoming,
            outgoing=outgoing,
            directions=directions,
            conflict_matrix=conflict,
            geometry=geometry,
            quadrant={a: _quadrant(headings[a]) for a in incoming},
        )
    return out


# ------------------------------------------------------------ generation


def generate_grid(
    rows: int,
    cols: int,
    segment_length: float = 100.0,
    speed_limit: float = 13.9,
) -> dict:
    """Build a bidirectional grid network document.

    Every border node gets external stubs: non-corner border nodes one
    entering (spawn) and one leaving (exit) stub, corner nodes a single stub
    alternating entry/exit clockwise around the perimeter.
    """
    if rows < 2 or cols < 2:
        raise NetworkError(f"grid needs rows >= 2 and cols >= 2, got {rows}x{cols}")
    L = float(segment_length)

    def node(r: int, c: int) -> str:
        return f"n{r}_{c}"

    pos: dict[str, tuple[float, float]] = {}
    for r in range(rows):
        for c in range(cols):
            pos[node(r, c)] = (c * L, -r * L)

    links: list[tuple[str, str, bool, bool]] = []  # from, to, spawn, exit
    for r in range(rows):
        for c in range(cols):
            for dr, dc in ((0, 1), (1, 0), (0, -1), (-1, 0)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < rows and 0 <= cc < cols:
                    links.append((node(r, c), node(rr, cc), False, False))

    corners = [(0, 0), (0, cols - 1), (rows - 1, cols - 1), (rows - 1, 0)]
    for r in range(rows):
        for c in range(cols):
            if not (r in (0, rows - 1) or c in (0, cols - 1)):
                continue
            if r == 0:
                off = (0.0, L)
            elif r == rows - 1:
                off = (0.0, -L)
            elif c == 0:
                off = (-L, 0.0)
            else:
                off = (L, 0.0)
            x, y = pos[node(r, c)]
            ext = f"x{r}_{c}"
            pos[ext] = (x + off[0], y + off[1])
            if (r, c) in corners:
                if corners.index((r, c)) % 2 == 0:
                    links.append((ext, node(r, c), True, False))
                else:
                    links.append((node(r, c), ext, False, True))
            else:
                links.append((ext, node(r, c), True, False))
                links.append((node(r, c), ext, False, True))

    segments = []
    for a, b, spawn, exit_ in links:
        segments.append(
            {
                "id": f"{a}-{b}",
                "from": a,
                "to": b,
                "length_m": L,
                "speed_mps": float(speed_limit),
                "lanes": 1,
                "spawn": spawn,
                "exit": exit_,
            }
        )

    connections = []
    for s_in in segments:
        for s_out in segments:
            if s_in["to"] != s_out["from"] or s_out["to"] == s_in["from"]:
                continue
            ax, ay = pos[s_in["from"]]
            nx, ny = pos[s_in["to"]]
            bx, by = pos[s_out["to"]]
            cross = (nx - ax) * (by - ny) - (ny - ay) * (bx - nx)
            if abs(cross) < 1e-9:
                movement = "through"
            elif cross > 0:
                movement = "left"
            else:
                movement = "right"
            connections.append({"from": s_in["id"], "to": s_out["id"], "movement": movement})

    return {
        "format": FORMAT_VERSION,
        "nodes": [{"id": n, "x": p[0], "y": p[1]} for n, p in sorted(pos.items())],
        "segments": sorted(segments, key=lambda s: s["id"]),
        "connections": sorted(connections, key=lambda c: (c["from"], c["to"])),
    }


# ----------------------------------------------------------------- queries


def predecessors(graph: NetworkGraph, segment: str) -> list[str]:
    """Segments with a permitted connection into ``segment``, sorted by id."""
    graph._check(segment)
    return list(graph._pred[segment])


def _shortest_tree(graph: NetworkGraph, source: str) -> dict[str, tuple[float, tuple[str, ...]]]:
    tree = graph._trees.get(source)
    if tree is not None:
        return tree
    tree = {}
    heap: list[tuple[float, tuple[str, ...]]] = [(graph.segments[source].length, (source,))]
    while heap:
        dist, path = heapq.heappop(heap)
        last = path[-1]
        if last in tree:
            continue
        tree[last] = (dist, path)
        for nxt in graph._succ[last]:
            if nxt not in tree:
                heapq.heappush(heap, (dist + graph.segments[nxt].length, path + (nxt,)))
    graph._trees[source] = tree
    return tree


def shortest_route(graph: NetworkGraph, from_segment: str, to_segment: str) -> Route:
    """Length-minimal route; ties go to the lexicographically smallest id sequence."""
    graph._check(from_segment)
    graph._check(to_segment)
    hit = _shortest_tree(graph, from_segment).get(to_segment)
    if hit is None:
        raise UnreachableError(f"{to_segment!r} is unreachable from {from_segment!r}")
    return Route(hit[1], hit[0])


def shortest_route_via(
    graph: NetworkGraph, from_segment: str, via_segment: str, to_segment: str
) -> Route:
    first = shortest_route(graph, from_segment, via_segment)
    second = shortest_route(graph, via_segment, to_segment)
    segs = first.segments + second.segments[1:]
    return Route(segs, first.total_length + second.total_length - graph.segments[via_segment].length)


def dump_network(doc: dict) -> str:
    return json.dumps(doc, indent=1, sort_keys=True)
