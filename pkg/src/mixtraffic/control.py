"""Intersection control primitives.

Go/Stop actions, the fixed-length observation of an approaching RV, the
local reward, the deterministic stand-in policy, conflict-free arbitration
and the fixed-time signal baseline.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .network import LEFT, STRAIGHT, Intersection


class Action(enum.IntEnum):
    STOP = 0
    GO = 1


class ConfigError(ValueError):
    pass


@dataclass
class Observation:
    queue_lengths: np.ndarray  # (J,) vehicle counts
    avg_waits: np.ndarray  # (J,) normalized to [0, 1]
    occupancy_maps: np.ndarray  # (J, res, res) bool
    ego_distance: float
    # not part of the encoded vector: which direction the ego RV requests and
    # whether it is first in that direction's queue
    ego_direction: int = 0
    ego_at_head: bool = True
    # directions whose queue head is inside the zone and could enter now
    ready: np.ndarray | None = None
    # static (J, J) conflict relation of the intersection
    conflicts: np.ndarray | None = None

    def as_vector(self) -> np.ndarray:
        """Concatenation: per-direction (l, w) pairs, occupancy maps, ego distance."""
        pairs = np.column_stack([self.queue_lengths, self.avg_waits]).ravel()
        return np.concatenate(
            [pairs, self.occupancy_maps.astype(float).ravel(), [self.ego_distance]]
        )


Policy = Callable[[Observation], Action]


@dataclass(frozen=True)
class RewardBreakdown:
    local: float
    conflict_penalty: float

    @property
    def total(self) -> float:
        return self.local + self.conflict_penalty


def normalize_wait(wait: float, tau: float) -> float:
    return wait / (wait + tau) if wait > 0 else 0.0


def compute_reward(
    w_next: float,
    action: Action,
    in_conflict: bool = False,
    lambda_local: float = 1.0,
    conflict_penalty: float = 5.0,
) -> RewardBreakdown:
    """Local reward: the normalized next-step wait of the ego direction,
    negated for Stop, plus a fixed penalty when the ego movement was granted
    alongside a conflicting one."""
    r_local = -w_next if action == Action.STOP else w_next
    p_c = -conflict_penalty if in_conflict else 0.0
    return RewardBreakdown(lambda_local * r_local, p_c)


def heuristic_policy(obs: Observation) -> Action:
    """Go only for the head vehicle of the direction with the largest
    (wait, queue length) among directions with a head ready to enter;
    lowest index wins ties."""
    if not obs.ego_at_head or (obs.ready is not None and not obs.ready[obs.ego_direction]):
        return Action.STOP
    best = -1
    best_key = None
    for j in range(len(obs.queue_lengths)):
        if j != obs.ego_direction:
            if obs.queue_lengths[j] <= 0 or (obs.ready is not None and not obs.ready[j]):
                continue
        key = (obs.avg_waits[j], obs.queue_lengths[j])
        if best_key is None or key > best_key:
            best, best_key = j, key
    return Action.GO if best == obs.ego_direction else Action.STOP


def priority_policy(obs: Observation) -> Action:
    """Go unless a ready direction with higher (wait, queue length) priority
    conflicts with the ego direction; lowest index wins ties.

    Applied by every head RV, the Go set is conflict-free by construction
    and lets compatible directions move together. Falls back to
    ``heuristic_policy`` when the observation carries no conflict relation.
    """
    if obs.conflicts is None:
        return heuristic_policy(obs)
    if not obs.ego_at_head or (obs.ready is not None and not obs.ready[obs.ego_direction]):
        return Action.STOP
    e = obs.ego_direction
    key_e = (obs.avg_waits[e], obs.queue_lengths[e], -e)
    for j in range(len(obs.queue_lengths)):
        if j == e or not obs.conflicts[e, j] or obs.queue_lengths[j] <= 0:
            continue
        if obs.ready is not None and not obs.ready[j]:
            continue
        if (obs.avg_waits[j], obs.queue_lengths[j], -j) > key_e:
            return Action.STOP
    return Action.GO


@dataclass(frozen=True)
class Request:
    direction: int
    wait: float
    queue: float
    action: Action


def arbitrate(
    requests: Sequence[Request],
    conflict_matrix: np.ndarray,
    occupied: Iterable[int] = (),
) -> tuple[set[int], set[int]]:
    """Grant the longest prefix of Go requests, ordered by descending
    (wait, queue), that stays conflict-free with each other and with the
    directions already inside the intersection.

    Returns ``(granted, denied)``; denied Go requests are downgraded to Stop.
    """
    occupied = set(occupied)
    gos = sorted(
        (r for r in requests if r.action == Action.GO),
        key=lambda r: (-r.wait, -r.queue, r.direction),
    )
    granted: set[int] = set()
    denied: set[int] = set()
    blocked = False
    for r in gos:
        if not blocked:
            against = granted | occupied
            if any(conflict_matrix[r.direction, g] for g in against if g != r.direction):
                blocked = True
        if blocked:
            denied.add(r.direction)
        else:
            granted.add(r.direction)
    return granted, denied


def has_conflict(directions: Iterable[int], conflict_matrix: np.ndarray) -> bool:
    d = sorted(set(directions))
    for i, a in enumerate(d):
        for b in d[i + 1 :]:
            if conflict_matrix[a, b]:
                return True
    return False


# -------------------------------------------------------------- signals


@dataclass
class SignalPlan:
    # (direction index set, green seconds) per phase
    phases: list[tuple[frozenset[int], int]]
    clearance: int = 3

    @property
    def cycle_length(self) -> int:
        return sum(g + self.clearance for _, g in self.phases)

    def validate(self, intersection: Intersection) -> None:
        for dirs, green in self.phases:
            if green <= 0:
                raise ConfigError(f"node {intersection.node}: phase green must be positive")
            if has_conflict(dirs, intersection.conflict_matrix):
                raise ConfigError(
                    f"node {intersection.node}: phase {sorted(dirs)} contains a conflicting pair"
                )
        if self.clearance < 0:
            raise ConfigError("clearance must be >= 0")


def fixed_time_signal(tick: int, plan: SignalPlan) -> frozenset[int]:
    """Directions with green at ``tick``; empty during all-red clearance."""
    t = tick % plan.cycle_length
    for dirs, green in plan.phases:
        if t < green:
            return dirs
        t -= green
        if t < plan.clearance:
            return frozenset()
        t -= plan.clearance
    return frozenset()  # pragma: no cover


def default_signal_plan(
    intersection: Intersection,
    straight_green: int = 20,
    left_green: int = 10,
    clearance: int = 3,
    grouping: str = "approach",
) -> SignalPlan:
    """Fixed-time plan for one intersection.

    ``grouping="approach"`` gives every approach its own phase with all of
    its movements (split phasing; suits single-file approaches where a
    left-turner at the head would block a straight-only phase).
    ``grouping="axis"`` pairs opposite straights, then opposite lefts, per
    axis, and falls back to split phasing if a group conflicts.
    """
    dirs = intersection.directions
    phases: list[tuple[frozenset[int], int]] = []
    if grouping == "axis":
        for axis in (0, 1):
            for kind, green in ((STRAIGHT, straight_green), (LEFT, left_green)):
                group = frozenset(
                    j for j, (a, k) in enumerate(dirs)
                    if k == kind and intersection.quadrant[a] % 2 == axis
                )
                if group:
                    phases.append((group, green))
        if any(has_conflict(g, intersection.conflict_matrix) for g, _ in phases):
            phases = []
    elif grouping != "approach":
        raise ConfigError(f"unknown signal grouping {grouping!r}")
    if not phases:
        for a in intersection.incoming:
            group = frozenset(j for j, (ap, _) in enumerate(dirs) if ap == a)
            if group:
                phases.append((group, straight_green))
    plan = SignalPlan(phases, clearance)
    plan.validate(intersection)
    return plan


# ------------------------------------------------------- occupancy grids


def _rotate(cell: tuple[int, int], res: int, quarter_turns: int) -> tuple[int, int]:
    r, c = cell
    for _ in range(quarter_turns % 4):
        r, c = res - 1 - c, r
    return r, c


def movement_cells(movement: str, quadrant: int, res: int) -> list[tuple[int, int]]:
    """Grid cells swept by a movement, from entry to exit.

    Built for a north-bound approach (entering at the bottom row, right-hand
    traffic) and rotated counter-clockwise by ``quadrant`` quarter turns.
    """
    col = res // 2
    if movement == "left":
        row_out = max(res // 2 - 1, 0)
        path = [(r, col) for r in range(res - 1, row_out - 1, -1)]
        path += [(row_out, c) for c in range(col - 1, -1, -1)]
    elif movement == "right":
        row_out = min(res // 2, res - 1)
        path = [(r, col) for r in range(res - 1, row_out - 1, -1)]
        path += [(row_out, c) for c in range(col + 1, res)]
    else:
        path = [(r, col) for r in range(res - 1, -1, -1)]
    return [_rotate(p, res, quadrant) for p in path]


def cell_at(path: list[tuple[int, int]], progress: float) -> tuple[int, int]:
    k = int(progress * len(path))
    return path[min(max(k, 0), len(path) - 1)]
