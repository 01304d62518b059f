"""Crowdsensing: RV-local counts within a radius, reduced to a rate before
leaving the vehicle, and coordinator-side per-segment estimates.

Only ``LocalObservation`` crosses the RV/coordinator boundary. It carries
two counts and their ratio; nothing identifying the observed vehicles.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from fractions import Fraction
from typing import Iterable, Mapping

import numpy as np

from . import kernels
from .engine import RV, Simulator, Vehicle

DEFAULT_RADIUS = 30.0
DEFAULT_STALENESS = 50


@dataclass(frozen=True)
class LocalObservation:
    reporter_rv_id: int
    segment_id: str
    observed_total: int
    observed_rv: int
    p_v: float
    tick: int

    def __post_init__(self) -> None:
        if self.observed_total < 1 or not 0 <= self.observed_rv <= self.observed_total:
            raise ValueError(f"inconsistent counts {self.observed_rv}/{self.observed_total}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


@dataclass(frozen=True)
class SegmentEstimate:
    segment_id: str
    p_e: float
    n_e: float
    rv_count: int
    tick: int
    stale: bool = False


def _observation(rv: Vehicle, segment: str, total: int, rvs: int, tick: int) -> LocalObservation:
    return LocalObservation(
        reporter_rv_id=rv.id,
        segment_id=segment,
        observed_total=int(total),
        observed_rv=int(rvs),
        p_v=rvs / total,
        tick=tick,
    )


def sense_local(sim: Simulator, rv: Vehicle, radius: float = DEFAULT_RADIUS) -> LocalObservation:
    """Count vehicles on the reporter's segment within ``radius`` (along the
    segment, reporter included)."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    if rv.lane >= sim.n_seg:
        raise ValueError(f"vehicle {rv.id} is inside an intersection")
    st = sim.state
    total = rvs = 0
    for vid in st.lanes[rv.lane]:
        other = st.vehicles[vid]
        if abs(other.position - rv.position) <= radius:
            total += 1
            rvs += other.kind == RV
    return _observation(rv, rv.segment, total, rvs, st.tick)


def sense_all(sim: Simulator, radius: float = DEFAULT_RADIUS) -> list[LocalObservation]:
    """Local observations of every RV currently on a segment, batched."""
    st = sim.state
    order: list[Vehicle] = []
    lane_of: list[int] = []
    for lane in range(sim.n_seg):
        for vid in st.lanes[lane]:
            order.append(st.vehicles[vid])
            lane_of.append(lane)
    if not order:
        return []
    pos = np.fromiter((v.position for v in order), float, len(order))
    is_rv = np.fromiter((v.kind == RV for v in order), np.bool_, len(order))
    total, rvs = kernels.window_counts(pos, np.array(lane_of, dtype=np.int64), is_rv, radius)
    ids = sim.graph.ids
    return [
        _observation(v, ids[lane_of[k]], total[k], rvs[k], st.tick)
        for k, v in enumerate(order)
        if is_rv[k]
    ]


def aggregate(observations: Iterable[LocalObservation]) -> SegmentEstimate | None:
    """Segment rate = mean reported rate; segment count = reporters / rate.

    Computed in exact rational arithmetic from the reported counts, so the
    result is the correctly rounded value of the formula.
    """
    obs = list(observations)
    if not obs:
        return None
    seg, tick = obs[0].segment_id, obs[0].tick
    if any(o.segment_id != seg or o.tick != tick for o in obs):
        raise ValueError("observations must share segment and tick")
    k = len(obs)
    mean = sum((Fraction(o.observed_rv, o.observed_total) for o in obs), Fraction(0)) / k
    return SegmentEstimate(seg, float(mean), float(k / mean), k, tick)


def aggregate_all(observations: Iterable[LocalObservation]) -> dict[str, SegmentEstimate]:
    by_seg: dict[str, list[LocalObservation]] = {}
    for o in observations:
        by_seg.setdefault(o.segment_id, []).append(o)
    return {s: aggregate(v) for s, v in sorted(by_seg.items())}


def snapshot(
    previous: Mapping[str, SegmentEstimate],
    fresh: Mapping[str, SegmentEstimate],
    tick: int,
    staleness_limit: int,
    priors: Mapping[str, float],
) -> dict[str, SegmentEstimate]:
    """Merge fresh estimates into the table.

    Unreported segments keep their last estimate flagged stale until it is
    older than ``staleness_limit`` ticks, then fall back to the prior rate
    with a zero count.
    """
    table: dict[str, SegmentEstimate] = {}
    for seg in sorted(set(priors) | set(previous) | set(fresh)):
        if seg in fresh:
            table[seg] = fresh[seg]
            continue
        prev = previous.get(seg)
        if prev is not None and not (prev.rv_count == 0 and prev.stale) and tick - prev.tick <= staleness_limit:
            table[seg] = prev if prev.stale else replace(prev, stale=True)
        else:
            table[seg] = SegmentEstimate(seg, float(priors.get(seg, 0.0)), 0.0, 0, tick, True)
    return table


def table_to_matrix(table: Mapping[str, SegmentEstimate], ids: Iterable[str]) -> np.ndarray:
    """Estimate table as an |E| x 2 matrix [vehicle_count, rv_rate]."""
    ids = list(ids)
    X = np.zeros((len(ids), 2))
    for i, s in enumerate(ids):
        est = table.get(s)
        if est is not None:
            X[i, 0] = est.n_e
            X[i, 1] = est.p_e
    return X
