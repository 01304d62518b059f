"""Hot per-tick kernels with a numba path and a pure-numpy fallback.

Set ``MIXTRAFFIC_NUMBA=0`` in the environment to force the numpy path (it is
also used automatically when numba cannot be imported). Both paths compute
identical results; tests/test_kernels.py checks that.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and os.environ.get("MIXTRAFFIC_NUMBA", "1").lower() not in ("0", "false", "no")


def follow_numpy(pos, speed, lane_of, front_limit, lane_vmax, accel, decel, dt, veh_len, min_gap):
    """One car-following update for vehicles grouped by lane, front to back.

    ``front_limit[i]`` is how far (in lane ``i`` coordinates) the front
    vehicle of lane ``i`` may advance. Followers are limited by their
    leader's previous position, which keeps the update collision-free.
    """
    n = pos.shape[0]
    new_pos = np.empty(n)
    new_speed = np.empty(n)
    if n == 0:
        return new_pos, new_speed
    is_front = np.empty(n, dtype=np.bool_)
    is_front[0] = True
    is_front[1:] = lane_of[1:] != lane_of[:-1]
    limit = np.empty(n)
    limit[0] = 0.0
    limit[1:] = pos[:-1] - veh_len - min_gap
    limit = np.where(is_front, front_limit[lane_of], limit)
    gap = np.maximum(limit - pos, 0.0)
    bdt = decel * dt
    v_safe = -bdt + np.sqrt(bdt * bdt + 2.0 * decel * gap)
    v = np.minimum(np.minimum(speed + accel * dt, lane_vmax[lane_of]), v_safe)
    v = np.maximum(v, 0.0)
    new_speed[:] = v
    new_pos[:] = pos + v * dt
    return new_pos, new_speed


def window_counts_numpy(pos, lane_of, is_rv, radius):
    """For every vehicle, count vehicles (and RVs) in the same lane within ``radius``.

    Input must be grouped by lane with positions descending inside a lane.
    """
    n = pos.shape[0]
    total = np.zeros(n, dtype=np.int64)
    rvs = np.zeros(n, dtype=np.int64)
    if n == 0:
        return total, rvs
    bounds = np.flatnonzero(np.r_[True, lane_of[1:] != lane_of[:-1], True])
    rv_int = is_rv.astype(np.int64)
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        asc = pos[lo:hi][::-1]
        csum = np.r_[0, np.cumsum(rv_int[lo:hi][::-1])]
        left = np.searchsorted(asc, asc - radius, side="left")
        right = np.searchsorted(asc, asc + radius, side="right")
        total[lo:hi] = (right - left)[::-1]
        rvs[lo:hi] = (csum[right] - csum[left])[::-1]
    return total, rvs


if _HAVE_NUMBA:

    @numba.njit(cache=True)
    def follow_numba(pos, speed, lane_of, front_limit, lane_vmax, accel, decel, dt, veh_len, min_gap):
        n = pos.shape[0]
        new_pos = np.empty(n)
        new_speed = np.empty(n)
        bdt = decel * dt
        for k in range(n):
            lane = lane_of[k]
            if k == 0 or lane_of[k - 1] != lane:
                limit = front_limit[lane]
            else:
                limit = pos[k - 1] - veh_len - min_gap
            gap = limit - pos[k]
            if gap < 0.0:
                gap = 0.0
            v_safe = -bdt + np.sqrt(bdt * bdt + 2.0 * decel * gap)
            v = speed[k] + accel * dt
            vmax = lane_vmax[lane]
            if vmax < v:
                v = vmax
            if v_safe < v:
                v = v_safe
            if v < 0.0:
                v = 0.0
            new_speed[k] = v
            new_pos[k] = pos[k] + v * dt
        return new_pos, new_speed

    @numba.njit(cache=True)
    def window_counts_numba(pos, lane_of, is_rv, radius):
        n = pos.shape[0]
        total = np.zeros(n, dtype=np.int64)
        rvs = np.zeros(n, dtype=np.int64)
        start = 0
        while start < n:
            end = start
            while end < n and lane_of[end] == lane_of[start]:
                end += 1
            # positions descend inside [start, end); same comparisons as the
            # searchsorted bounds of the numpy path
            for k in range(start, end):
                lo_val = pos[k] - radius
                hi_val = pos[k] + radius
                t = 0
                r = 0
                for j in range(start, end):
                    if pos[j] >= lo_val and pos[j] <= hi_val:
                        t += 1
                        if is_rv[j]:
                            r += 1
                total[k] = t
                rvs[k] = r
            start = end
        return total, rvs

else:  # pragma: no cover
    follow_numba = follow_numpy
    window_counts_numba = window_counts_numpy


def follow(*args):
    if USE_NUMBA:
        return follow_numba(*args)
    return follow_numpy(*args)


def window_counts(pos, lane_of, is_rv, radius):
    if USE_NUMBA:
        return window_counts_numba(pos, lane_of, is_rv, radius)
    return window_counts_numpy(pos, lane_of, is_rv, radius)
