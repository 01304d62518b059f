"""Graph-propagation flow forecasting and its baselines.

Each segment's next-step feature value is a linear combination of its
predecessors' current values plus an intercept, fitted by least squares per
(segment, feature). Multi-step forecasts compose the one-step model.
Series are arrays shaped (T, |E|, F) with features [vehicle_count, rv_rate]
and rows in sorted segment-id order.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .network import NetworkGraph, predecessors

log = logging.getLogger(__name__)

FEATURES = ("vehicle_count", "rv_rate")
COUNT, RATE = 0, 1
MODEL_FORMAT = 1


class ForecastError(ValueError):
    pass


@dataclass
class PropagationModel:
    ids: tuple[str, ...]
    regressors: dict[str, tuple[str, ...]]
    alpha: dict[str, np.ndarray]  # segment -> (F, k) coefficients over regressors
    intercept: dict[str, np.ndarray]  # segment -> (F,)
    graph_digest: str
    series_length: int
    self_lag: bool = False
    window: int = 1  # ticks averaged into one forecasting step
    clamp_events: int = 0
    _dense: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False)

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        """(F, E, E) propagation matrices and (F, E) intercepts."""
        if self._dense is None:
            idx = {s: i for i, s in enumerate(self.ids)}
            E, F = len(self.ids), len(FEATURES)
            M = np.zeros((F, E, E))
            c = np.zeros((F, E))
            for s, regs in self.regressors.items():
                i = idx[s]
                for k, r in enumerate(regs):
                    M[:, i, idx[r]] += self.alpha[s][:, k]
                c[:, i] = self.intercept[s]
            self._dense = (M, c)
        return self._dense

    def check_graph(self, graph: NetworkGraph) -> None:
        if graph.digest != self.graph_digest:
            raise ForecastError("model was fitted on a different network")

    def to_json(self) -> str:
        doc = {
            "format": MODEL_FORMAT,
            "graph_hash": self.graph_digest,
            "series_length": self.series_length,
            "self_lag": self.self_lag,
            "window": self.window,
            "segments": {
                s: {
                    "regressors": list(self.regressors[s]),
                    **{
                        f: {"alpha": self.alpha[s][fi].tolist(), "c": float(self.intercept[s][fi])}
                        for fi, f in enumerate(FEATURES)
                    },
                }
                for s in self.ids
            },
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "PropagationModel":
        doc = json.loads(text)
        if doc.get("format") != MODEL_FORMAT:
            raise ForecastError(f"unsupported model format {doc.get('format')!r}")
        segs = doc["segments"]
        ids = tuple(sorted(segs))
        return cls(
            ids=ids,
            regressors={s: tuple(segs[s]["regressors"]) for s in ids},
            alpha={s: np.array([segs[s][f]["alpha"] for f in FEATURES], dtype=float).reshape(len(FEATURES), -1) for s in ids},
            intercept={s: np.array([segs[s][f]["c"] for f in FEATURES], dtype=float) for s in ids},
            graph_digest=doc["graph_hash"],
            series_length=int(doc["series_length"]),
            self_lag=bool(doc.get("self_lag", False)),
            window=int(doc.get("window", 1)),
        )


def _as_runs(series) -> list[np.ndarray]:
    if isinstance(series, np.ndarray):
        series = [series]
    runs = [np.asarray(r, dtype=float) for r in series]
    for r in runs:
        if r.ndim != 3 or r.shape[2] != len(FEATURES):
            raise ForecastError(f"series must be shaped (T, |E|, {len(FEATURES)}), got {r.shape}")
    return runs


def regressors_for(graph: NetworkGraph, segment: str, self_lag: bool = False) -> tuple[str, ...]:
    regs = predecessors(graph, segment)
    if self_lag and segment not in regs:
        regs = sorted(regs + [segment])
    return tuple(regs)


def fit(graph: NetworkGraph, series, self_lag: bool = False, window: int = 1) -> PropagationModel:
    """Least-squares fit of every (segment, feature) propagation equation.

    ``series`` is one (T, |E|, F) array or a list of runs; transitions never
    cross run boundaries. Rank-deficient systems get the minimum-norm
    solution. ``window`` only records how the series were aggregated.
    """
    runs = _as_runs(series)
    E = len(graph.ids)
    for r in runs:
        if r.shape[1] != E:
            raise ForecastError(f"series has {r.shape[1]} segments, graph has {E}")
    n_trans = sum(r.shape[0] - 1 for r in runs)
    idx = graph.index
    regressors: dict[str, tuple[str, ...]] = {}
    alpha: dict[str, np.ndarray] = {}
    intercept: dict[str, np.ndarray] = {}
    for s in graph.ids:
        regs = regressors_for(graph, s, self_lag)
        if n_trans < len(regs) + 1:
            raise ForecastError(
                f"series too short for segment {s!r}: {n_trans + 1} steps, need {len(regs) + 2}"
            )
        cols = [idx[r] for r in regs]
        a = np.zeros((len(FEATURES), len(regs)))
        c = np.zeros(len(FEATURES))
        for f in range(len(FEATURES)):
            A = np.concatenate(
                [np.column_stack([r[:-1, cols, f], np.ones(r.shape[0] - 1)]) for r in runs]
            )
            b = np.concatenate([r[1:, idx[s], f] for r in runs])
            sol = np.linalg.lstsq(A, b, rcond=None)[0]
            a[f] = sol[:-1]
            c[f] = sol[-1]
        regressors[s] = regs
        alpha[s] = a
        intercept[s] = c
    return PropagationModel(
        ids=tuple(graph.ids),
        regressors=regressors,
        alpha=alpha,
        intercept=intercept,
        graph_digest=graph.digest,
        series_length=n_trans + len(runs),
        self_lag=self_lag,
        window=window,
    )


def _clamp(X: np.ndarray) -> tuple[np.ndarray, int]:
    count = X[..., COUNT]
    rate = X[..., RATE]
    n = int(np.count_nonzero(count < 0) + np.count_nonzero((rate < 0) | (rate > 1)))
    if n:
        X = X.copy()
        X[..., COUNT] = np.maximum(count, 0.0)
        X[..., RATE] = np.clip(rate, 0.0, 1.0)
    return X, n


def _propagate(model: PropagationModel, X: np.ndarray) -> np.ndarray:
    """One unclamped step; X is (..., E, F)."""
    M, c = model.dense()
    out = np.empty_like(X)
    for f in range(len(FEATURES)):
        out[..., f] = X[..., f] @ M[f].T + c[f]
    return out


def predict_one(model: PropagationModel, X: np.ndarray) -> np.ndarray:
    """Next-step forecast with outputs clamped to their valid ranges."""
    X = np.asarray(X, dtype=float)
    if X.shape[-2:] != (len(model.ids), len(FEATURES)):
        raise ForecastError(f"expected (..., {len(model.ids)}, {len(FEATURES)}), got {X.shape}")
    Y, n = _clamp(_propagate(model, X))
    if n:
        model.clamp_events += n
        log.debug("clamped %d forecast values", n)
    return Y


def predict_multi(model: PropagationModel, X: np.ndarray, horizon: int) -> np.ndarray:
    """Forecasts 1..horizon steps ahead, shaped (horizon, ..., E, F)."""
    if horizon < 1:
        raise ForecastError("horizon must be >= 1")
    out = []
    cur = np.asarray(X, dtype=float)
    for _ in range(horizon):
        cur = predict_one(model, cur)
        out.append(cur)
    return np.stack(out)


def const_baseline(X: np.ndarray, horizon: int) -> np.ndarray:
    if horizon < 1:
        raise ForecastError("horizon must be >= 1")
    X = np.asarray(X, dtype=float)
    return np.repeat(X[None], horizon, axis=0)


@dataclass
class ARModel:
    """Per-series x[t+1] = a * x[t] + b, blind to the graph."""

    a: np.ndarray  # (E, F)
    b: np.ndarray  # (E, F)


def ar_baseline_fit(series) -> ARModel:
    runs = _as_runs(series)
    E = runs[0].shape[1]
    if sum(r.shape[0] - 1 for r in runs) < 2:
        raise ForecastError("series too short for an AR(1) fit")
    a = np.zeros((E, len(FEATURES)))
    b = np.zeros((E, len(FEATURES)))
    for e in range(E):
        for f in range(len(FEATURES)):
            A = np.concatenate([np.column_stack([r[:-1, e, f], np.ones(r.shape[0] - 1)]) for r in runs])
            y = np.concatenate([r[1:, e, f] for r in runs])
            a[e, f], b[e, f] = np.linalg.lstsq(A, y, rcond=None)[0]
    return ARModel(a, b)


def ar_baseline_predict(model: ARModel, X: np.ndarray, horizon: int) -> np.ndarray:
    if horizon < 1:
        raise ForecastError("horizon must be >= 1")
    out = []
    cur = np.asarray(X, dtype=float)
    for _ in range(horizon):
        cur, _ = _clamp(model.a * cur + model.b)
        out.append(cur)
    return np.stack(out)


@dataclass(frozen=True)
class ErrorMetrics:
    mae: float
    rmse: float
    mape: float
    n: int


def error_metrics(truth, prediction) -> ErrorMetrics:
    """MAE, RMSE and MAPE; MAPE skips entries whose true value is zero."""
    y = np.asarray(truth, dtype=float).ravel()
    yh = np.asarray(prediction, dtype=float).ravel()
    if y.shape != yh.shape:
        raise ForecastError(f"length mismatch: {y.size} vs {yh.size}")
    if y.size == 0:
        raise ForecastError("no values to evaluate")
    err = y - yh
    nz = y != 0
    if not nz.any():
        raise ForecastError("MAPE undefined: every true value is zero")
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err**2)))
    mape = float(np.mean(np.abs(err[nz] / y[nz])))
    return ErrorMetrics(mae, max(rmse, mae), mape, int(y.size))


def window_series(series: np.ndarray, window: int) -> np.ndarray:
    """Average consecutive non-overlapping windows of ``window`` ticks."""
    if window <= 1:
        return series
    T = (series.shape[0] // window) * window
    return series[:T].reshape(T // window, window, *series.shape[1:]).mean(axis=1)


def horizon_pairs(runs: Sequence[np.ndarray], horizon: int, stride: int = 1):
    """Stack (origin, h-steps-later) pairs over all runs."""
    origins, targets = [], []
    for r in runs:
        if r.shape[0] <= horizon:
            raise ForecastError(f"horizon {horizon} exceeds series length {r.shape[0]}")
        t = np.arange(0, r.shape[0] - horizon, stride)
        origins.append(r[t])
        targets.append(r[t + horizon])
    return np.concatenate(origins), np.concatenate(targets)
