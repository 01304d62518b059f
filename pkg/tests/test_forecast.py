import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import chain_doc, fan_in_doc
from mixtraffic import forecast as fc
from mixtraffic.forecast import COUNT, RATE
from mixtraffic.network import load_network, predecessors
from oracles import normal_equations, scalar_ar1


def _series(graph, T, rng):
    X = np.empty((T, len(graph.ids), 2))
    X[..., COUNT] = rng.uniform(0, 10, (T, len(graph.ids)))
    X[..., RATE] = rng.uniform(0, 1, (T, len(graph.ids)))
    return X


def _manual_model(graph, alpha, intercept):
    """Model with the same (alpha, c) for both features."""
    regs = {s: tuple(predecessors(graph, s)) for s in graph.ids}
    return fc.PropagationModel(
        ids=graph.ids,
        regressors=regs,
        alpha={s: np.tile(np.asarray(alpha.get(s, [0.0] * len(regs[s])), float), (2, 1))
               for s in graph.ids},
        intercept={s: np.full(2, float(intercept.get(s, 0.0))) for s in graph.ids},
        graph_digest=graph.digest,
        series_length=0,
    )


# -------------------------------------------------------------------- fit


def test_fit_identity_chain(chain2):
    rng = np.random.default_rng(0)
    X = _series(chain2, 40, rng)
    X[1:, 1] = X[:-1, 0]
    m = fc.fit(chain2, X)
    np.testing.assert_allclose(m.alpha["s1"], [[1.0], [1.0]], atol=1e-9)
    np.testing.assert_allclose(m.intercept["s1"], [0.0, 0.0], atol=1e-9)


def test_fit_affine_chain(chain2):
    rng = np.random.default_rng(1)
    X = _series(chain2, 40, rng)
    X[1:, 1] = 0.5 * X[:-1, 0] + 3
    m = fc.fit(chain2, X)
    np.testing.assert_allclose(m.alpha["s1"], [[0.5], [0.5]], atol=1e-9)
    np.testing.assert_allclose(m.intercept["s1"], [3.0, 3.0], atol=1e-9)


@pytest.mark.parametrize("k", [1, 3, 6])
def test_fit_matches_normal_equations(k):
    g = load_network(fan_in_doc(k))
    rng = np.random.default_rng(k)
    X = _series(g, 50, rng)
    m = fc.fit(g, X)
    cols = [g.index[p] for p in predecessors(g, "out")]
    for f in range(2):
        A = np.column_stack([X[:-1, cols, f], np.ones(49)])
        sol = normal_equations(A, X[1:, g.index["out"], f])
        np.testing.assert_allclose(m.alpha["out"][f], sol[:-1], atol=1e-9)
        assert abs(m.intercept["out"][f] - sol[-1]) <= 1e-9


def test_fit_concatenates_runs_without_crossing(chain2):
    rng = np.random.default_rng(2)
    runs = [_series(chain2, 20, rng) for _ in range(3)]
    for r in runs:
        r[1:, 1] = 2 * r[:-1, 0] - 1
    # breaking the relation across run boundaries must not matter
    m = fc.fit(chain2, runs)
    np.testing.assert_allclose(m.alpha["s1"][COUNT], [2.0], atol=1e-9)
    assert m.series_length == 60


def test_fit_rank_deficient_is_min_norm(chain2):
    X = np.ones((10, 2, 2))  # constant regressor duplicates the intercept column
    m = fc.fit(chain2, X)
    # min-norm solution of a + c = 1 is a = c = 0.5
    np.testing.assert_allclose(m.alpha["s1"][:, 0], [0.5, 0.5], atol=1e-12)
    np.testing.assert_allclose(m.intercept["s1"], [0.5, 0.5], atol=1e-12)


def test_fit_errors(chain2, grid4):
    with pytest.raises(fc.ForecastError, match="too short"):
        fc.fit(chain2, np.zeros((2, 2, 2)))
    with pytest.raises(fc.ForecastError):
        fc.fit(grid4, np.zeros((50, 3, 2)))
    with pytest.raises(fc.ForecastError):
        fc.fit(chain2, np.zeros((50, 2)))


def test_self_lag_adds_own_series(grid4):
    rng = np.random.default_rng(5)
    m = fc.fit(grid4, _series(grid4, 30, rng), self_lag=True)
    for s in grid4.ids:
        assert s in m.regressors[s]
        assert m.alpha[s].shape == (2, len(predecessors(grid4, s)) + 1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_exact_linear_process_reproduced(seed):
    g = load_network(fan_in_doc(3))
    rng = np.random.default_rng(seed)
    X = _series(g, 30, rng)
    w = rng.uniform(-1, 1, 3)
    c = rng.uniform(-1, 1)
    cols = [g.index[p] for p in predecessors(g, "out")]
    X[1:, g.index["out"], COUNT] = X[:-1, cols, COUNT] @ w + c + 20  # keep counts positive
    m = fc.fit(g, X)
    pred = fc._propagate(m, X[:-1])
    np.testing.assert_allclose(pred[:, g.index["out"], COUNT], X[1:, g.index["out"], COUNT], atol=1e-9)


# ---------------------------------------------------------------- predict


def test_predict_one_identity(chain2):
    m = _manual_model(chain2, {"s1": [1.0]}, {})
    X = np.array([[5.0, 0.3], [0.0, 0.0]])
    np.testing.assert_allclose(fc.predict_one(m, X)[1], [5.0, 0.3])


def test_predict_one_average_of_two():
    g = load_network(fan_in_doc(2))
    m = _manual_model(g, {"out": [0.5, 0.5]}, {})
    X = np.zeros((3, 2))
    X[g.index["in0"], RATE] = 0.2
    X[g.index["in1"], RATE] = 0.6
    assert fc.predict_one(m, X)[g.index["out"], RATE] == pytest.approx(0.4)


def test_predict_one_clamps(chain2):
    m = _manual_model(chain2, {"s1": [2.0]}, {})
    X = np.array([[1.0, 0.8], [0.0, 0.0]])
    Y = fc.predict_one(m, X)
    assert Y[1, RATE] == 1.0
    assert m.clamp_events == 1
    with pytest.raises(fc.ForecastError):
        fc.predict_one(m, np.zeros((3, 2)))


def test_predict_multi_hand_composition():
    g = load_network(chain_doc(4))
    m = _manual_model(g, {"s1": [0.5], "s2": [0.5], "s3": [0.5]}, {})
    X = np.zeros((4, 2))
    X[0, COUNT] = 8.0
    out = fc.predict_multi(m, X, 3)
    assert [out[k, k + 1, COUNT] for k in range(3)] == [4.0, 2.0, 1.0]
    # with intercept 3 on every segment: s1 = 0.5*8+3 = 7, s2 = 0.5*7+3 = 6.5, s3 = 0.5*6.5+3
    m3 = _manual_model(g, {"s1": [0.5], "s2": [0.5], "s3": [0.5]}, {s: 3.0 for s in g.ids})
    out = fc.predict_multi(m3, X, 3)
    assert out[0, 1, COUNT] == 7.0
    assert out[1, 2, COUNT] == 6.5
    assert out[2, 3, COUNT] == 6.25


def test_predict_multi_h1_and_identity(chain2):
    m = _manual_model(chain2, {"s1": [1.0]}, {"s0": 0.0})
    m.alpha["s0"] = np.zeros((2, 0))
    X = np.array([[3.0, 0.5], [3.0, 0.5]])
    np.testing.assert_array_equal(fc.predict_multi(m, X, 1)[0], fc.predict_one(m, X))
    ident = fc.PropagationModel(chain2.ids, {"s0": ("s0",), "s1": ("s1",)},
                                {s: np.ones((2, 1)) for s in chain2.ids},
                                {s: np.zeros(2) for s in chain2.ids}, chain2.digest, 0)
    out = fc.predict_multi(ident, X, 7)
    assert all(np.array_equal(o, X) for o in out)
    with pytest.raises(fc.ForecastError):
        fc.predict_multi(m, X, 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 6), st.integers(1, 6))
def test_predict_multi_composes(seed, k1, k2):
    g = load_network(chain_doc(4))
    rng = np.random.default_rng(seed)
    m = fc.fit(g, _series(g, 40, rng))
    X = _series(g, 1, rng)[0]
    direct = fc.predict_multi(m, X, k1 + k2)[-1]
    first = fc.predict_multi(m, X, k1)[-1]
    np.testing.assert_allclose(direct, fc.predict_multi(m, first, k2)[-1], atol=1e-12)


def test_clamp_at_one_is_absorbing(chain2):
    m = _manual_model(chain2, {"s1": [1.5]}, {"s1": 0.1})
    m.alpha["s0"] = np.zeros((2, 0))
    m.intercept["s0"] = np.array([0.0, 1.0])
    X = np.array([[0.0, 1.0], [0.0, 1.0]])
    out = fc.predict_multi(m, X, 10)
    assert np.all(out[:, 1, RATE] == 1.0)


def test_predict_batched_matches_rows(chain2):
    rng = np.random.default_rng(3)
    m = fc.fit(chain2, _series(chain2, 30, rng))
    B = _series(chain2, 5, rng)
    batched = fc.predict_multi(m, B, 4)
    for i in range(5):
        np.testing.assert_allclose(batched[:, i], fc.predict_multi(m, B[i], 4))


def test_model_json_roundtrip(grid4):
    rng = np.random.default_rng(4)
    m = fc.fit(grid4, _series(grid4, 30, rng), self_lag=True, window=10)
    back = fc.PropagationModel.from_json(m.to_json())
    assert back.window == 10 and back.self_lag
    X = _series(grid4, 1, rng)[0]
    np.testing.assert_allclose(fc.predict_multi(back, X, 5), fc.predict_multi(m, X, 5))
    back.check_graph(grid4)
    with pytest.raises(fc.ForecastError):
        back.check_graph(load_network(chain_doc(2)))


# --------------------------------------------------------------- baselines


def test_const_baseline():
    X = np.arange(6.0).reshape(3, 2)
    assert fc.const_baseline(X, 1).shape == (1, 3, 2)
    out = fc.const_baseline(X, 100)
    assert out.shape == (100, 3, 2) and all(np.array_equal(o, X) for o in out)
    truth = X + np.arange(1, 101)[:, None, None]
    assert fc.error_metrics(truth, out).mae > 0


def test_ar_constant_series():
    X = np.full((20, 1, 2), 0.4)
    m = fc.ar_baseline_fit(X)
    assert np.allclose(m.a * 0.4 + m.b, 0.4)
    np.testing.assert_allclose(fc.ar_baseline_predict(m, X[0], 5), np.full((5, 1, 2), 0.4))


def test_ar_geometric_series():
    x = 0.9 ** np.arange(30)
    X = np.stack([x, x], axis=-1)[:, None, :]
    m = fc.ar_baseline_fit(X)
    np.testing.assert_allclose(m.a, 0.9, atol=1e-9)
    np.testing.assert_allclose(m.b, 0.0, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_ar_matches_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 1, (40, 3, 2))
    m = fc.ar_baseline_fit(X)
    for e in range(3):
        for f in range(2):
            a, b = scalar_ar1(X[:, e, f])
            assert abs(m.a[e, f] - a) <= 1e-9 and abs(m.b[e, f] - b) <= 1e-9


def test_ar_too_short():
    with pytest.raises(fc.ForecastError):
        fc.ar_baseline_fit(np.zeros((2, 1, 2)))


# ----------------------------------------------------------------- metrics


def test_metrics_examples():
    assert fc.error_metrics([1, 2], [1, 2]) == fc.ErrorMetrics(0.0, 0.0, 0.0, 2)
    m = fc.error_metrics([1, 2], [1, 3])
    assert m.mae == 0.5 and m.rmse == pytest.approx(np.sqrt(0.5)) and m.mape == 0.25
    assert fc.error_metrics([0, 2], [1, 2]).mape == 0.0


def test_metrics_errors():
    with pytest.raises(fc.ForecastError):
        fc.error_metrics([1, 2], [1])
    with pytest.raises(fc.ForecastError):
        fc.error_metrics([0, 0], [1, 2])
    with pytest.raises(fc.ForecastError):
        fc.error_metrics([], [])


@given(st.lists(st.tuples(st.floats(-1e3, 1e3, allow_subnormal=False),
                          st.floats(-1e3, 1e3, allow_subnormal=False)), min_size=1))
def test_rmse_at_least_mae(pairs):
    y = [p[0] for p in pairs]
    if not any(y):
        return
    m = fc.error_metrics(y, [p[1] for p in pairs])
    assert m.rmse >= m.mae >= 0 and m.n == len(pairs)


def test_window_series_and_pairs():
    X = np.arange(20.0).reshape(10, 1, 2)
    W = fc.window_series(X, 3)
    assert W.shape == (3, 1, 2)
    np.testing.assert_allclose(W[0, 0], X[:3, 0].mean(axis=0))
    o, t = fc.horizon_pairs([X], 4, stride=2)
    assert o.shape[0] == 3
    np.testing.assert_array_equal(t, X[[4, 6, 8]])
    with pytest.raises(fc.ForecastError):
        fc.horizon_pairs([X], 10)


def test_drifting_propagation_beats_const():
    """A chain fed by a drifting source: CONST is biased at every horizon,
    propagation is exact wherever the source lies within the horizon."""
    n = 12
    g = load_network(chain_doc(n))
    T = 300
    X = np.zeros((T, n, 2))
    t = np.arange(T)
    src = np.stack([5 + 0.02 * t, 0.3 + 0.001 * t], axis=-1)
    for k in range(n):
        X[:, g.index[f"s{k}"]] = src[np.maximum(t - k, 0)]
    m = fc.fit(g, X[:200])
    for h in (1, 5, 10):
        deep = [g.index[f"s{k}"] for k in range(h + 1, n)]
        o, y = fc.horizon_pairs([X[200:]], h)
        prop = fc.error_metrics(y[:, deep], fc.predict_multi(m, o, h)[-1][:, deep])
        const = fc.error_metrics(y[:, deep], fc.const_baseline(o, h)[-1][:, deep])
        assert prop.mae < 1e-6 < const.mae
