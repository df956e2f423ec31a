import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ppgrhythm.interpret import (
    channel_distance,
    dc_gain_db,
    distance_matrix,
    filter_report,
    filters_csv,
    hac_average_linkage,
    linkage_leaf_order,
    magnitude_response,
    normalize_lstm_signs,
    optimal_leaf_order,
    order_channels,
    order_cost,
    project_embeddings,
    subsample_for_display,
)
from ppgrhythm.model import ModelSpec, dense_sigmoid, init_weights

from oracles import brute_force_olo, residual_top_eigenvalue, tree_orders, two_pass_corr


# --- filters ------------------------------------------------------------------


def test_dc_gain_examples():
    assert dc_gain_db([0.25, 0.25, 0.25, 0.25]) == 0.0
    assert dc_gain_db([1.0, -1.0]) == -np.inf
    assert abs(dc_gain_db([0.01, 0.00412]) - (-37.0)) <= 0.05


def test_magnitude_response_examples():
    np.testing.assert_allclose(magnitude_response([1.0], 16, 20.0), 1.0)
    h = magnitude_response([1.0, -1.0], 11, 20.0)
    assert abs(h[0]) < 1e-15 and abs(h[-1] - 2.0) < 1e-12


@given(st.lists(st.floats(-2, 2), min_size=1, max_size=12))
def test_dc_consistency(taps):
    h0 = magnitude_response(taps, 8, 20.0)[0]
    g = dc_gain_db(taps)
    if np.isneginf(g):
        assert h0 < 1e-12
    else:
        assert abs(h0 - 10 ** (g / 20)) <= 1e-9 * max(1.0, h0)


def test_filter_report_and_csv():
    w = init_weights(ModelSpec(), 0)
    w.tensors["conv_1/kernel"][0, 0, :] = 0.0
    w.tensors["conv_1/kernel"][0, 0, :2] = [1.0, -1.0]
    rep = filter_report(w, n_freq=32)
    assert rep.magnitude_response.shape == (12, 32)
    assert np.all(rep.magnitude_response >= 0)
    ks = w["conv_1/kernel"][:, 0, :]
    np.testing.assert_array_equal(rep.dc_gain_db[1:], [20 * math.log10(abs(float(k.sum()))) for k in ks[1:]])
    lines = filters_csv(rep).splitlines()
    assert lines[0].startswith("channel,dc_gain_db,")
    assert lines[1].startswith("0,-inf,")


# --- distances and clustering -------------------------------------------------


def test_channel_distance_examples():
    a = np.random.default_rng(0).normal(size=50)
    assert channel_distance(a, 2 * a + 3) == pytest.approx(0.0, abs=1e-12)
    assert channel_distance(a, -a) == pytest.approx(0.0, abs=1e-12)
    rng = np.random.default_rng(42)
    u, v = rng.normal(size=1000), rng.normal(size=1000)
    assert abs(channel_distance(u, v) - (1 - abs(two_pass_corr(u.tolist(), v.tolist())))) <= 1e-12


def test_constant_rows_at_distance_one():
    acts = np.vstack([np.ones(20), np.arange(20.0), np.zeros(20)])
    D = distance_matrix(acts)
    assert D[0, 1] == 1.0 and D[0, 2] == 1.0 and D[2, 1] == 1.0
    assert np.all(np.diag(D) == 0)


@settings(max_examples=30)
@given(st.integers(2, 8), st.integers(0, 10_000))
def test_distance_matrix_properties(n, seed):
    acts = np.random.default_rng(seed).normal(size=(n, 30))
    D = distance_matrix(acts)
    assert np.allclose(D, D.T) and np.all(D >= 0) and np.all(D <= 1)
    assert np.all(np.diag(D) == 0)


def test_hac_two_and_three():
    Z = hac_average_linkage(np.array([[0, 0.3], [0.3, 0]]))
    np.testing.assert_array_equal(Z, [[0, 1, 0.3, 2]])
    D = np.array([[0, 0.1, 0.6], [0.1, 0, 0.8], [0.6, 0.8, 0]])
    Z = hac_average_linkage(D)
    assert tuple(Z[0, :2]) == (0, 1) and Z[0, 2] == 0.1
    assert Z[1, 2] == pytest.approx(0.7)  # average of 0.6 and 0.8


def test_hac_tie_break_smallest_pair():
    D = np.full((4, 4), 0.5)
    np.fill_diagonal(D, 0)
    Z = hac_average_linkage(D)
    assert tuple(Z[0, :2]) == (0, 1)


@pytest.mark.parametrize("seed", range(5))
def test_hac_matches_scipy(seed):
    hierarchy = pytest.importorskip("scipy.cluster.hierarchy")
    from scipy.spatial.distance import squareform

    acts = np.random.default_rng(seed).normal(size=(6, 40))
    D = distance_matrix(acts)
    ours = hac_average_linkage(D)
    ref = hierarchy.linkage(squareform(D, checks=False), method="average")
    np.testing.assert_allclose(ours[:, 2], ref[:, 2], atol=1e-12)
    assert np.all(np.diff(ours[:, 2]) >= -1e-12)
    assert sorted(map(tuple, ours[:, :2].astype(int))) == sorted(map(tuple, np.sort(ref[:, :2], 1).astype(int)))


# --- optimal leaf ordering ------------------------------------------------------


def test_olo_two_leaves():
    D = np.array([[0, 0.4], [0.4, 0]])
    o = optimal_leaf_order(hac_average_linkage(D), D)
    assert sorted(o.permutation) == [0, 1] and o.cost == 0.4


@pytest.mark.parametrize("seed", range(10))
def test_olo_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 9))
    D = distance_matrix(rng.normal(size=(n, 25)))
    Z = hac_average_linkage(D)
    o = optimal_leaf_order(Z, D)
    assert sorted(o.permutation) == list(range(n))
    assert o.permutation in tree_orders(Z)
    assert o.cost == pytest.approx(brute_force_olo(Z, D), abs=1e-12)
    assert o.cost <= order_cost(linkage_leaf_order(Z), D) + 1e-12


def test_order_channels_single_channel():
    o = order_channels(np.random.default_rng(0).normal(size=(1, 10)), "lstm")
    assert o.permutation == [0] and o.layer_name == "lstm"


# --- sign normalisation ---------------------------------------------------------


def test_normalize_signs():
    trace = np.array([[0.1, 0.5, 0.2], [-0.5, -0.1, -0.3]])
    out, flip = normalize_lstm_signs(trace)
    np.testing.assert_array_equal(out[0], trace[0])
    assert flip.tolist() == [False, True]
    assert out[1].mean() == pytest.approx(0.3)
    again, flip2 = normalize_lstm_signs(out)
    np.testing.assert_array_equal(again, out)
    assert not flip2.any()
    np.testing.assert_array_equal(np.abs(out), np.abs(trace))


# --- projection -----------------------------------------------------------------


def test_projection_unit_basis():
    X = np.random.default_rng(0).normal(size=(20, 5))
    proj = project_embeddings(X, np.eye(5)[0], 0.0)
    np.testing.assert_array_equal(proj.points[:, 0], X[:, 0])
    assert np.linalg.norm(proj.w_hat) == pytest.approx(1.0)


@pytest.mark.parametrize("seed", range(5))
def test_projection_boundary_and_variance(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(100, 8))
    w, b = rng.normal(size=8), rng.normal()
    proj = project_embeddings(X, w, b)
    np.testing.assert_array_equal(np.sign(proj.points[:, 0]), np.sign(X @ w + b))
    assert np.array_equal(proj.points[:, 0] > 0, dense_sigmoid(X, w, b) > 0.5)
    var = np.var(proj.points[:, 1], ddof=1)
    assert abs(var - residual_top_eigenvalue(X, w, b)) <= 1e-9
    d = proj.pc_direction
    assert d[np.argmax(np.abs(d))] > 0


def test_projection_degenerate():
    with pytest.raises(ValueError):
        project_embeddings(np.ones((4, 3)), np.zeros(3), 0.0)
    # every point on a line along w: no residual variance
    w = np.array([1.0, 2.0])
    X = np.outer(np.linspace(-1, 1, 7), w)
    proj = project_embeddings(X, w, 0.5)
    np.testing.assert_array_equal(proj.points[:, 1], 0.0)


def test_subsample_examples():
    pts = np.arange(300).reshape(150, 2)
    assert len(subsample_for_display(pts)) == 10
    np.testing.assert_array_equal(subsample_for_display(pts, 1), pts)
    assert subsample_for_display(np.arange(14)).tolist() == [0]
