"""Interpretation tools: first-layer FIR analysis, activation-channel ordering
(correlation distance, average-linkage clustering, optimal leaf ordering),
LSTM sign normalisation and the 2-D decision-boundary-preserving projection."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


# ---------------------------------------------------------------------------
# filters


def dc_gain_db(taps) -> float:
    """``20 log10 |sum(taps)|``; ``-inf`` for a zero-sum kernel."""
    s = abs(float(np.sum(taps)))
    return 20 * math.log10(s) if s > 0 else -math.inf


def frequency_grid(n_freq: int, fs: float) -> np.ndarray:
    return np.linspace(0.0, fs / 2, n_freq)


def magnitude_response(taps, n_freq: int = 64, fs: float = 20.0) -> np.ndarray:
    """``|sum_k taps[k] exp(-2j pi f k / fs)|`` on a uniform grid over ``[0, fs/2]``."""
    taps = np.asarray(taps, dtype=np.float64)
    f = frequency_grid(n_freq, fs)
    k = np.arange(taps.size)
    return np.abs(np.exp(-2j * np.pi * np.outer(f, k) / fs) @ taps)


@dataclass
class FilterReport:
    dc_gain_db: np.ndarray  # [channels]
    freqs: np.ndarray  # [n_freq]
    magnitude_response: np.ndarray  # [channels, n_freq]


def filter_report(weights, n_freq: int = 64, fs: float = 20.0) -> FilterReport:
    kernels = weights["conv_1/kernel"][:, 0, :]
    return FilterReport(
        np.array([dc_gain_db(k) for k in kernels]),
        frequency_grid(n_freq, fs),
        np.stack([magnitude_response(k, n_freq, fs) for k in kernels]),
    )


def filters_csv(report: FilterReport) -> str:
    head = "channel,dc_gain_db," + ",".join(f"H@{f:.4g}Hz" for f in report.freqs)
    rows = [head]
    for ch, (g, resp) in enumerate(zip(report.dc_gain_db, report.magnitude_response)):
        gs = "-inf" if np.isneginf(g) else repr(float(g))
        rows.append(f"{ch},{gs}," + ",".join(repr(float(v)) for v in resp))
    return "\n".join(rows) + "\n"


# ---------------------------------------------------------------------------
# channel ordering


def channel_distance(a_i, a_j) -> float:
    """``1 - |corr(a_i, a_j)|`` over all time steps; constant rows are at distance 1 from others."""
    return float(distance_matrix(np.vstack([a_i, a_j]))[0, 1])


def distance_matrix(acts) -> np.ndarray:
    """Pairwise correlation distances between the rows of ``acts`` (``[channels, time]``)."""
    a = np.asarray(acts, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] < 2:
        raise ValueError("need a [channels, time] array with at least two time steps")
    c = a - a.mean(axis=1, keepdims=True)
    norm = np.sqrt(np.sum(c * c, axis=1))
    live = norm > 0
    safe = np.where(live, norm, 1.0)
    corr = (c @ c.T) / np.outer(safe, safe)
    d = 1.0 - np.clip(np.abs(corr), 0.0, 1.0)
    dead = ~live
    d[dead, :] = 1.0
    d[:, dead] = 1.0
    np.fill_diagonal(d, 0.0)
    return (d + d.T) / 2


def hac_average_linkage(dist) -> np.ndarray:
    """Average-linkage agglomerative clustering.

    Returns a scipy-style linkage matrix: row ``k`` merges clusters ``Z[k,0]``
    and ``Z[k,1]`` (smaller id first) at height ``Z[k,2]`` into cluster
    ``n + k`` of size ``Z[k,3]``. Equal heights are broken by the smallest id pair.
    """
    D = np.array(dist, dtype=np.float64)
    n = D.shape[0]
    if D.shape != (n, n) or n < 1:
        raise ValueError("distance matrix must be square")
    size = {i: 1 for i in range(n)}
    # cluster-to-cluster average distances, keyed by cluster id
    dd = {i: {j: D[i, j] for j in range(n) if j != i} for i in range(n)}
    Z = np.zeros((n - 1, 4))
    for k in range(n - 1):
        best = None
        for a in sorted(dd):
            for b in sorted(dd[a]):
                if b <= a:
                    continue
                key = (dd[a][b], a, b)
                if best is None or key < best:
                    best = key
        h, a, b = best
        new = n + k
        Z[k] = (a, b, h, size[a] + size[b])
        na, nb = size.pop(a), size.pop(b)
        row_a, row_b = dd.pop(a), dd.pop(b)
        dd[new] = {}
        for c in dd:
            if c == new:
                continue
            v = (na * row_a[c] + nb * row_b[c]) / (na + nb)
            dd[new][c] = v
            dd[c][new] = v
            dd[c].pop(a, None)
            dd[c].pop(b, None)
        size[new] = na + nb
    return Z


def linkage_leaf_order(Z) -> list[int]:
    """Left-to-right leaf order of the tree as built (left child first)."""
    n = Z.shape[0] + 1

    def leaves(c):
        if c < n:
            return [c]
        a, b = int(Z[c - n, 0]), int(Z[c - n, 1])
        return leaves(a) + leaves(b)

    return leaves(2 * n - 2) if n > 1 else [0]


def order_cost(order, dist) -> float:
    D = np.asarray(dist)
    return float(sum(D[order[i], order[i + 1]] for i in range(len(order) - 1)))


@dataclass
class ChannelOrdering:
    layer_name: str
    permutation: list
    linkage: np.ndarray
    cost: float


def optimal_leaf_order(Z, dist, layer_name: str = "") -> ChannelOrdering:
    """Leaf order consistent with tree ``Z`` minimising the summed distance of neighbours.

    Dynamic programme over subtrees: for each node, the cheapest ordering of its
    leaves that starts at leaf ``i`` and ends at leaf ``j``.
    """
    D = np.asarray(dist, dtype=np.float64)
    n = D.shape[0]
    if n == 1:
        return ChannelOrdering(layer_name, [0], Z, 0.0)
    leaves = {i: np.array([i]) for i in range(n)}
    cost = {i: np.zeros((1, 1)) for i in range(n)}
    back = {}
    children = {}
    for k, row in enumerate(np.asarray(Z)):
        a, b = int(row[0]), int(row[1])
        v = n + k
        children[v] = (a, b)
        A, B = leaves[a], leaves[b]
        Ma, Mb = cost[a], cost[b]
        DAB = D[np.ix_(A, B)]
        # T[i, m] = min_k Ma[i, k] + D[k, m]
        t3 = Ma[:, :, None] + DAB[None, :, :]
        k_arg = t3.argmin(axis=1)
        T = np.take_along_axis(t3, k_arg[:, None, :], axis=1)[:, 0, :]
        # M[i, j] = min_m T[i, m] + Mb[m, j]
        u3 = T[:, :, None] + Mb[None, :, :]
        m_arg = u3.argmin(axis=1)
        M = np.take_along_axis(u3, m_arg[:, None, :], axis=1)[:, 0, :]
        na, nb = A.size, B.size
        full = np.full((na + nb, na + nb), np.inf)
        full[:na, na:] = M
        full[na:, :na] = M.T
        leaves[v] = np.concatenate([A, B])
        cost[v] = full
        back[v] = (k_arg, m_arg)

    root = n + len(Z) - 1
    i, j = np.unravel_index(np.argmin(cost[root]), cost[root].shape)

    def build(v, i, j):
        # i, j are positions within leaves[v]
        if v < n:
            return [v]
        a, b = children[v]
        na = leaves[a].size
        if i >= na:
            return build(v, j, i)[::-1]
        k_arg, m_arg = back[v]
        jb = j - na
        m = m_arg[i, jb]
        k = k_arg[i, m]
        return build(a, i, k) + build(b, m, jb)

    perm = [int(x) for x in build(root, i, j)]
    return ChannelOrdering(layer_name, perm, np.asarray(Z), order_cost(perm, D))


def order_channels(acts, layer_name: str = "") -> ChannelOrdering:
    """Correlation distance, average linkage and optimal leaf ordering for one layer's trace."""
    D = distance_matrix(acts)
    return optimal_leaf_order(hac_average_linkage(D), D, layer_name)


def ordering_csv(ordering: ChannelOrdering) -> str:
    return "rank,channel\n" + "".join(f"{r},{c}\n" for r, c in enumerate(ordering.permutation))


def normalize_lstm_signs(trace):
    """Negate channels (rows) whose mean over time is negative; returns ``(trace, flip_mask)``."""
    a = np.asarray(trace, dtype=np.float64)
    flip = a.mean(axis=1) < 0
    return np.where(flip[:, None], -a, a), flip


# ---------------------------------------------------------------------------
# embedding projection


@dataclass
class EmbeddingProjection:
    points: np.ndarray  # [n, 2]: (y0, y1)
    w_hat: np.ndarray
    b_hat: float
    pc_direction: np.ndarray

    @property
    def boundary(self) -> float:
        """The decision boundary is the line ``y0 = boundary``."""
        return 0.0


def project_embeddings(X, w, b) -> EmbeddingProjection:
    """Project hidden states onto (signed distance to the decision boundary, first PC of the rest).

    ``y0 = x . w/|w| + b/|w|`` and ``y1`` is the first principal-component score of
    the residuals ``x - (w/|w|) y0``. The PC direction's largest-magnitude
    loading is made positive.
    """
    X = np.asarray(X, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64).ravel()
    b = float(np.ravel(b)[0])
    if X.ndim != 2 or X.shape[0] < 2 or X.shape[1] != w.size:
        raise ValueError("X must be [n >= 2, h] with h matching w")
    norm = np.linalg.norm(w)
    if norm == 0:
        raise ValueError("classifier weight vector is zero")
    w_hat = w / norm
    b_hat = b / norm
    y0 = X @ w_hat + b_hat
    R = X - np.outer(y0, w_hat)
    Rc = R - R.mean(axis=0)
    _, s, vt = np.linalg.svd(Rc, full_matrices=False)
    if s.size == 0 or s[0] <= 1e-12 * max(1.0, np.abs(X).max()):
        direction = np.zeros(w.size)
        y1 = np.zeros(X.shape[0])
    else:
        direction = vt[0]
        if direction[np.argmax(np.abs(direction))] < 0:
            direction = -direction
        y1 = Rc @ direction
    return EmbeddingProjection(np.column_stack([y0, y1]), w_hat, b_hat, direction)


def subsample_for_display(points, stride: int = 15):
    """Every ``stride``-th point, starting with the first."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return points[::stride]


def embedding_csv(times, projection: EmbeddingProjection, truth, probs) -> str:
    rows = ["t_s,y0,y1,truth_label,prob"]
    for t, (y0, y1), y, p in zip(np.asarray(times, float).tolist(), projection.points.tolist(), truth, np.asarray(probs, float).tolist()):
        rows.append(f"{t!r},{y0!r},{y1!r},{int(y)},{p!r}")
    return "\n".join(rows) + "\n"
