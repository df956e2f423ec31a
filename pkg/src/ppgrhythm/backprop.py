"""Training-mode forward pass and exact reverse-mode gradients.

Training mode differs from inference in three ways: batch-norm uses batch
statistics, the LSTM starts from a supplied (random) state, and variational
dropout masks are applied to the LSTM input and recurrent connections.

Subgradient conventions: ReLU'(0) = 0; max-pool routes the gradient to the
first maximal element of each window.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import WeightStore, conv_windows, kernel_matrix, sigmoid


class TrainingError(RuntimeError):
    def __init__(self, msg, weights=None, history=None):
        super().__init__(msg)
        self.weights = weights
        self.history = history


@dataclass
class StochasticDraws:
    """Per-example randomness of one training step, fixed so the loss is a deterministic function."""

    c0: np.ndarray  # [B, H]
    h0: np.ndarray  # [B, H]
    mask_x: np.ndarray  # [B, F], entries 0 or 1/(1-rate)
    mask_h: np.ndarray  # [B, H]

    @classmethod
    def draw(cls, rng, batch, spec, dropout_rate=0.0, init_scale=0.1, dtype=np.float64):
        H, F = spec.lstm_hidden, spec.lstm_input
        c0 = rng.uniform(-init_scale, init_scale, (batch, H)).astype(dtype)
        h0 = rng.uniform(-init_scale, init_scale, (batch, H)).astype(dtype)
        keep = 1.0 - dropout_rate
        mx = (rng.random((batch, F)) < keep) / keep
        mh = (rng.random((batch, H)) < keep) / keep
        return cls(c0, h0, mx.astype(dtype), mh.astype(dtype))

    @classmethod
    def zeros(cls, batch, spec, dtype=np.float64):
        H, F = spec.lstm_hidden, spec.lstm_input
        return cls(
            np.zeros((batch, H), dtype), np.zeros((batch, H), dtype), np.ones((batch, F), dtype), np.ones((batch, H), dtype)
        )


def class_weight_vector(y, class_weights):
    w0, w1 = class_weights
    return np.where(y > 0.5, w1, w0)


def weighted_bce_logits(logits, y, class_weights):
    """Summed class-weighted binary cross-entropy computed from logits, with d/dlogits."""
    cw = class_weight_vector(y, class_weights)
    # log(1 + e^l) - y*l  ==  -y log p - (1-y) log(1-p)
    loss = np.sum(cw * (np.logaddexp(0, logits) - y * logits))
    dlogits = cw * (sigmoid(logits) - y)
    return loss, dlogits


def train_forward(weights: WeightStore, x, draws: StochasticDraws, bn_momentum=None):
    """Forward pass on ``[B, T]``; returns ``(logits [B, J], cache, batch_stats)``."""
    spec = weights.spec
    dtype = weights.dtype
    x = np.asarray(x, dtype=dtype)
    cache = {"blocks": []}
    z = x[:, :, None]
    batch_stats = {}
    for i, blk in enumerate(spec.conv_blocks, 1):
        K = blk.kernel_len
        d = (K - 1) // 2
        W = weights[f"conv_{i}/kernel"]
        zp = np.pad(z, ((0, 0), (d, d), (0, 0)))
        cols = conv_windows(zp, K)
        conv = cols @ kernel_matrix(W) + weights[f"conv_{i}/bias"]
        gamma, beta = weights[f"bn_{i}/gamma"], weights[f"bn_{i}/beta"]
        bc = {"cols": cols, "in_shape": z.shape, "K": K}
        if spec.block_order == "bn_relu":
            bn_out, bn_cache = _bn_train(conv, gamma, beta, spec.bn_eps)
            act = np.maximum(bn_out, 0)
            bc["relu_mask"] = bn_out > 0
        else:
            r = np.maximum(conv, 0)
            bc["relu_mask"] = conv > 0
            act, bn_cache = _bn_train(r, gamma, beta, spec.bn_eps)
        bc["bn"] = bn_cache
        batch_stats[i] = (bn_cache["mean"], bn_cache["var"])
        P = blk.pool_len
        B, L, C = act.shape
        n = L // P
        windows = act[:, : n * P].reshape(B, n, P, C)
        idx = windows.argmax(axis=2)
        z = np.take_along_axis(windows, idx[:, :, None, :], axis=2)[:, :, 0, :]
        bc.update(pool_idx=idx, pool_shape=(B, L, C), P=P)
        cache["blocks"].append(bc)

    H = spec.lstm_hidden
    Wx, Wh, b = weights["lstm/kernel"], weights["lstm/recurrent_kernel"], weights["lstm/bias"]
    zin = z * draws.mask_x[:, None, :]
    zx = zin @ Wx + b
    B, J, _ = zx.shape
    gates = np.empty((B, J, 4 * H), dtype=dtype)
    cs = np.empty((B, J + 1, H), dtype=dtype)
    hs = np.empty((B, J + 1, H), dtype=dtype)
    cs[:, 0], hs[:, 0] = draws.c0, draws.h0
    c, h = draws.c0, draws.h0
    for t in range(J):
        a = zx[:, t] + (h * draws.mask_h) @ Wh
        i_g = sigmoid(a[:, :H])
        f_g = sigmoid(a[:, H : 2 * H])
        g_g = np.tanh(a[:, 2 * H : 3 * H])
        o_g = sigmoid(a[:, 3 * H :])
        c = f_g * c + i_g * g_g
        h = o_g * np.tanh(c)
        gates[:, t, :H], gates[:, t, H : 2 * H] = i_g, f_g
        gates[:, t, 2 * H : 3 * H], gates[:, t, 3 * H :] = g_g, o_g
        cs[:, t + 1], hs[:, t + 1] = c, h
    logits = hs[:, 1:] @ weights["dense/kernel"] + weights["dense/bias"][0]
    cache.update(z=z, zin=zin, gates=gates, cs=cs, hs=hs, draws=draws)
    return logits, cache, batch_stats


def _bn_train(x, gamma, beta, eps):
    mean = x.mean(axis=(0, 1))
    var = x.var(axis=(0, 1))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv
    return xhat * gamma + beta, {"xhat": xhat, "inv": inv, "gamma": gamma, "mean": mean, "var": var}


def _bn_backward(dy, c):
    N = dy.shape[0] * dy.shape[1]
    xhat = c["xhat"]
    dgamma = np.sum(dy * xhat, axis=(0, 1))
    dbeta = dy.sum(axis=(0, 1))
    dx = (c["gamma"] * c["inv"] / N) * (N * dy - dbeta - xhat * dgamma)
    return dx, dgamma, dbeta


def train_backward(weights: WeightStore, cache, dlogits) -> dict:
    """Gradients of the loss w.r.t. every trainable tensor, given d loss / d logits."""
    spec = weights.spec
    H = spec.lstm_hidden
    grads = {}
    hs, cs, gates, draws = cache["hs"], cache["cs"], cache["gates"], cache["draws"]
    w_out = weights["dense/kernel"]
    grads["dense/kernel"] = np.einsum("bj,bjh->h", dlogits, hs[:, 1:])
    grads["dense/bias"] = np.array([dlogits.sum()], dtype=dlogits.dtype)

    Wh = weights["lstm/recurrent_kernel"]
    B, J, _ = gates.shape
    da_all = np.empty_like(gates)
    dh_next = np.zeros((B, H), dtype=gates.dtype)
    dc_next = np.zeros_like(dh_next)
    dh_dense = dlogits[:, :, None] * w_out
    for t in range(J - 1, -1, -1):
        i_g, f_g = gates[:, t, :H], gates[:, t, H : 2 * H]
        g_g, o_g = gates[:, t, 2 * H : 3 * H], gates[:, t, 3 * H :]
        c, c_prev = cs[:, t + 1], cs[:, t]
        tc = np.tanh(c)
        dh = dh_dense[:, t] + dh_next
        dc = dc_next + dh * o_g * (1 - tc * tc)
        da = da_all[:, t]
        da[:, :H] = dc * g_g * i_g * (1 - i_g)
        da[:, H : 2 * H] = dc * c_prev * f_g * (1 - f_g)
        da[:, 2 * H : 3 * H] = dc * i_g * (1 - g_g * g_g)
        da[:, 3 * H :] = dh * tc * o_g * (1 - o_g)
        dc_next = dc * f_g
        dh_next = (da @ Wh.T) * draws.mask_h
    hin = hs[:, :-1] * draws.mask_h[:, None, :]
    grads["lstm/recurrent_kernel"] = hin.reshape(-1, H).T @ da_all.reshape(-1, 4 * H)
    zin = cache["zin"]
    grads["lstm/kernel"] = zin.reshape(-1, zin.shape[-1]).T @ da_all.reshape(-1, 4 * H)
    grads["lstm/bias"] = da_all.sum(axis=(0, 1))
    dz = (da_all @ weights["lstm/kernel"].T) * draws.mask_x[:, None, :]

    for i in range(spec.n_blocks, 0, -1):
        bc = cache["blocks"][i - 1]
        B, L, C = bc["pool_shape"]
        P = bc["P"]
        n = L // P
        dwin = np.zeros((B, n, P, C), dtype=dz.dtype)
        np.put_along_axis(dwin, bc["pool_idx"][:, :, None, :], dz[:, :, None, :], axis=2)
        dact = np.zeros((B, L, C), dtype=dz.dtype)
        dact[:, : n * P] = dwin.reshape(B, n * P, C)
        if spec.block_order == "bn_relu":
            dbn = dact * bc["relu_mask"]
            dconv, dgamma, dbeta = _bn_backward(dbn, bc["bn"])
        else:
            dr, dgamma, dbeta = _bn_backward(dact, bc["bn"])
            dconv = dr * bc["relu_mask"]
        grads[f"bn_{i}/gamma"], grads[f"bn_{i}/beta"] = dgamma, dbeta
        grads[f"conv_{i}/bias"] = dconv.sum(axis=(0, 1))
        K = bc["K"]
        W = weights[f"conv_{i}/kernel"]
        cout, cin, _ = W.shape
        cols = bc["cols"]
        dkm = cols.reshape(-1, cin * K).T @ dconv.reshape(-1, cout)
        grads[f"conv_{i}/kernel"] = dkm.reshape(cin, K, cout).transpose(2, 0, 1)
        if i > 1:
            dcols = (dconv @ kernel_matrix(W).T).reshape(B, L, cin, K)
            d = (K - 1) // 2
            dpad = np.zeros((B, L + K - 1, cin), dtype=dz.dtype)
            for k in range(K):
                dpad[:, k : k + L] += dcols[:, :, :, k]
            dz = dpad[:, d : d + L]
    return grads


def loss_and_grads(weights: WeightStore, x, y, class_weights, draws: StochasticDraws):
    """Summed weighted loss, gradients and batch-norm batch statistics for one batch."""
    logits, cache, stats = train_forward(weights, x, draws)
    y = np.asarray(y, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise ValueError(f"targets {y.shape} do not match outputs {logits.shape}")
    loss, dlogits = weighted_bce_logits(logits, y, class_weights)
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss}; max |logit| = {np.abs(logits).max():.3g}")
    return loss, train_backward(weights, cache, dlogits), stats


def train_loss(weights: WeightStore, x, y, class_weights, draws: StochasticDraws) -> float:
    logits, _, _ = train_forward(weights, x, draws)
    y = np.asarray(y, dtype=logits.dtype)
    return weighted_bce_logits(logits, y, class_weights)[0]
