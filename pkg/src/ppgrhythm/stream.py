"""Incremental, constant-memory inference emitting one probability per ``total_pool`` samples.

Each conv layer keeps the last ``K-1`` inputs it has seen and computes its
outputs causally, so output position ``t`` becomes available once input
``t + (K-1)/2`` has arrived. The values are those of the batch ('same'
padded) network; only their availability is delayed. :meth:`StreamState.flush`
feeds the right-hand zero padding, after which the stream has emitted exactly
``forward(model, x)``.
"""
from __future__ import annotations

import numpy as np

from .model import InferenceLayers, WeightStore


class StreamError(ValueError):
    pass


def stream_delay_samples(spec) -> int:
    """Extra input samples needed before output ``j`` is emitted, beyond sample ``(j+1)*total_pool - 1``."""
    delay, stride = 0, 1
    for b in spec.conv_blocks:
        delay += stride * (b.kernel_len - 1) // 2
        stride *= b.pool_len
    return delay


class _ConvStage:
    __slots__ = ("k", "d", "pool", "buf", "n_in", "pool_max", "pool_fill")

    def __init__(self, k, pool, channels, dtype):
        self.k = k
        self.d = (k - 1) // 2
        self.pool = pool
        self.buf = np.zeros((k - 1, channels), dtype=dtype)
        self.n_in = 0
        self.pool_max = np.zeros(0, dtype=dtype)
        self.pool_fill = 0

    def snapshot(self):
        return (self.buf.copy(), self.n_in, self.pool_max.copy(), self.pool_fill)

    def restore(self, snap):
        self.buf, self.n_in, self.pool_max, self.pool_fill = snap


class StreamState:
    """Persistent inference state for one stream; not safe for concurrent use."""

    def __init__(self, weights: WeightStore):
        self.weights = weights
        self.layers = InferenceLayers(weights)
        self.spec = weights.spec
        self.reset()

    def reset(self):
        dtype = self.weights.dtype
        self.stages = [
            _ConvStage(b.kernel_len, b.pool_len, self.spec.in_channels(i), dtype)
            for i, b in enumerate(self.spec.conv_blocks)
        ]
        H = self.spec.lstm_hidden
        self.c = np.zeros((1, H), dtype=dtype)
        self.h = np.zeros((1, H), dtype=dtype)
        self.samples_seen = 0
        self.emitted = 0
        self.finished = False

    @property
    def delay(self) -> int:
        return stream_delay_samples(self.spec)

    def push(self, chunk) -> np.ndarray:
        """Consume samples; return the probabilities that became available."""
        if self.finished:
            raise StreamError("stream already flushed; call reset() first")
        x = np.asarray(chunk, dtype=self.weights.dtype).reshape(-1)
        if not np.isfinite(x).all():
            raise StreamError("chunk contains NaN or Inf; state left unchanged")
        if x.size == 0:
            return np.zeros(0)
        self.samples_seen += x.size
        return self._run(x[:, None], flush=False)

    def flush(self) -> np.ndarray:
        """Apply end-of-signal zero padding and emit the remaining outputs."""
        if self.finished:
            return np.zeros(0)
        out = self._run(np.zeros((0, 1), dtype=self.weights.dtype), flush=True)
        self.finished = True
        return out

    def _run(self, z, flush):
        for i, st in enumerate(self.stages):
            z = self._conv_stage(i, st, z, flush)
            if z.shape[0] == 0 and not flush:
                return np.zeros(0)
        return self._recurrent(z)

    def _conv_stage(self, i, st: _ConvStage, z, flush):
        layers = self.layers
        n_new = z.shape[0]
        if flush:
            if st.n_in + n_new == 0:
                return np.zeros((0, layers.blocks[i]["kmat"].shape[1]), z.dtype)
            # right-hand zero padding; these inputs do not count as samples
            z = np.concatenate([z, np.zeros((st.d, z.shape[1]), z.dtype)])
        ext = np.concatenate([st.buf, z])
        if st.k > 1:
            st.buf = ext[-(st.k - 1) :]
        n_before = st.n_in
        st.n_in += n_new
        n_out = z.shape[0]
        # output position of the first new window is n_before - d; drop negatives (left padding)
        first = n_before - st.d
        skip = max(0, -first)
        n_keep = n_out - skip
        if n_keep <= 0:
            return np.zeros((0, layers.blocks[i]["kmat"].shape[1]), z.dtype)
        if n_keep == 1:
            windows = ext[skip : skip + st.k].T.reshape(1, -1)
        else:
            windows = np.lib.stride_tricks.sliding_window_view(ext, st.k, axis=0)[skip : skip + n_keep]
            windows = windows.reshape(n_keep, -1)
        act = layers.activate(i, layers.conv(i, windows[None]))[0]
        return self._pool(st, act, flush)

    @staticmethod
    def _pool(st: _ConvStage, act, flush):
        P = st.pool
        m, C = act.shape
        outs = []
        start = 0
        if st.pool_fill:
            need = P - st.pool_fill
            if m < need:
                st.pool_max = np.maximum(st.pool_max, act.max(axis=0))
                st.pool_fill += m
                return np.zeros((0, C), act.dtype)
            outs.append(np.maximum(st.pool_max, act[:need].max(axis=0))[None])
            start = need
            st.pool_fill = 0
        rest = act[start:]
        n = rest.shape[0] // P
        if n:
            outs.append(rest[: n * P].reshape(n, P, C).max(axis=1))
        tail = rest[n * P :]
        if tail.shape[0] and not flush:
            st.pool_max = tail.max(axis=0)
            st.pool_fill = tail.shape[0]
        if not outs:
            return np.zeros((0, C), act.dtype)
        return np.concatenate(outs) if len(outs) > 1 else outs[0]

    def _recurrent(self, z):
        if z.shape[0] == 0:
            return np.zeros(0)
        layers = self.layers
        zx = layers.lstm_inputs(z[None])[0]
        hs = np.empty((z.shape[0], layers.H), dtype=z.dtype)
        c, h = self.c, self.h
        for t in range(z.shape[0]):
            c, h = layers.lstm_cell(zx[t : t + 1], c, h)
            hs[t] = h[0]
        self.c, self.h = c, h
        self.emitted += z.shape[0]
        return layers.head(hs).astype(np.float64)


def stream_push(state: StreamState, chunk) -> np.ndarray:
    return state.push(chunk)


def stream_record(weights: WeightStore, values, chunk_size: int | None = None) -> np.ndarray:
    """Stream ``values`` through a fresh state in chunks and flush; returns all emissions."""
    state = StreamState(weights)
    values = np.asarray(values)
    step = chunk_size or max(values.size, 1)
    outs = [state.push(values[i : i + step]) for i in range(0, values.size, step)]
    outs.append(state.flush())
    return np.concatenate(outs)
