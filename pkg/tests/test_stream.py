import numpy as np
import pytest

from ppgrhythm.model import ModelSpec, forward, random_weights
from ppgrhythm.stream import StreamError, StreamState, stream_delay_samples, stream_push, stream_record


def test_delay_of_default_model():
    # (9-1)/2 input samples for block 1, (7-1)/2 pooled steps of 4 samples for block 2
    assert stream_delay_samples(ModelSpec()) == 4 + 4 * 3


@pytest.mark.parametrize("chunk", [1, 5, 16, 100, None])
def test_chunking_matches_batch(default_weights, chunk):
    x = np.random.default_rng(0).normal(size=1000)
    ref, _ = forward(default_weights, x)
    out = stream_record(default_weights, x, chunk)
    assert out.shape == ref.values.shape
    np.testing.assert_allclose(out, ref.values, rtol=0, atol=1e-12)


def test_chunk_1_vs_4800(default_weights):
    x = np.random.default_rng(1).normal(size=4800)
    a = stream_record(default_weights, x, 1)
    b = stream_record(default_weights, x, 4800)
    assert np.max(np.abs(a - b)) <= 1e-6


def test_one_emission_per_16_samples_once_warm(default_weights):
    st = StreamState(default_weights)
    d = st.delay
    emitted = [len(stream_push(st, [0.1 * k])) for k in range(d)]
    assert sum(emitted) == 0
    # from here on each output period gives exactly one probability
    for _ in range(5):
        assert sum(len(st.push([0.3])) for _ in range(15)) == 0
        assert len(st.push([0.3])) == 1


def test_nan_chunk_rejected_state_unchanged(default_weights):
    x = np.random.default_rng(2).normal(size=200)
    st = StreamState(default_weights)
    first = st.push(x[:100])
    with pytest.raises(StreamError):
        st.push(np.r_[x[100:110], np.nan])
    rest = st.push(x[100:])
    tail = st.flush()
    ref, _ = forward(default_weights, x)
    np.testing.assert_allclose(np.r_[first, rest, tail], ref.values, atol=1e-12)


def test_reset_replay_identical(default_weights):
    x = np.random.default_rng(3).normal(size=300)
    st = StreamState(default_weights)
    a = np.r_[st.push(x), st.flush()]
    st.reset()
    b = np.r_[st.push(x), st.flush()]
    assert a.tobytes() == b.tobytes()


def test_push_after_flush(default_weights):
    st = StreamState(default_weights)
    st.push(np.zeros(40))
    st.flush()
    with pytest.raises(StreamError):
        st.push(np.zeros(3))


def test_short_stream_flush(default_weights):
    # fewer samples than one output period: nothing to emit
    assert stream_record(default_weights, np.zeros(10)).size == 0
    assert stream_record(default_weights, np.zeros(16)).size == 1


def test_float32_stream(default_weights):
    w32 = default_weights.astype(np.float32)
    x = np.random.default_rng(4).normal(size=800)
    ref, _ = forward(w32, x)
    np.testing.assert_allclose(stream_record(w32, x, 7), ref.values, atol=1e-6)


def test_memory_is_constant(default_weights):
    st = StreamState(default_weights)
    sizes = []
    for k in range(3):
        st.push(np.random.default_rng(k).normal(size=5000))
        sizes.append(sum(s.buf.nbytes + s.pool_max.nbytes for s in st.stages))
    assert len(set(sizes)) == 1


def test_other_architecture():
    w = random_weights(ModelSpec(conv_blocks=((3, 5, 2), (4, 3, 2), (2, 3, 4))), seed=9)
    x = np.random.default_rng(9).normal(size=333)
    ref, _ = forward(w, x)
    np.testing.assert_allclose(stream_record(w, x, 3), ref.values, atol=1e-12)
