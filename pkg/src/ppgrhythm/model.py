"""Convolutional-recurrent classifier: model description, weights, layers, batch forward.

Activations are kept channels-last (``[batch, time, channels]``) internally.
The public single-layer helpers (:func:`conv1d`, :func:`maxpool`, ...) take
``[channels, time]`` arrays, and activation traces are reported that way too.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .signal import LabelSeries, SampleSeries, _atomic_write

MODEL_VERSION = 1
MODEL_MAGIC = b"RSM1"
BLOCK_ORDERS = ("bn_relu", "relu_bn")


@dataclass(frozen=True)
class ConvBlock:
    out_channels: int
    kernel_len: int
    pool_len: int


@dataclass(frozen=True)
class ModelSpec:
    conv_blocks: tuple = (ConvBlock(12, 9, 4), ConvBlock(20, 7, 4))
    lstm_hidden: int = 32
    input_channels: int = 1
    block_order: str = "bn_relu"
    bn_eps: float = 1e-3
    forget_bias_init: float = 1.0

    def __post_init__(self):
        blocks = tuple(b if isinstance(b, ConvBlock) else ConvBlock(*b) for b in self.conv_blocks)
        object.__setattr__(self, "conv_blocks", blocks)
        if not blocks:
            raise ValueError("at least one conv block is required")
        for b in blocks:
            if min(b.out_channels, b.kernel_len, b.pool_len) < 1:
                raise ValueError(f"all block dimensions must be >= 1: {b}")
            if b.kernel_len % 2 == 0:
                raise ValueError(f"kernel_len must be odd: {b}")
        if self.lstm_hidden < 1 or self.input_channels != 1:
            raise ValueError("lstm_hidden must be >= 1 and input_channels must be 1")
        if self.block_order not in BLOCK_ORDERS:
            raise ValueError(f"block_order must be one of {BLOCK_ORDERS}")

    @property
    def total_pool(self) -> int:
        return math.prod(b.pool_len for b in self.conv_blocks)

    @property
    def n_blocks(self) -> int:
        return len(self.conv_blocks)

    def in_channels(self, i: int) -> int:
        return self.input_channels if i == 0 else self.conv_blocks[i - 1].out_channels

    @property
    def lstm_input(self) -> int:
        return self.conv_blocks[-1].out_channels

    def check_rate(self, fs_hz: float):
        if fs_hz == 20.0 and self.total_pool != 16:
            raise ValueError(f"20 Hz input needs a total pooling of 16, model has {self.total_pool}")

    def layer_names(self) -> list[str]:
        names = []
        for i in range(1, self.n_blocks + 1):
            names += [f"conv_{i}", f"relu_{i}", f"maxpool_{i}"]
        return names + ["lstm", "lstm_cell", "output"]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_blocks"] = [list(asdict(b).values()) for b in self.conv_blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["conv_blocks"] = tuple(ConvBlock(*b) for b in d["conv_blocks"])
        return cls(**d)


def tensor_shapes(spec: ModelSpec) -> dict[str, tuple]:
    """Ordered name -> shape map of every stored tensor."""
    shapes = {}
    for i, b in enumerate(spec.conv_blocks, 1):
        cin = spec.in_channels(i - 1)
        shapes[f"conv_{i}/kernel"] = (b.out_channels, cin, b.kernel_len)
        shapes[f"conv_{i}/bias"] = (b.out_channels,)
        for part in ("gamma", "beta", "moving_mean", "moving_var"):
            shapes[f"bn_{i}/{part}"] = (b.out_channels,)
    H, F = spec.lstm_hidden, spec.lstm_input
    shapes["lstm/kernel"] = (F, 4 * H)
    shapes["lstm/recurrent_kernel"] = (H, 4 * H)
    shapes["lstm/bias"] = (4 * H,)
    shapes["dense/kernel"] = (H,)
    shapes["dense/bias"] = (1,)
    return shapes


def is_trainable(name: str) -> bool:
    return not name.endswith(("moving_mean", "moving_var"))


def param_breakdown(spec: ModelSpec) -> dict[str, int]:
    """Trainable scalars per layer."""
    out = {}
    for name, shape in tensor_shapes(spec).items():
        if is_trainable(name):
            layer = name.split("/")[0]
            out[layer] = out.get(layer, 0) + math.prod(shape)
    return out


def count_params(model) -> int:
    spec = model.spec if isinstance(model, WeightStore) else model
    return sum(param_breakdown(spec).values())


@dataclass
class WeightStore:
    spec: ModelSpec
    tensors: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = tensor_shapes(self.spec)
        missing = set(shapes) - set(self.tensors)
        if missing:
            raise ValueError(f"missing tensors: {sorted(missing)}")
        for name, shape in shapes.items():
            if tuple(np.shape(self.tensors[name])) != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {np.shape(self.tensors[name])}")
        for i in range(1, self.spec.n_blocks + 1):
            if np.any(self.tensors[f"bn_{i}/moving_var"] < 0):
                raise ValueError("moving variance must be non-negative")

    def __getitem__(self, name):
        return self.tensors[name]

    @property
    def dtype(self):
        return self.tensors["dense/kernel"].dtype

    def names(self, trainable_only: bool = False) -> list[str]:
        return [n for n in tensor_shapes(self.spec) if not trainable_only or is_trainable(n)]

    def copy(self) -> "WeightStore":
        return WeightStore(self.spec, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "WeightStore":
        return WeightStore(self.spec, {k: np.asarray(v, dtype=dtype).copy() for k, v in self.tensors.items()})

    def count_params(self) -> int:
        return count_params(self.spec)


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_weights(spec: ModelSpec, seed: int = 0) -> WeightStore:
    """Glorot-uniform kernels, zero biases, unit forget-gate bias, identity batch-norm."""
    rng = np.random.default_rng(seed)
    t = {}
    for i, b in enumerate(spec.conv_blocks, 1):
        cin = spec.in_channels(i - 1)
        shape = (b.out_channels, cin, b.kernel_len)
        t[f"conv_{i}/kernel"] = glorot_uniform(rng, shape, cin * b.kernel_len, b.out_channels * b.kernel_len)
        t[f"conv_{i}/bias"] = np.zeros(b.out_channels)
        t[f"bn_{i}/gamma"] = np.ones(b.out_channels)
        t[f"bn_{i}/beta"] = np.zeros(b.out_channels)
        t[f"bn_{i}/moving_mean"] = np.zeros(b.out_channels)
        t[f"bn_{i}/moving_var"] = np.ones(b.out_channels)
    H, F = spec.lstm_hidden, spec.lstm_input
    t["lstm/kernel"] = glorot_uniform(rng, (F, 4 * H), F, 4 * H)
    t["lstm/recurrent_kernel"] = glorot_uniform(rng, (H, 4 * H), H, 4 * H)
    bias = np.zeros(4 * H)
    bias[H : 2 * H] = spec.forget_bias_init
    t["lstm/bias"] = bias
    t["dense/kernel"] = glorot_uniform(rng, (H,), H, 1)
    t["dense/bias"] = np.zeros(1)
    return WeightStore(spec, t)


def random_weights(spec: ModelSpec, seed: int, scale: float = 1.0) -> WeightStore:
    """Weights with every tensor randomized, including batch-norm statistics; for tests."""
    rng = np.random.default_rng(seed)
    w = init_weights(spec, int(rng.integers(2**31)))
    for name, v in w.tensors.items():
        if name.endswith("moving_var"):
            v[...] = rng.uniform(0.5, 2.0, v.shape)
        elif name.endswith("gamma"):
            v[...] = rng.uniform(0.5, 1.5, v.shape)
        elif name.endswith(("bias", "beta", "moving_mean")):
            v[...] = rng.normal(0, 0.3, v.shape)
        else:
            v[...] *= scale
    return w


# ---------------------------------------------------------------------------
# elementary layers


def sigmoid(a):
    a = np.asarray(a)
    # split by sign so neither branch overflows
    out = np.empty_like(a, dtype=np.result_type(a, np.float32))
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def relu(x):
    return np.maximum(x, 0)


def conv_windows(xpad, kernel_len: int):
    """``[B, T+K-1, C]`` -> ``[B, T, C*K]`` patches, channel-major."""
    win = sliding_window_view(xpad, kernel_len, axis=1)
    B, T, C, K = win.shape
    return win.reshape(B, T, C * K)


def kernel_matrix(kernels):
    """``[out, in, K]`` -> ``[in*K, out]`` matching :func:`conv_windows`."""
    cout, cin, k = kernels.shape
    return kernels.transpose(1, 2, 0).reshape(cin * k, cout)


def conv_same(x, kernels, bias):
    """Channels-last 'same' cross-correlation: ``[B, T, Cin]`` -> ``[B, T, Cout]``."""
    k = kernels.shape[2]
    d = (k - 1) // 2
    xpad = np.pad(x, ((0, 0), (d, d), (0, 0)))
    return conv_windows(xpad, k) @ kernel_matrix(kernels) + bias


def conv1d(x, kernels, bias, padding: str = "same"):
    """Cross-correlate ``x`` (``[in_ch, T]``) with ``kernels`` (``[out_ch, in_ch, K]``).

    ``padding="same"`` zero-pads symmetrically and keeps T; ``"causal"`` pads
    only on the left, so output ``t`` equals the same-padded output at
    ``t - (K-1)/2``.
    """
    x = np.asarray(x)
    kernels = np.asarray(kernels)
    if x.ndim != 2 or kernels.ndim != 3 or kernels.shape[1] != x.shape[0]:
        raise ValueError(f"shape mismatch: x {x.shape}, kernels {kernels.shape}")
    if x.shape[1] < 1:
        raise ValueError("empty input")
    if np.shape(bias) != (kernels.shape[0],):
        raise ValueError("bias must have one entry per output channel")
    k = kernels.shape[2]
    if padding == "same":
        d = (k - 1) // 2
        pad = (d, k - 1 - d)
    elif padding == "causal":
        pad = (k - 1, 0)
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xpad = np.pad(x.T[None], ((0, 0), pad, (0, 0)))
    return (conv_windows(xpad, k) @ kernel_matrix(kernels) + bias)[0].T


def batchnorm_infer(x, gamma, beta, mean, var, eps=1e-3):
    """Per-channel affine normalisation of ``[ch, T]`` with stored statistics."""
    x = np.asarray(x)
    col = lambda v: np.asarray(v)[:, None]  # noqa: E731
    return (x - col(mean)) / np.sqrt(col(var) + eps) * col(gamma) + col(beta)


def maxpool(x, pool_len: int):
    """Non-overlapping max over ``[ch, T]``; the trailing partial window is dropped."""
    x = np.asarray(x)
    if pool_len < 1:
        raise ValueError("pool_len must be >= 1")
    n = x.shape[-1] // pool_len
    return x[..., : n * pool_len].reshape(*x.shape[:-1], n, pool_len).max(axis=-1)


def lstm_step(state, x_t, kernel, recurrent_kernel, bias):
    """One LSTM step with gates ordered ``i, f, g, o``; returns ``(c, h)``."""
    c, h = state
    H = np.shape(h)[-1]
    a = x_t @ kernel + h @ recurrent_kernel + bias
    i = sigmoid(a[..., :H])
    f = sigmoid(a[..., H : 2 * H])
    g = np.tanh(a[..., 2 * H : 3 * H])
    o = sigmoid(a[..., 3 * H :])
    c_new = f * c + i * g
    return c_new, o * np.tanh(c_new)


def dense_sigmoid(h, w, b):
    return sigmoid(np.asarray(h) @ w + b)


# ---------------------------------------------------------------------------
# batch inference


class InferenceLayers:
    """Per-block constants derived from a :class:`WeightStore` for inference.

    Shared by the batch and streaming paths so both perform identical arithmetic.
    """

    def __init__(self, weights: WeightStore):
        spec = weights.spec
        self.spec = spec
        self.dtype = weights.dtype
        self.blocks = []
        for i, b in enumerate(spec.conv_blocks, 1):
            scale = weights[f"bn_{i}/gamma"] / np.sqrt(weights[f"bn_{i}/moving_var"] + spec.bn_eps)
            shift = weights[f"bn_{i}/beta"] - weights[f"bn_{i}/moving_mean"] * scale
            self.blocks.append(
                dict(
                    kmat=kernel_matrix(weights[f"conv_{i}/kernel"]),
                    bias=weights[f"conv_{i}/bias"],
                    scale=scale.astype(self.dtype),
                    shift=shift.astype(self.dtype),
                    k=b.kernel_len,
                    pool=b.pool_len,
                )
            )
        self.wx = weights["lstm/kernel"]
        self.wh = weights["lstm/recurrent_kernel"]
        self.b = weights["lstm/bias"]
        self.w_out = weights["dense/kernel"]
        self.b_out = weights["dense/bias"]
        self.H = spec.lstm_hidden
        self.bn_first = spec.block_order == "bn_relu"

    def conv(self, i, windows):
        blk = self.blocks[i]
        return windows @ blk["kmat"] + blk["bias"]

    def activate(self, i, z):
        blk = self.blocks[i]
        if self.bn_first:
            return relu(z * blk["scale"] + blk["shift"])
        return relu(z) * blk["scale"] + blk["shift"]

    def lstm_inputs(self, z):
        return z @ self.wx + self.b

    def lstm_cell(self, zx_t, c, h):
        H = self.H
        a = zx_t + h @ self.wh
        i = sigmoid(a[..., :H])
        f = sigmoid(a[..., H : 2 * H])
        g = np.tanh(a[..., 2 * H : 3 * H])
        o = sigmoid(a[..., 3 * H :])
        c = f * c + i * g
        return c, o * np.tanh(c)

    def head(self, h):
        return sigmoid(h @ self.w_out + self.b_out[0])


@dataclass
class ActivationTrace:
    layer_name: str
    activations: np.ndarray  # [channels, time]
    rate_hz: float


def predict_batch(weights: WeightStore, x, capture=(), layers: InferenceLayers | None = None):
    """Inference on ``[B, T]`` raw samples; returns ``(probs [B, T // total_pool], traces)``.

    Traces are channels-last ``[B, steps, channels]`` arrays keyed by layer name.
    """
    layers = layers or InferenceLayers(weights)
    spec = weights.spec
    x = np.asarray(x, dtype=weights.dtype)
    if x.ndim == 1:
        x = x[None]
    if x.shape[1] < spec.total_pool:
        raise ValueError(f"input of length {x.shape[1]} is shorter than one output period ({spec.total_pool})")
    capture = set(capture)
    traces = {}
    z = x[:, :, None]
    for i, blk in enumerate(layers.blocks):
        d = (blk["k"] - 1) // 2
        zp = np.pad(z, ((0, 0), (d, d), (0, 0)))
        conv = layers.conv(i, conv_windows(zp, blk["k"]))
        act = layers.activate(i, conv)
        B, L, C = act.shape
        n = L // blk["pool"]
        z = act[:, : n * blk["pool"]].reshape(B, n, blk["pool"], C).max(axis=2)
        for name, val in ((f"conv_{i+1}", conv), (f"relu_{i+1}", act), (f"maxpool_{i+1}", z)):
            if name in capture:
                traces[name] = val
    zx = layers.lstm_inputs(z)
    B, J, _ = zx.shape
    c = np.zeros((B, layers.H), dtype=weights.dtype)
    h = np.zeros_like(c)
    hs = np.empty((B, J, layers.H), dtype=weights.dtype)
    cs = np.empty_like(hs)
    for t in range(J):
        c, h = layers.lstm_cell(zx[:, t], c, h)
        hs[:, t] = h
        cs[:, t] = c
    p = layers.head(hs)
    if "lstm" in capture:
        traces["lstm"] = hs
    if "lstm_cell" in capture:
        traces["lstm_cell"] = cs
    if "output" in capture:
        traces["output"] = p[..., None]
    return p, traces


def trace_rates(spec: ModelSpec, fs_hz: float) -> dict[str, float]:
    rates = {}
    r = fs_hz
    for i, b in enumerate(spec.conv_blocks, 1):
        rates[f"conv_{i}"] = rates[f"relu_{i}"] = r
        r = r / b.pool_len
        rates[f"maxpool_{i}"] = r
    rates["lstm"] = rates["lstm_cell"] = rates["output"] = r
    return rates


def forward(weights: WeightStore, x, capture=None, fs_hz: float | None = None):
    """Full-sequence inference with a zero initial LSTM state.

    Returns ``(LabelSeries of probabilities at fs / total_pool, {name: ActivationTrace})``.
    """
    if isinstance(x, SampleSeries):
        fs_hz = x.sample_rate_hz
        values = x.values
    else:
        values = np.asarray(x, dtype=np.float64)
        fs_hz = fs_hz or 20.0
        if not np.all(np.isfinite(values)):
            raise ValueError("input contains NaN or Inf")
    spec = weights.spec
    spec.check_rate(fs_hz)
    capture = list(capture or [])
    unknown = set(capture) - set(spec.layer_names())
    if unknown:
        raise KeyError(f"unknown layer(s) {sorted(unknown)}; valid: {spec.layer_names()}")
    p, raw = predict_batch(weights, values, capture)
    rates = trace_rates(spec, fs_hz)
    traces = {n: ActivationTrace(n, raw[n][0].T.copy(), rates[n]) for n in capture}
    return LabelSeries(p[0].astype(np.float64), fs_hz / spec.total_pool), traces


# ---------------------------------------------------------------------------
# model files


def save_model(weights: WeightStore, path, binary: bool | None = None) -> Path:
    path = Path(path)
    if binary is None:
        binary = path.suffix == ".bin"
    spec_json = json.dumps(weights.spec.to_dict(), sort_keys=True)
    shapes = tensor_shapes(weights.spec)
    if binary:
        header = json.dumps(
            {"version": MODEL_VERSION, "spec": weights.spec.to_dict(), "tensors": [[n, list(s)] for n, s in shapes.items()]},
            sort_keys=True,
        ).encode()
        body = b"".join(np.asarray(weights[n], dtype="<f8").tobytes() for n in shapes)
        _atomic_write(path, MODEL_MAGIC + struct.pack("<I", len(header)) + header + body)
        return path
    lines = [f"version={MODEL_VERSION}", f"spec={spec_json}"]
    for name, shape in shapes.items():
        vals = np.asarray(weights[name], dtype=np.float64).ravel()
        lines.append(f"tensor {name} {','.join(map(str, shape))}")
        lines.append(" ".join(f"{v:.17g}" for v in vals))
    _atomic_write(path, ("\n".join(lines) + "\n").encode())
    return path


class ModelFormatError(ValueError):
    pass


def load_model(path, dtype=np.float64) -> WeightStore:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == MODEL_MAGIC:
        (hlen,) = struct.unpack_from("<I", raw, 4)
        header = json.loads(raw[8 : 8 + hlen])
        if header.get("version") != MODEL_VERSION:
            raise ModelFormatError(f"unsupported model version {header.get('version')}")
        spec = ModelSpec.from_dict(header["spec"])
        data = np.frombuffer(raw[8 + hlen :], dtype="<f8")
        tensors, off = {}, 0
        for name, shape in header["tensors"]:
            n = math.prod(shape)
            tensors[name] = data[off : off + n].reshape(shape).astype(dtype)
            off += n
        if off != data.size:
            raise ModelFormatError("model body size does not match header")
        return WeightStore(spec, tensors)
    lines = raw.decode().splitlines()
    if not lines or not lines[0].startswith("version="):
        raise ModelFormatError(f"{path}: missing version header")
    if int(lines[0].split("=", 1)[1]) != MODEL_VERSION:
        raise ModelFormatError(f"{path}: unsupported model version")
    spec = ModelSpec.from_dict(json.loads(lines[1].split("=", 1)[1]))
    tensors = {}
    it = iter(lines[2:])
    for line in it:
        if not line.strip():
            continue
        _, name, shape = line.split()
        shape = tuple(int(s) for s in shape.split(","))
        vals = np.array(next(it).split(), dtype=np.float64)
        tensors[name] = vals.reshape(shape).astype(dtype)
    return WeightStore(spec, tensors)
