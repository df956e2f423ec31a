"""Training loop: weighted summed BCE, Adam, plateau LR annealing, crops and augmentation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backprop import StochasticDraws, TrainingError, loss_and_grads
from .config import ConfigError, dump_config, parse_config_text
from .model import WeightStore, predict_batch
from .signal import LabelSeries, downsample_labels

log = logging.getLogger(__name__)

EPS_CLAMP = 1e-7


@dataclass
class TrainConfig:
    example_len_samples: int = 1920
    batch_size: int = 16
    max_epochs: int = 40
    examples_per_epoch: int = 0  # 0: one pass worth of samples
    initial_lr: float = 3e-3
    lr_decay_factor: float = 0.5
    plateau_patience_epochs: int = 3
    min_lr: float = 1e-5
    class_weights: str = "auto"
    lstm_dropout_rate: float = 0.2
    init_state_scale: float = 0.1
    bn_momentum: float = 0.9
    checkpoint_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.example_len_samples <= 0 or self.example_len_samples % 16:
            raise ConfigError("example_len_samples must be a positive multiple of 16")
        if not 0 < self.lr_decay_factor < 1:
            raise ConfigError("lr_decay_factor must lie in (0, 1)")
        if not 0 <= self.lstm_dropout_rate < 1:
            raise ConfigError("lstm_dropout_rate must lie in [0, 1)")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ConfigError("batch_size must be >= 1 and max_epochs >= 0")
        if self.class_weights != "auto":
            parse_class_weights(self.class_weights)

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return cls(**parse_config_text(text, cls))

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        return dump_config(self)


@dataclass
class AugmentConfig:
    crop: bool = True
    scale_range: tuple = (0.6, 1.6)
    shift_range: tuple = (-0.5, 0.5)
    noise_sigma_range: tuple = (0.0, 0.05)
    per_example: bool = True

    def __post_init__(self):
        for name in ("scale_range", "shift_range", "noise_sigma_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name}: lower bound exceeds upper bound")
        if self.scale_range[0] <= 0 or self.noise_sigma_range[0] < 0:
            raise ConfigError("scales must be positive and noise levels non-negative")

    @classmethod
    def from_text(cls, text: str) -> "AugmentConfig":
        return cls(**parse_config_text(text, cls))

    def to_text(self) -> str:
        return dump_config(self)


def parse_class_weights(value):
    parts = [float(v) for v in str(value).split(",")]
    if len(parts) != 2 or min(parts) <= 0:
        raise ConfigError(f"class_weights must be 'auto' or 'w0,w1', got {value!r}")
    return tuple(parts)


# ---------------------------------------------------------------------------
# loss


def weighted_bce(p, y, weights=(1.0, 1.0)) -> float:
    """Σ_j w(y_j) · [−y_j ln p_j − (1−y_j) ln(1−p_j)].

    Probabilities must lie strictly inside (0, 1); clamp with :func:`clamp_probs` first.
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError("p and y must have the same shape")
    if np.any(p <= 0) or np.any(p >= 1):
        raise ValueError("probabilities must lie strictly inside (0, 1)")
    w = np.where(y > 0.5, weights[1], weights[0])
    return float(np.sum(w * -(y * np.log(p) + (1 - y) * np.log1p(-p))))


def clamp_probs(p, eps=EPS_CLAMP):
    return np.clip(p, eps, 1 - eps)


def auto_class_weights(label_arrays) -> tuple[float, float]:
    """Inverse-frequency weights ``N / (2 N_c)`` over all output-rate labels."""
    y = np.concatenate([np.asarray(a).ravel() for a in label_arrays])
    n1 = float(np.sum(y > 0.5))
    n0 = float(y.size - n1)
    if n0 == 0 or n1 == 0:
        raise ValueError("auto class weights need both classes in the training labels")
    return y.size / (2 * n0), y.size / (2 * n1)


# ---------------------------------------------------------------------------
# optimiser and schedule


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(weights: WeightStore, grads: dict, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place bias-corrected Adam update of every tensor present in ``grads``."""
    state.t += 1
    t = state.t
    c1 = 1 - beta1**t
    c2 = 1 - beta2**t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        weights.tensors[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return weights, state


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr, factor=0.5, patience=3, min_lr=0.0):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best = np.inf
        self.wait = 0

    def step(self, val_loss) -> float:
        """Record one epoch's validation loss; return the learning rate for the next epoch."""
        if val_loss < self.best:
            self.best = val_loss
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.wait = 0
        return self.lr


# ---------------------------------------------------------------------------
# examples and augmentation


def record_targets(record, ratio=16):
    return downsample_labels(record.truth, ratio).values.astype(np.float64)


def crop_examples(records, example_len, n_examples, rng, crop=True):
    """Draw fixed-length ``(x [n, L], truth [n, L])`` subsequences from ``records``.

    With ``crop`` the offsets are uniform over each record and records are picked
    in proportion to their number of valid offsets; otherwise records are tiled
    into non-overlapping windows.
    """
    usable = []
    for r in records:
        if len(r) < example_len:
            log.warning("skipping record %s: %d samples < example length %d", r.subject_id, len(r), example_len)
            continue
        usable.append(r)
    if not usable:
        raise ValueError("no record is long enough for one example")
    if not crop:
        return tile_examples(usable, example_len)
    counts = np.array([len(r) - example_len + 1 for r in usable], dtype=np.float64)
    which = rng.choice(len(usable), size=n_examples, p=counts / counts.sum())
    xs = np.empty((n_examples, example_len))
    ys = np.empty((n_examples, example_len), dtype=np.int8)
    for k, ri in enumerate(which):
        r = usable[ri]
        off = int(rng.integers(0, len(r) - example_len + 1))
        xs[k] = r.samples.values[off : off + example_len]
        ys[k] = r.truth.values[off : off + example_len]
    return xs, ys


def tile_examples(records, example_len):
    xs, ys = [], []
    for r in records:
        n = len(r) // example_len
        if n:
            xs.append(r.samples.values[: n * example_len].reshape(n, example_len))
            ys.append(r.truth.values[: n * example_len].reshape(n, example_len))
    if not xs:
        raise ValueError("no record is long enough for one example")
    return np.concatenate(xs), np.concatenate(ys)


def targets_from_truth(truth, ratio=16):
    """Majority-vote output-rate targets for each row of a ``[n, L]`` truth array."""
    return np.stack([downsample_labels(LabelSeries(row, 1.0), ratio).values for row in truth]).astype(np.float64)


def augment_batch(x, aug: AugmentConfig, rng):
    """Per example ``x <- s*x + c + noise`` with ``s``, ``c`` and the noise level drawn uniformly."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if aug.per_example:
        s = rng.uniform(*aug.scale_range, size=(n, 1))
        c = rng.uniform(*aug.shift_range, size=(n, 1))
        sigma = rng.uniform(*aug.noise_sigma_range, size=(n, 1))
    else:
        s = np.full((n, 1), rng.uniform(*aug.scale_range))
        c = np.full((n, 1), rng.uniform(*aug.shift_range))
        sigma = np.full((n, 1), rng.uniform(*aug.noise_sigma_range))
    noise = rng.standard_normal(x.shape) * sigma
    return s * x + c + noise


# ---------------------------------------------------------------------------
# fitting


def evaluate_loss(weights: WeightStore, x, y, class_weights, batch_size=64) -> float:
    """Inference-mode weighted BCE per output (summed loss divided by output count)."""
    total = 0.0
    for i in range(0, x.shape[0], batch_size):
        p, _ = predict_batch(weights, x[i : i + batch_size])
        total += weighted_bce(clamp_probs(p), y[i : i + batch_size], class_weights)
    return total / y.size


def _update_bn_stats(weights: WeightStore, stats, momentum):
    for i, (mean, var) in stats.items():
        m = weights.tensors[f"bn_{i}/moving_mean"]
        v = weights.tensors[f"bn_{i}/moving_var"]
        m *= momentum
        m += (1 - momentum) * mean
        v *= momentum
        v += (1 - momentum) * var


def fit(weights: WeightStore, train_records, val_records, config: TrainConfig, aug: AugmentConfig | None = None,
        on_epoch_end=None):
    """Train a copy of ``weights``; return ``(best-validation weights, history)``.

    ``history`` is a list of dicts with ``epoch, lr, train_loss, val_loss`` where the
    losses are the summed weighted BCE divided by the number of outputs.
    ``on_epoch_end(epoch, weights, improved)`` is called after every epoch.
    """
    aug = aug or AugmentConfig()
    weights = weights.copy()
    dtype = weights.dtype
    spec = weights.spec
    ratio = spec.total_pool
    L = config.example_len_samples
    train_records = list(train_records)
    val_records = list(val_records)

    if config.class_weights == "auto":
        cw = auto_class_weights([record_targets(r, ratio) for r in train_records])
    else:
        cw = parse_class_weights(config.class_weights)

    xv, tv = tile_examples(val_records, L)
    yv = targets_from_truth(tv, ratio)
    n_per_epoch = config.examples_per_epoch or max(1, sum(len(r) for r in train_records) // L)

    root = np.random.SeedSequence(config.seed)
    sched = PlateauScheduler(config.initial_lr, config.lr_decay_factor, config.plateau_patience_epochs, config.min_lr)
    adam = AdamState()
    history = []
    best_loss = np.inf
    best = weights.copy()
    trainable = set(weights.names(trainable_only=True))

    for epoch in range(config.max_epochs):
        rng = np.random.default_rng(root.spawn(1)[0])
        lr = sched.lr
        x, truth = crop_examples(train_records, L, n_per_epoch, rng, aug.crop)
        y = targets_from_truth(truth, ratio)
        x = augment_batch(x, aug, rng).astype(dtype)
        order = rng.permutation(x.shape[0])
        total, count = 0.0, 0
        for i in range(0, len(order), config.batch_size):
            idx = order[i : i + config.batch_size]
            draws = StochasticDraws.draw(rng, len(idx), spec, config.lstm_dropout_rate, config.init_state_scale, dtype)
            try:
                loss, grads, stats = loss_and_grads(weights, x[idx], y[idx], cw, draws)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}", weights=best, history=history) from None
            adam_step(weights, {k: g for k, g in grads.items() if k in trainable}, adam, lr)
            _update_bn_stats(weights, stats, config.bn_momentum)
            total += loss
            count += y[idx].size
        val_loss = evaluate_loss(weights, xv.astype(dtype), yv, cw)
        history.append({"epoch": epoch, "lr": lr, "train_loss": total / count, "val_loss": val_loss})
        improved = val_loss < best_loss
        if improved:
            best_loss = val_loss
            best = weights.copy()
        log.info("epoch %d lr %.3g train %.4f val %.4f%s", epoch, lr, total / count, val_loss, " *" if improved else "")
        sched.step(val_loss)
        if on_epoch_end is not None:
            on_epoch_end(epoch, weights, improved)
    return best, history


def history_csv(history) -> str:
    lines = ["epoch,lr,train_loss,val_loss"]
    for h in history:
        lines.append(f"{h['epoch']}," + ",".join(repr(float(h[k])) for k in ("lr", "train_loss", "val_loss")))
    return "\n".join(lines) + "\n"
