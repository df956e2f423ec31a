import logging
import math

import numpy as np
import pytest

from ppgrhythm.backprop import TrainingError
from ppgrhythm.config import ConfigError
from ppgrhythm.model import ModelSpec, init_weights
from ppgrhythm.signal import Record
from ppgrhythm.training import (
    AdamState,
    AugmentConfig,
    PlateauScheduler,
    TrainConfig,
    adam_step,
    augment_batch,
    auto_class_weights,
    clamp_probs,
    crop_examples,
    fit,
    history_csv,
    targets_from_truth,
    weighted_bce,
)

from conftest import TINY_SPEC, make_record

IDENTITY_AUG = AugmentConfig(crop=False, scale_range=(1, 1), shift_range=(0, 0), noise_sigma_range=(0, 0))


# --- loss -------------------------------------------------------------------


def test_bce_perfect_prediction():
    y = np.array([0, 1, 1, 0, 1], float)
    loss = weighted_bce(clamp_probs(y), y)
    assert 0 <= loss <= len(y) * -math.log(1 - 1e-7) * (1 + 1e-6)


def test_bce_half():
    assert abs(weighted_bce(np.full(7, 0.5), np.r_[np.ones(3), np.zeros(4)]) - 7 * math.log(2)) < 1e-12
    assert abs(weighted_bce(np.array([0.5]), np.array([1.0]), (1.0, 2.0)) - 2 * math.log(2)) < 1e-12


def test_bce_domain_error():
    with pytest.raises(ValueError):
        weighted_bce(np.array([0.0, 0.5]), np.array([0.0, 1.0]))


def test_auto_weights_invariant_to_duplication():
    labels = [np.array([0, 0, 0, 1]), np.array([1, 0, 0])]
    w = auto_class_weights(labels)
    assert w == auto_class_weights(labels + labels)
    assert w == pytest.approx((7 / 10, 7 / 4))


# --- optimiser and schedule -----------------------------------------------------


def test_adam_first_step():
    w = init_weights(TINY_SPEC, 0)
    before = w["dense/kernel"].copy()
    adam_step(w, {"dense/kernel": np.ones(4)}, AdamState(), lr=1e-3)
    np.testing.assert_allclose(before - w["dense/kernel"], 1e-3 / (1 + 1e-8), rtol=1e-12)


def test_adam_zero_gradient_and_determinism():
    w1, w2 = init_weights(TINY_SPEC, 0), init_weights(TINY_SPEC, 0)
    before = w1.copy()
    adam_step(w1, {k: np.zeros_like(v) for k, v in w1.tensors.items()}, AdamState(), 1e-2)
    for k in w1.names():
        np.testing.assert_array_equal(w1[k], before[k])
    rng = np.random.default_rng(0)
    grads = [{k: rng.normal(size=v.shape) for k, v in w1.tensors.items()} for _ in range(5)]
    s1, s2 = AdamState(), AdamState()
    for g in grads:
        adam_step(w1, g, s1, 1e-2)
        adam_step(w2, g, s2, 1e-2)
    for k in w1.names():
        assert w1[k].tobytes() == w2[k].tobytes()


def test_plateau_example():
    sched = PlateauScheduler(1.0, factor=0.5, patience=2)
    lrs = [sched.step(v) for v in [1.0, 0.9, 0.9, 0.9]]
    # the lr used for epoch k is the value returned after epoch k-1
    assert lrs == [1.0, 1.0, 1.0, 0.5]


def test_plateau_min_lr():
    sched = PlateauScheduler(1.0, factor=0.1, patience=1, min_lr=0.05)
    for _ in range(5):
        sched.step(1.0)
    assert sched.lr == 0.05


def test_config_validation_and_text():
    with pytest.raises(ConfigError):
        TrainConfig(example_len_samples=100)
    with pytest.raises(ConfigError):
        TrainConfig(lr_decay_factor=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(class_weights="1,2,3")
    cfg = TrainConfig(batch_size=4, class_weights="1.0,3.0")
    assert TrainConfig.from_text(cfg.to_text()) == cfg
    with pytest.raises(ConfigError, match="batchsize"):
        TrainConfig.from_text("batchsize=3\n")
    with pytest.raises(ConfigError):
        AugmentConfig(scale_range=(2, 1))


# --- augmentation -----------------------------------------------------------


def test_augment_identity():
    x = np.random.default_rng(0).normal(size=(4, 64))
    np.testing.assert_array_equal(augment_batch(x, IDENTITY_AUG, np.random.default_rng(1)), x)


def test_augment_shift_exact():
    x = np.random.default_rng(0).normal(size=(3, 64))
    aug = AugmentConfig(scale_range=(1, 1), shift_range=(5, 5), noise_sigma_range=(0, 0))
    out = augment_batch(x, aug, np.random.default_rng(0))
    np.testing.assert_allclose(out.mean(axis=1) - x.mean(axis=1), 5.0, atol=1e-12)


def test_augment_noise_level():
    x = np.zeros((10, 10_000))
    aug = AugmentConfig(scale_range=(1, 1), shift_range=(0, 0), noise_sigma_range=(0.1, 0.1))
    out = augment_batch(x, aug, np.random.default_rng(3))
    assert abs(np.std(out - x) - 0.1) <= 0.005


def test_crop_labels_follow_samples():
    n = 500
    rec = Record.from_arrays("a", np.arange(n, dtype=float), (np.arange(n) // 37) % 2, 20.0)
    x, y = crop_examples([rec], 64, 50, np.random.default_rng(0))
    for xs, ys in zip(x, y):
        idx = xs.astype(int)
        assert np.all(np.diff(idx) == 1)
        np.testing.assert_array_equal(ys, (idx // 37) % 2)


def test_crop_skips_short_records(caplog):
    short = make_record(np.zeros(10), subject="short")
    long = make_record(np.zeros(100), subject="long")
    with caplog.at_level(logging.WARNING):
        x, _ = crop_examples([short, long], 64, 5, np.random.default_rng(0))
    assert x.shape == (5, 64)
    assert "short" in caplog.text
    with pytest.raises(ValueError):
        crop_examples([short], 64, 5, np.random.default_rng(0))


def test_targets_from_truth():
    truth = np.array([[1] * 9 + [0] * 7 + [0] * 16])
    np.testing.assert_array_equal(targets_from_truth(truth, 16), [[1, 0]])


# --- fit --------------------------------------------------------------------


def _toy_record(label, n, seed):
    """Constant-amplitude (label 0) or alternating-amplitude (label 1) pulse train."""
    rng = np.random.default_rng(seed)
    period = 16
    beat = np.arange(n) // period
    amp = np.where(beat % 2 == 0, 1.0, 0.4) if label else np.ones(n)
    x = amp * np.exp(-0.5 * (((np.arange(n) % period) - 4) / 1.5) ** 2) + 0.02 * rng.normal(size=n)
    return Record.from_arrays(f"toy{label}_{seed}", x, np.full(n, label), 20.0)


TOY_SPEC = ModelSpec(conv_blocks=((4, 5, 4), (4, 3, 4)), lstm_hidden=8)
TOY_CFG = TrainConfig(example_len_samples=256, batch_size=8, max_epochs=50, initial_lr=1e-2, lstm_dropout_rate=0.0)
TOY_AUG = AugmentConfig(scale_range=(1, 1), shift_range=(0, 0), noise_sigma_range=(0, 0))


def _toy_sets():
    train = [_toy_record(label, 2048, s) for s in range(4) for label in (0, 1)]
    val = [_toy_record(label, 1024, s + 10) for s in range(2) for label in (0, 1)]
    return train, val


def test_fit_separable_toy():
    train, val = _toy_sets()
    _, hist = fit(init_weights(TOY_SPEC, 0), train, val, TOY_CFG, TOY_AUG)
    assert len(hist) == 50
    assert hist[0]["train_loss"] >= 10 * hist[-1]["train_loss"]
    lrs = [h["lr"] for h in hist]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_fit_deterministic_and_zero_epochs():
    train, val = _toy_sets()
    cfg = TrainConfig(example_len_samples=256, batch_size=8, max_epochs=3, seed=4)
    w1, h1 = fit(init_weights(TOY_SPEC, 0), train, val, cfg)
    w2, h2 = fit(init_weights(TOY_SPEC, 0), train, val, cfg)
    assert history_csv(h1) == history_csv(h2)
    for k in w1.names():
        assert w1[k].tobytes() == w2[k].tobytes()
    cfg0 = TrainConfig(example_len_samples=256, max_epochs=0)
    w0, h0 = fit(init_weights(TOY_SPEC, 0), train, val, cfg0)
    assert h0 == [] and history_csv(h0) == "epoch,lr,train_loss,val_loss\n"
    init = init_weights(TOY_SPEC, 0)
    for k in init.names():
        np.testing.assert_array_equal(w0[k], init[k])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fit_non_finite_aborts_with_checkpoint():
    train, val = _toy_sets()
    w = init_weights(TOY_SPEC, 0)
    w.tensors["dense/bias"][0] = np.nan
    with pytest.raises(TrainingError) as info:
        fit(w, train, val, TrainConfig(example_len_samples=256, max_epochs=2))
    assert info.value.history == []
    assert info.value.weights is not None
