import numpy as np
import pytest

from ppgrhythm.synth import (
    GeneratorConfig,
    MorphologyModel,
    NoiseModel,
    RhythmModel,
    draw_subject,
    gen_dataset,
    gen_rr_intervals,
    render_ppg,
    splice_records,
    spliced_episode_record,
)
from ppgrhythm.config import ConfigError

from conftest import make_record


def _cv(x):
    return np.std(x) / np.mean(x)


def test_degenerate_nsr_intervals():
    rr = gen_rr_intervals(RhythmModel("NSR", 60.0, 0.0, 0.0), 10.0, seed=0)
    np.testing.assert_array_equal(rr, np.ones(10))


@pytest.mark.parametrize("seed", range(5))
def test_afib_more_irregular_than_nsr(seed):
    afib = gen_rr_intervals(RhythmModel("AFib", 90.0, 0.24, 0.0), 600.0, seed)
    nsr = gen_rr_intervals(RhythmModel("NSR", 70.0, 0.05, 0.05), 600.0, seed)
    assert len(afib) >= 100 and len(nsr) >= 100
    assert _cv(afib) > _cv(nsr)


def test_rr_determinism_and_coverage():
    r = RhythmModel("AFib", 100.0, 0.2, 0.0)
    a, b = gen_rr_intervals(r, 123.0, 4), gen_rr_intervals(r, 123.0, 4)
    np.testing.assert_array_equal(a, b)
    assert a.sum() >= 123.0 and a[:-1].sum() < 123.0
    with pytest.raises(ValueError):
        gen_rr_intervals(r, 0.0, 4)


def test_rhythm_invariants():
    with pytest.raises(ValueError):
        RhythmModel("AFib", 80.0, 0.10)
    with pytest.raises(ValueError):
        RhythmModel("NSR", 80.0, 0.10)
    with pytest.raises(ValueError):
        RhythmModel("NSR", 250.0, 0.01)


def test_render_periodic_signal():
    fs, rr = 20.0, 0.8
    rec = render_ppg(np.full(50, rr), MorphologyModel(amplitude_jitter=0.0), NoiseModel(), fs, seed=1)
    x = rec.samples.values - rec.samples.values.mean()
    ac = np.correlate(x, x, "full")[x.size - 1 :]
    lag = int(np.argmax(ac[5:40])) + 5
    assert abs(lag - rr * fs) <= 1


def test_render_dc_offset_is_additive():
    rr = np.full(30, 0.9)
    morph = MorphologyModel()
    clean = render_ppg(rr, morph, NoiseModel(), 20.0, seed=5)
    shifted = render_ppg(rr, morph, NoiseModel(dc_offset=1000.0), 20.0, seed=5)
    diff = shifted.samples.values.mean() - clean.samples.values.mean()
    assert abs(diff - 1000.0) <= 1e-9


def test_render_sample_count_and_labels():
    rec = render_ppg(np.full(60, 1.0), MorphologyModel(), NoiseModel(gaussian_sigma=0.05), 20.0, seed=0, label=1)
    assert len(rec) == 1200
    assert np.all(rec.truth.values == 1)
    assert np.all(np.isfinite(rec.samples.values))


def test_splice_zero_crossfade_is_concatenation():
    a = make_record(np.arange(400.0), np.zeros(400))
    b = make_record(np.arange(600.0), np.ones(600))
    out = splice_records([(a, 0, 10), (b, 0, 20)], crossfade_s=0.0)
    assert len(out) == 200 + 400
    assert out.subject_id == "spliced"
    np.testing.assert_array_equal(out.samples.values[:200], a.samples.values[:200])


def test_splice_identity_and_fs_mismatch():
    a = make_record(np.random.default_rng(0).normal(size=100))
    out = splice_records([(a, 0, 5)], crossfade_s=0.5)
    np.testing.assert_array_equal(out.samples.values, a.samples.values)
    b = make_record(np.zeros(100), fs=25.0)
    with pytest.raises(ValueError):
        splice_records([(a, 0, 4), (b, 0, 4)])


def test_splice_zero_crossfade_length_associative():
    recs = [make_record(np.zeros(n)) for n in (40, 60, 100)]
    segs = [(r, 0, len(r) / 20) for r in recs]
    ab = splice_records(segs[:2], 0.0)
    left = splice_records([(ab, 0, len(ab) / 20), segs[2]], 0.0)
    bc = splice_records(segs[1:], 0.0)
    right = splice_records([segs[0], (bc, 0, len(bc) / 20)], 0.0)
    assert len(left) == len(right) == 200


def _positive_runs(y):
    d = np.diff(np.r_[0, np.asarray(y, int), 0])
    starts, ends = np.flatnonzero(d == 1), np.flatnonzero(d == -1)
    return list(zip(starts, ends))


def test_spliced_episode_single_run():
    profile = draw_subject(GeneratorConfig(), "x", np.random.default_rng(0))
    rec = spliced_episode_record(profile, [("NSR", 300), ("AFib", 60), ("NSR", 300)], 20.0, seed=2)
    runs = _positive_runs(rec.truth.values)
    assert len(runs) == 1
    length_s = (runs[0][1] - runs[0][0]) / 20.0
    assert abs(length_s - 60.0) <= 0.5
    assert len(rec) == 660 * 20


def test_gen_dataset_ids_and_determinism():
    cfg = GeneratorConfig(record_duration_s=60.0)
    ds = gen_dataset(cfg, 20, seed=1)
    assert len(set(ds.subject_ids)) == 20
    again = gen_dataset(cfg, 20, seed=1)
    for r1, r2 in zip(ds.records, again.records):
        np.testing.assert_array_equal(r1.samples.values, r2.samples.values)
    for r in ds.records:
        assert len(r.truth) == len(r.samples)
        assert np.all(np.isfinite(r.samples.values))


def test_gen_dataset_no_afib():
    ds = gen_dataset(GeneratorConfig(record_duration_s=30.0, afib_fraction=0.0), 8, seed=0)
    assert all(np.all(r.truth.values == 0) for r in ds.records)


def test_gen_dataset_positive_fraction():
    cfg = GeneratorConfig(record_duration_s=120.0)
    ds = gen_dataset(cfg, 40, seed=3)
    y = np.concatenate([r.truth.values for r in ds.records])
    assert abs(y.mean() - cfg.afib_fraction) <= 0.05


def test_generator_config_text_round_trip():
    cfg = GeneratorConfig(record_duration_s=99.0, nsr_bpm=(55.0, 66.0))
    assert GeneratorConfig.from_text(cfg.to_text()) == cfg
    with pytest.raises(ConfigError, match="bogus"):
        GeneratorConfig.from_text("bogus=1\n")
