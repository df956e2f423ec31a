"""Synthetic PPG-like records for NSR and AFib rhythms, and rhythm splicing.

Pulses are two Gaussians (systolic and dicrotic). NSR beat intervals are a
respiratory-modulated base period with a little jitter; AFib intervals are
i.i.d. log-normal. None of the default parameters are physiological ground truth.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, dump_config, parse_config_text
from .signal import Dataset, LabelSeries, Record, SampleSeries

NSR_MAX_CV = 0.08
AFIB_MIN_CV = 0.15


@dataclass(frozen=True)
class RhythmModel:
    kind: str = "NSR"
    mean_bpm: float = 70.0
    rr_variability: float = 0.03
    respiratory_mod_depth: float = 0.05
    respiratory_hz: float = 0.25
    nsr_max_cv: float = NSR_MAX_CV
    afib_min_cv: float = AFIB_MIN_CV

    def __post_init__(self):
        if self.kind not in ("NSR", "AFib"):
            raise ValueError(f"unknown rhythm kind {self.kind!r}")
        if not 30 <= self.mean_bpm <= 220:
            raise ValueError("mean_bpm must lie in [30, 220]")
        if self.rr_variability < 0:
            raise ValueError("rr_variability must be non-negative")
        if not 0 <= self.respiratory_mod_depth <= 1:
            raise ValueError("respiratory_mod_depth must lie in [0, 1]")
        if self.afib_min_cv <= self.nsr_max_cv:
            raise ValueError("AFib variability threshold must exceed the NSR one")
        if self.kind == "AFib" and self.rr_variability < self.afib_min_cv:
            raise ValueError(f"AFib requires rr_variability >= {self.afib_min_cv}")
        if self.kind == "NSR" and self.rr_variability > self.nsr_max_cv:
            raise ValueError(f"NSR requires rr_variability <= {self.nsr_max_cv}")

    @property
    def label(self) -> int:
        return int(self.kind == "AFib")


@dataclass(frozen=True)
class MorphologyModel:
    systolic_width_s: float = 0.10
    dicrotic_delay_s: float = 0.30
    dicrotic_ratio: float = 0.4
    amplitude_jitter: float = 0.05
    amplitude: float = 1.0

    def __post_init__(self):
        if self.systolic_width_s <= 0 or self.dicrotic_delay_s <= 0:
            raise ValueError("morphology widths and delays must be positive")
        if not 0 <= self.dicrotic_ratio < 1:
            raise ValueError("dicrotic_ratio must lie in [0, 1)")
        if self.amplitude_jitter < 0 or self.amplitude <= 0:
            raise ValueError("amplitude parameters must be non-negative")


@dataclass(frozen=True)
class NoiseModel:
    baseline_wander_amp: float = 0.0
    baseline_wander_hz: float = 0.1
    gaussian_sigma: float = 0.0
    dc_offset: float = 0.0
    dropout_prob_per_s: float = 0.0
    dropout_len_s: float = 1.0

    def __post_init__(self):
        if self.baseline_wander_amp < 0 or self.gaussian_sigma < 0:
            raise ValueError("noise amplitudes must be non-negative")
        if not 0 <= self.dropout_prob_per_s <= 1:
            raise ValueError("dropout_prob_per_s must lie in [0, 1]")


def gen_rr_intervals(rhythm: RhythmModel, duration_s: float, seed: int) -> np.ndarray:
    """Beat-to-beat intervals in seconds whose sum first reaches ``duration_s``."""
    if not duration_s > 0:
        raise ValueError("duration_s must be positive")
    rng = np.random.default_rng(seed)
    mean_rr = 60.0 / rhythm.mean_bpm
    n_max = int(np.ceil(duration_s / mean_rr * 2)) + 16
    if rhythm.kind == "AFib":
        sigma2 = np.log1p(rhythm.rr_variability**2)
        mu = np.log(mean_rr) - sigma2 / 2
        rr = rng.lognormal(mu, np.sqrt(sigma2), size=n_max)
        # rare very long draws would produce flat gaps; keep a plausible band
        rr = np.clip(rr, 0.25, 2.5)
    else:
        phase = rng.uniform(0, 2 * np.pi)
        rr = np.empty(n_max)
        t = 0.0
        jitter = rng.standard_normal(n_max) * rhythm.rr_variability * mean_rr
        for k in range(n_max):
            mod = rhythm.respiratory_mod_depth * np.sin(2 * np.pi * rhythm.respiratory_hz * t + phase)
            rr[k] = max(mean_rr * (1.0 + mod) + jitter[k], 0.2)
            t += rr[k]
    csum = np.cumsum(rr)
    while csum[-1] < duration_s:
        rr = np.concatenate([rr, rr])
        csum = np.cumsum(rr)
    n = int(np.searchsorted(csum, duration_s, side="left")) + 1
    return rr[:n]


def render_ppg(
    rr,
    morph: MorphologyModel,
    noise: NoiseModel,
    fs_hz: float = 20.0,
    seed: int = 0,
    label: int = 0,
    subject_id: str = "synthetic",
) -> Record:
    """Render one pulse per interval in ``rr`` and add the noise model."""
    rr = np.asarray(rr, dtype=np.float64)
    if not fs_hz > 0:
        raise ValueError("fs_hz must be positive")
    if rr.size == 0 or np.any(rr <= 0):
        raise ValueError("rr must be a non-empty sequence of positive intervals")
    rng = np.random.default_rng(seed)
    total = float(rr.sum())
    n = int(round(total * fs_hz))
    t = np.arange(n) / fs_hz
    clean = _pulse_train(rr, morph, t, rng)
    x = clean + _noise(noise, t, fs_hz, rng)
    if noise.dropout_prob_per_s > 0:
        x = _apply_dropouts(x, noise, fs_hz, rng)
    return Record(subject_id, SampleSeries(x, fs_hz), LabelSeries(np.full(n, label, np.int8), fs_hz))


def _pulse_train(rr, morph: MorphologyModel, t, rng) -> np.ndarray:
    out = np.zeros_like(t)
    fs = 1.0 / (t[1] - t[0]) if t.size > 1 else 1.0
    onsets = np.concatenate([[0.0], np.cumsum(rr)[:-1]])
    mean_rr = rr.mean()
    amp = morph.amplitude * (1 + morph.amplitude_jitter * rng.standard_normal(rr.size))
    # longer filling time gives a stronger beat
    amp *= np.sqrt(rr / mean_rr)
    w1 = morph.systolic_width_s
    w2 = 1.5 * w1
    half = int(np.ceil(6 * max(w1, w2) * fs)) + 1
    for onset, a in zip(onsets, amp):
        p1 = onset + 2 * w1
        p2 = p1 + morph.dicrotic_delay_s
        lo = max(int((p1 - 6 * w1) * fs), 0)
        hi = min(int(p2 * fs) + half, t.size)
        if lo >= hi:
            continue
        seg = t[lo:hi]
        out[lo:hi] += a * (
            np.exp(-0.5 * ((seg - p1) / w1) ** 2)
            + morph.dicrotic_ratio * np.exp(-0.5 * ((seg - p2) / w2) ** 2)
        )
    return out


def _noise(noise: NoiseModel, t, fs_hz, rng) -> np.ndarray:
    phase = rng.uniform(0, 2 * np.pi)
    wander = noise.baseline_wander_amp * np.sin(2 * np.pi * noise.baseline_wander_hz * t + phase)
    white = noise.gaussian_sigma * rng.standard_normal(t.size) if noise.gaussian_sigma > 0 else 0.0
    return noise.dc_offset + wander + white


def _apply_dropouts(x, noise: NoiseModel, fs_hz, rng) -> np.ndarray:
    """Hold the signal flat for short stretches, mimicking sensor dropouts."""
    x = x.copy()
    n_sec = int(x.size / fs_hz)
    events = np.flatnonzero(rng.random(n_sec) < noise.dropout_prob_per_s)
    for sec in events:
        start = int(sec * fs_hz)
        length = max(1, int(rng.uniform(0.5, 1.5) * noise.dropout_len_s * fs_hz))
        x[start : start + length] = x[start]
    return x


def splice_records(segments, crossfade_s: float = 0.5, subject_id: str = "spliced") -> Record:
    """Concatenate ``(record, start_s, end_s)`` regions with a linear cross-fade.

    Consecutive regions overlap by ``crossfade_s``. Inside an overlap the first
    half keeps the outgoing label and the second half the incoming one.
    """
    if not segments:
        raise ValueError("no segments to splice")
    fs = segments[0][0].fs
    parts = []
    for rec, start_s, end_s in segments:
        if rec.fs != fs:
            raise ValueError("all spliced records must share one sample rate")
        i0 = int(round(start_s * fs))
        i1 = int(round(end_s * fs))
        if not 0 <= i0 < i1 <= len(rec):
            raise ValueError(f"range [{start_s}, {end_s}] s is outside the record")
        parts.append((rec.samples.values[i0:i1], rec.truth.values[i0:i1]))
    n_fade = int(round(crossfade_s * fs))
    x, y = parts[0][0].copy(), parts[0][1].copy()
    for xs, ys in parts[1:]:
        k = min(n_fade, x.size, xs.size)
        if k > 0:
            w = (np.arange(k) + 0.5) / k
            blended = x[-k:] * (1 - w) + xs[:k] * w
            labels = np.where(w < 0.5, y[-k:], ys[:k])
            x = np.concatenate([x[:-k], blended, xs[k:]])
            y = np.concatenate([y[:-k], labels, ys[k:]])
        else:
            x = np.concatenate([x, xs])
            y = np.concatenate([y, ys])
    src = segments[0][0].source_tag
    return Record(subject_id, SampleSeries(x, fs), LabelSeries(y.astype(np.int8), fs), src)


# ---------------------------------------------------------------------------
# dataset generation


@dataclass
class GeneratorConfig:
    fs_hz: float = 20.0
    record_duration_s: float = 1200.0
    afib_fraction: float = 0.45
    spliced_fraction: float = 0.7
    splice_afib_share: float = 0.5
    splice_max_episodes: int = 2
    splice_crossfade_s: float = 0.5
    nsr_bpm: tuple = (50.0, 100.0)
    afib_bpm: tuple = (65.0, 130.0)
    nsr_cv: tuple = (0.01, 0.05)
    afib_cv: tuple = (0.18, 0.30)
    resp_depth: tuple = (0.0, 0.08)
    resp_hz: tuple = (0.15, 0.35)
    amplitude: tuple = (0.5, 1.5)
    amplitude_jitter: tuple = (0.02, 0.10)
    systolic_width_s: tuple = (0.07, 0.13)
    dicrotic_delay_s: tuple = (0.22, 0.38)
    dicrotic_ratio: tuple = (0.15, 0.6)
    dc_offset: tuple = (-0.5, 0.5)
    wander_amp: tuple = (0.0, 0.3)
    wander_hz: tuple = (0.03, 0.25)
    noise_sigma: tuple = (0.01, 0.08)
    dropout_prob_per_s: float = 0.002

    def __post_init__(self):
        if not 0 <= self.afib_fraction <= 1 or not 0 <= self.spliced_fraction <= 1:
            raise ConfigError("afib_fraction and spliced_fraction must lie in [0, 1]")
        if not 0 < self.splice_afib_share < 1:
            raise ConfigError("splice_afib_share must lie in (0, 1)")
        if self.record_duration_s <= 0 or self.fs_hz <= 0:
            raise ConfigError("record_duration_s and fs_hz must be positive")

    @classmethod
    def from_file(cls, path) -> "GeneratorConfig":
        return cls.from_text(Path(path).read_text())

    @classmethod
    def from_text(cls, text: str) -> "GeneratorConfig":
        return cls(**parse_config_text(text, cls))

    def to_text(self) -> str:
        return dump_config(self)


@dataclass(frozen=True)
class SubjectProfile:
    """Morphology and noise parameters held fixed for one subject."""

    subject_id: str
    morph: MorphologyModel
    noise: NoiseModel
    nsr: RhythmModel
    afib: RhythmModel


def _u(rng, lo_hi):
    lo, hi = lo_hi
    return float(rng.uniform(lo, hi))


def draw_subject(config: GeneratorConfig, subject_id: str, rng) -> SubjectProfile:
    morph = MorphologyModel(
        systolic_width_s=_u(rng, config.systolic_width_s),
        dicrotic_delay_s=_u(rng, config.dicrotic_delay_s),
        dicrotic_ratio=_u(rng, config.dicrotic_ratio),
        amplitude_jitter=_u(rng, config.amplitude_jitter),
        amplitude=_u(rng, config.amplitude),
    )
    noise = NoiseModel(
        baseline_wander_amp=_u(rng, config.wander_amp),
        baseline_wander_hz=_u(rng, config.wander_hz),
        gaussian_sigma=_u(rng, config.noise_sigma),
        dc_offset=_u(rng, config.dc_offset),
        dropout_prob_per_s=config.dropout_prob_per_s,
    )
    nsr = RhythmModel(
        "NSR",
        _u(rng, config.nsr_bpm),
        _u(rng, config.nsr_cv),
        _u(rng, config.resp_depth),
        _u(rng, config.resp_hz),
    )
    afib = RhythmModel("AFib", _u(rng, config.afib_bpm), _u(rng, config.afib_cv), 0.0)
    return SubjectProfile(subject_id, morph, noise, nsr, afib)


def render_rhythm(profile: SubjectProfile, kind: str, duration_s: float, fs_hz: float, seed: int) -> Record:
    rhythm = profile.afib if kind == "AFib" else profile.nsr
    ss = np.random.SeedSequence(seed)
    s_rr, s_render = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    rr = gen_rr_intervals(rhythm, duration_s, s_rr)
    rec = render_ppg(rr, profile.morph, profile.noise, fs_hz, s_render, rhythm.label, profile.subject_id)
    n = int(round(duration_s * fs_hz))
    return Record(
        rec.subject_id,
        SampleSeries(rec.samples.values[:n], fs_hz),
        LabelSeries(rec.truth.values[:n], fs_hz),
    )


def spliced_episode_record(
    profile: SubjectProfile,
    plan,
    fs_hz: float,
    seed: int,
    crossfade_s: float = 0.5,
) -> Record:
    """Render a record following ``plan``: a list of ``(kind, duration_s)`` pieces.

    Each piece is cut from its own rendering; pieces after the first get an extra
    ``crossfade_s`` so the spliced total equals the planned duration.
    """
    ss = np.random.SeedSequence(seed)
    seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(len(plan))]
    segments = []
    for i, ((kind, dur), s) in enumerate(zip(plan, seeds)):
        if dur <= 0:
            continue
        extra = crossfade_s if segments else 0.0
        rec = render_rhythm(profile, kind, dur + extra, fs_hz, s)
        segments.append((rec, 0.0, len(rec) / fs_hz))
    return splice_records(segments, crossfade_s, profile.subject_id)


def gen_dataset(config: GeneratorConfig, n_subjects: int, seed: int, prefix: str = "S") -> Dataset:
    """One record per subject: pure NSR, pure AFib, or NSR with spliced AFib episodes.

    The kind counts are chosen so the expected positive-label fraction matches
    ``config.afib_fraction``.
    """
    if n_subjects < 1:
        raise ValueError("n_subjects must be at least 1")
    rng = np.random.default_rng(seed)
    n_spliced = int(round(n_subjects * config.spliced_fraction))
    n_spliced = min(n_spliced, n_subjects)
    pure_afib = (config.afib_fraction - config.spliced_fraction * config.splice_afib_share) * n_subjects
    n_afib = int(np.clip(round(pure_afib), 0, n_subjects - n_spliced))
    if config.afib_fraction == 0:
        n_spliced = n_afib = 0
    kinds = ["AFib"] * n_afib + ["spliced"] * n_spliced + ["NSR"] * (n_subjects - n_afib - n_spliced)
    kinds = [kinds[i] for i in rng.permutation(n_subjects)]
    width = max(3, len(str(n_subjects - 1)))
    dur = config.record_duration_s
    records = []
    for i, kind in enumerate(kinds):
        sid = f"{prefix}{i:0{width}d}"
        profile = draw_subject(config, sid, rng)
        rec_seed = int(rng.integers(2**31))
        if kind == "spliced":
            plan = _episode_plan(config, rng)
            rec = spliced_episode_record(profile, plan, config.fs_hz, rec_seed, config.splice_crossfade_s)
        else:
            rec = render_rhythm(profile, kind, dur, config.fs_hz, rec_seed)
        records.append(rec)
    return Dataset(records)


def _episode_plan(config: GeneratorConfig, rng):
    """NSR/AFib alternation with ``splice_afib_share`` of the time in AFib."""
    dur = config.record_duration_s
    n_ep = int(rng.integers(1, config.splice_max_episodes + 1))
    afib_total = config.splice_afib_share * dur
    nsr_total = dur - afib_total
    afib_parts = afib_total * _dirichlet_split(rng, n_ep)
    nsr_parts = nsr_total * _dirichlet_split(rng, n_ep + 1)
    plan = []
    for k in range(n_ep):
        plan.append(("NSR", float(nsr_parts[k])))
        plan.append(("AFib", float(afib_parts[k])))
    plan.append(("NSR", float(nsr_parts[-1])))
    return plan


def _dirichlet_split(rng, k):
    # bounded away from zero so each piece is at least a few seconds long
    w = 0.5 + rng.random(k)
    return w / w.sum()
