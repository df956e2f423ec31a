"""Evaluation of probability sequences: ROC/AUC, operating points, Brier score,
reliability bins and the minimum-detectable-episode harness."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class UndefinedMetricError(ValueError):
    """Raised when a metric needs both classes and only one is present."""


@dataclass
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


@dataclass
class OperatingPoint:
    threshold: float
    sensitivity: float
    specificity: float
    fpr: float
    fnr: float
    tp: int
    fp: int
    tn: int
    fn: int


def _check(probs, labels):
    p = np.asarray(probs, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if p.shape != y.shape:
        raise ValueError(f"{p.size} probabilities vs {y.size} labels")
    return p, (y > 0.5).astype(np.int64)


def roc(probs, labels) -> RocCurve:
    """ROC over every distinct score, positives predicted at ``p >= threshold``.

    The curve starts at ``(0, 0)`` (threshold ``+inf``) and ends at ``(1, 1)``;
    the AUC is the trapezoidal area, which counts tied scores as half-correct.
    """
    p, y = _check(probs, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC needs both positive and negative labels")
    order = np.argsort(-p, kind="mergesort")
    ps, ys = p[order], y[order]
    # last index of each run of equal scores
    ends = np.r_[np.flatnonzero(np.diff(ps) != 0), ps.size - 1]
    tp = np.cumsum(ys)[ends]
    fp = (ends + 1) - tp
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thresholds = np.r_[np.inf, ps[ends]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    return RocCurve(thresholds, fpr, tpr, auc)


def operating_point(probs, labels, threshold=0.5) -> OperatingPoint:
    p, y = _check(probs, labels)
    pred = p >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    tn = int(np.sum(~pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    sens = tp / (tp + fn) if tp + fn else float("nan")
    spec = tn / (tn + fp) if tn + fp else float("nan")
    return OperatingPoint(float(threshold), sens, spec, 1 - spec, 1 - sens, tp, fp, tn, fn)


def brier(probs, labels) -> float:
    p, y = _check(probs, labels)
    return float(np.mean((p - y) ** 2))


def reliability_bins(probs, labels, n_bins=10):
    """Equal-width bins on [0, 1]: arrays ``(mean_prob, empirical_rate, count)``; empty bins give NaN and 0."""
    p, y = _check(probs, labels)
    idx = np.minimum((p * n_bins).astype(int), n_bins - 1)
    count = np.bincount(idx, minlength=n_bins)
    sum_p = np.bincount(idx, weights=p, minlength=n_bins)
    sum_y = np.bincount(idx, weights=y, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        return sum_p / count, sum_y / count, count


# ---------------------------------------------------------------------------
# episode harness


@dataclass
class EpisodeResult:
    duration_s: float
    detected: bool
    delay_s: float | None


@dataclass
class EpisodeReport:
    results: list = field(default_factory=list)
    min_detectable_s: float | None = None
    monotone: bool = True


def output_times(n_outputs, fs_hz=20.0, ratio=16, start_s=0.0):
    """Causal convention: output ``j`` is stamped at the end of its input window."""
    return start_s + (np.arange(n_outputs) + 1) * ratio / fs_hz


def detect_episode(probs, truth, fs_hz, ratio=16, threshold=0.5, tolerance_s=5.0):
    """First output at or above ``threshold`` inside the (single) positive run of ``truth``.

    The window is ``(start, end + tolerance]`` in output time. Returns
    ``(detected, delay_s)``; a record without positive labels is never detected.
    """
    pos = np.flatnonzero(np.asarray(truth) > 0)
    if pos.size == 0:
        return False, None
    start = pos[0] / fs_hz
    end = (pos[-1] + 1) / fs_hz
    tau = output_times(len(probs), fs_hz, ratio)
    inside = (tau > start) & (tau <= end + tolerance_s)
    hits = np.flatnonzero(inside & (np.asarray(probs) >= threshold))
    if hits.size == 0:
        return False, None
    return True, float(tau[hits[0]] - start)


def summarize_detections(results) -> EpisodeReport:
    detected = [r.detected for r in results]
    # monotone: once detected, every longer episode is detected too
    first = next((i for i, d in enumerate(detected) if d), None)
    monotone = first is None or all(detected[first:])
    mins = None
    for i in range(len(results) - 1, -1, -1):
        if not detected[i]:
            break
        mins = results[i].duration_s
    return EpisodeReport(list(results), mins, monotone)


def min_detectable_episode(
    weights,
    generator_config,
    durations,
    threshold=0.5,
    seed=0,
    pre_s=300.0,
    post_s=300.0,
    tolerance_s=5.0,
    chunk_size=None,
) -> EpisodeReport:
    """Splice NSR / AFib(d) / NSR records for each duration ``d`` and stream them through the model.

    All durations share one synthetic subject (drawn from ``generator_config``
    with ``seed``) so differences come from the episode length alone.
    """
    from .stream import stream_record
    from .synth import draw_subject, spliced_episode_record

    durations = [float(d) for d in durations]
    if any(d < 0 for d in durations) or durations != sorted(durations):
        raise ValueError("durations must be non-negative and ascending")
    rng = np.random.default_rng(seed)
    profile = draw_subject(generator_config, "episode", rng)
    rec_seed = int(rng.integers(2**31))
    fs = generator_config.fs_hz
    ratio = weights.spec.total_pool
    results = []
    for d in durations:
        plan = [("NSR", pre_s), ("AFib", d), ("NSR", post_s)]
        rec = spliced_episode_record(profile, plan, fs, rec_seed, generator_config.splice_crossfade_s)
        probs = stream_record(weights, rec.samples.values, chunk_size)
        det, delay = detect_episode(probs, rec.truth.values, fs, ratio, threshold, tolerance_s)
        results.append(EpisodeResult(d, det, delay))
    return summarize_detections(results)


# ---------------------------------------------------------------------------
# CSV reports


def roc_csv(curve: RocCurve) -> str:
    rows = ["threshold,fpr,tpr"]
    rows += [f"{t!r},{f!r},{p!r}" for t, f, p in zip(curve.thresholds.tolist(), curve.fpr.tolist(), curve.tpr.tolist())]
    return "\n".join(rows) + "\n"


def summary_csv(auc, brier_score, points) -> str:
    rows = ["threshold,auc,brier,sensitivity,specificity,fpr,fnr,tp,fp,tn,fn"]
    for op in points:
        rows.append(
            ",".join(repr(float(v)) for v in (op.threshold, auc, brier_score, op.sensitivity, op.specificity, op.fpr, op.fnr))
            + f",{op.tp},{op.fp},{op.tn},{op.fn}"
        )
    return "\n".join(rows) + "\n"


def episodes_csv(report: EpisodeReport) -> str:
    rows = ["duration_s,detected,delay_s"]
    for r in report.results:
        delay = "" if r.delay_s is None else repr(float(r.delay_s))
        rows.append(f"{float(r.duration_s)!r},{int(r.detected)},{delay}")
    return "\n".join(rows) + "\n"
