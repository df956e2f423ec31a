"""Stream a spliced NSR -> AFib -> NSR record sample by sample and report the detection.

Usage: ``python3 demos/stream_episode.py [model.txt]``; without a model file an
untrained network is used, which shows the mechanics but not a useful detection.
"""
import sys

import numpy as np

from ppgrhythm.metrics import detect_episode, output_times
from ppgrhythm.model import ModelSpec, forward, init_weights, load_model
from ppgrhythm.stream import StreamState
from ppgrhythm.synth import GeneratorConfig, draw_subject, spliced_episode_record


def main(model_path=None):
    weights = load_model(model_path) if model_path else init_weights(ModelSpec(), 0)
    cfg = GeneratorConfig()
    profile = draw_subject(cfg, "demo", np.random.default_rng(3))
    rec = spliced_episode_record(profile, [("NSR", 60.0), ("AFib", 60.0), ("NSR", 60.0)], cfg.fs_hz, seed=3)

    state = StreamState(weights)
    print(f"streaming delay: {state.delay} samples ({state.delay / rec.fs:.2f} s)")
    emitted = []
    for value in rec.samples.values:  # one sample at a time, as a sensor would deliver them
        emitted.extend(state.push([value]))
    emitted.extend(state.flush())
    probs = np.array(emitted)

    batch, _ = forward(weights, rec.samples)
    print(f"{len(probs)} outputs; max |stream - batch| = {np.max(np.abs(probs - batch.values)):.2e}")

    times = output_times(len(probs), rec.fs, weights.spec.total_pool)
    for t, p in list(zip(times, probs))[::10]:
        bar = "#" * int(round(40 * p))
        print(f"{t:7.1f}s {p:5.3f} {bar}")
    detected, delay = detect_episode(probs, rec.truth.values, rec.fs, weights.spec.total_pool)
    print(f"60 s episode detected: {detected}" + (f" after {delay:.1f} s" if detected else ""))


if __name__ == "__main__":
    main(*sys.argv[1:])
