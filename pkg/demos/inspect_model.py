"""Look inside a model: first-layer filter DC gains, channel ordering and the LSTM embedding.

Usage: ``python3 demos/inspect_model.py [model.txt]``.
"""
import sys

import numpy as np

from ppgrhythm.interpret import filter_report, normalize_lstm_signs, order_channels, project_embeddings
from ppgrhythm.model import ModelSpec, forward, init_weights, load_model
from ppgrhythm.signal import downsample_labels
from ppgrhythm.synth import GeneratorConfig, draw_subject, spliced_episode_record


def main(model_path=None):
    weights = load_model(model_path) if model_path else init_weights(ModelSpec(), 0)
    cfg = GeneratorConfig()
    profile = draw_subject(cfg, "demo", np.random.default_rng(5))
    rec = spliced_episode_record(profile, [("NSR", 120.0), ("AFib", 120.0)], cfg.fs_hz, seed=5)

    report = filter_report(weights)
    print("first-layer DC gain (dB):", " ".join(f"{g:6.1f}" for g in report.dc_gain_db))
    print(f"filters with <= -20 dB at DC: {np.mean(report.dc_gain_db <= -20):.0%}")

    probs, traces = forward(weights, rec.samples, capture=["maxpool_1", "maxpool_2", "lstm"])
    for name in ("maxpool_1", "maxpool_2", "lstm"):
        acts = traces[name].activations
        if name == "lstm":
            acts, _ = normalize_lstm_signs(acts)
        order = order_channels(acts, name)
        print(f"{name:10s} optimal channel order {order.permutation} (adjacent cost {order.cost:.3f})")

    proj = project_embeddings(traces["lstm"].activations.T, weights["dense/kernel"], weights["dense/bias"])
    truth = downsample_labels(rec.truth, weights.spec.total_pool).values
    for label in (0, 1):
        pts = proj.points[truth == label]
        print(f"class {label}: mean (y0, y1) = ({pts[:, 0].mean():+.2f}, {pts[:, 1].mean():+.2f}) over {len(pts)} steps")


if __name__ == "__main__":
    main(*sys.argv[1:])
