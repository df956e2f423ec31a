"""Generate a small synthetic cohort, train briefly and evaluate on held-out subjects.

A minute-scale run of the same pipeline the acceptance suite exercises at full
desk scale (26 subjects x 20 min).  Usage: ``python3 demos/train_small.py [out_dir]``.
"""
import sys
from pathlib import Path

import numpy as np

from ppgrhythm.metrics import brier, operating_point, roc
from ppgrhythm.model import ModelSpec, count_params, forward, init_weights, save_model
from ppgrhythm.signal import downsample_labels, split_by_subject
from ppgrhythm.synth import GeneratorConfig, gen_dataset
from ppgrhythm.training import AugmentConfig, TrainConfig, fit, history_csv


def main(out_dir="demo_out"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    # 14 subjects of 10 minutes: 8 train, 3 validation, 3 test
    data = gen_dataset(GeneratorConfig(record_duration_s=600.0), n_subjects=14, seed=7)
    data = split_by_subject(data, (8 / 14, 3 / 14), seed=7)
    train, val, test = (data.subset(s).records for s in ("train", "validation", "test"))
    print(f"{len(train)} train / {len(val)} validation / {len(test)} test subjects")

    spec = ModelSpec()
    print(f"default model: {count_params(spec)} trainable parameters")
    config = TrainConfig(max_epochs=100, plateau_patience_epochs=10, seed=7)
    weights, history = fit(init_weights(spec, config.seed), train, val, config, AugmentConfig())
    for row in history[::20]:
        print(f"epoch {row['epoch']:3d}  lr {row['lr']:.1e}  train {row['train_loss']:.3f}  val {row['val_loss']:.3f}")

    probs, labels = [], []
    for rec in test:
        p, _ = forward(weights, rec.samples)
        probs.append(p.values)
        labels.append(downsample_labels(rec.truth, spec.total_pool).values)
    p, y = np.concatenate(probs), np.concatenate(labels)
    op = operating_point(p, y, 0.5)
    print(f"test AUC {roc(p, y).auc:.4f}  Brier {brier(p, y):.4f}  "
          f"sensitivity {op.sensitivity:.3f}  specificity {op.specificity:.3f}")

    save_model(weights, out / "model.txt")
    (out / "history.csv").write_text(history_csv(history))
    print(f"model written to {out / 'model.txt'}")


if __name__ == "__main__":
    main(*sys.argv[1:])
