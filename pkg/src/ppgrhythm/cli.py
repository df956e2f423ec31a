"""``ppgrhythm`` command: generate, train, eval, stream and inspect.

Exit codes: 0 success, 1 training failure, 2 usage/config error, 3 undefined
metric, 4 data-integrity error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .backprop import TrainingError
from .config import ConfigError
from .interpret import (
    embedding_csv,
    filter_report,
    filters_csv,
    normalize_lstm_signs,
    order_channels,
    ordering_csv,
    project_embeddings,
    subsample_for_display,
)
from .metrics import (
    UndefinedMetricError,
    brier,
    episodes_csv,
    min_detectable_episode,
    operating_point,
    output_times,
    roc,
    roc_csv,
    summary_csv,
)
from .model import ModelFormatError, ModelSpec, forward, init_weights, load_model, save_model
from .signal import (
    RecordError,
    _atomic_write,
    downsample_labels,
    load_dataset,
    load_record,
    save_record,
    split_by_subject,
    write_splits,
)
from .stream import StreamError, StreamState
from .synth import GeneratorConfig, gen_dataset
from .training import AugmentConfig, TrainConfig, fit, history_csv

log = logging.getLogger("ppgrhythm")

EXIT_OK, EXIT_TRAIN, EXIT_USAGE, EXIT_METRIC, EXIT_DATA = 0, 1, 2, 3, 4
DEFAULT_LAYERS = ("maxpool_1", "maxpool_2", "lstm")
DEFAULT_EPISODES = (5.0, 10.0, 20.0, 50.0, 100.0, 200.0)
DTYPES = {"f32": np.float32, "f64": np.float64}


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    argv: list
    config_paths: list
    seed: int
    precision: str
    tool_version: str = __version__
    started_utc: str = field(default_factory=lambda: time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()))

    def write(self, out_dir: Path) -> Path:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "manifest.json"
        _atomic_write(path, (json.dumps(asdict(self), indent=2, sort_keys=True) + "\n").encode())
        return path


def write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(path, text.encode())
    return path


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _manifest(args, config_paths, seed):
    return RunManifest(args.command, list(args.argv), [str(p) for p in config_paths if p], int(seed), args.precision)


def _load_model(args):
    return load_model(args.model, DTYPES[args.precision])


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    config = GeneratorConfig.from_file(args.config) if args.config else GeneratorConfig()
    seed = 0 if args.seed is None else args.seed
    out = Path(args.out)
    _manifest(args, [args.config], seed).write(out)
    ds = gen_dataset(config, args.subjects, seed)
    fractions = _floats(args.split)
    if len(fractions) != 2:
        raise UsageError("--split takes two fractions: train,validation")
    ds = split_by_subject(ds, fractions, seed)
    suffix = ".bin" if args.binary else ".csv"
    for rec in ds.records:
        save_record(rec, out / f"{rec.subject_id}{suffix}")
    write_splits(ds.assignment, out)
    write_text(out / "generator.cfg", config.to_text())
    log.info("wrote %d records to %s", len(ds), out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _load_split(data_dir, seed):
    ds = load_dataset(data_dir)
    if not ds.records:
        raise UsageError(f"no record files in {data_dir}")
    if not ds.assignment:
        ds = split_by_subject(ds, (0.8, 0.2), seed)
    return ds


def cmd_train(args) -> int:
    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    aug = AugmentConfig.from_text(Path(args.augment).read_text()) if args.augment else AugmentConfig()
    if args.seed is not None:
        config.seed = args.seed
    if args.max_epochs is not None:
        config.max_epochs = args.max_epochs
    spec = ModelSpec.from_dict(json.loads(Path(args.model_spec).read_text())) if args.model_spec else ModelSpec()
    data_dir = Path(args.data)
    if not data_dir.is_dir():
        raise UsageError(f"data directory {data_dir} does not exist")
    out = Path(args.out)
    _manifest(args, [args.config, args.augment, args.model_spec], config.seed).write(out)
    write_text(out / "train.cfg", config.to_text())
    write_text(out / "augment.cfg", aug.to_text())

    ds = _load_split(data_dir, config.seed)
    train, val = ds.subset("train").records, ds.subset("validation").records
    if not train or not val:
        raise UsageError("training needs at least one train and one validation subject")
    weights = init_weights(spec, config.seed).astype(DTYPES[args.precision])
    ckpt = out / "checkpoints"
    ckpt.mkdir(parents=True, exist_ok=True)

    def on_epoch_end(epoch, w, improved):
        if improved:
            save_model(w, ckpt / "best.txt")
        if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            save_model(w, ckpt / f"epoch_{epoch + 1:04d}.txt")

    try:
        best, history = fit(weights, train, val, config, aug, on_epoch_end)
    except TrainingError as exc:
        if exc.weights is not None:
            save_model(exc.weights, out / "model.txt")
        write_text(out / "history.csv", history_csv(exc.history or []))
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    save_model(best, out / "model.txt")
    write_text(out / "history.csv", history_csv(history))
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def predict_record(weights, record) -> np.ndarray:
    """Output-rate probabilities for one record (batch inference)."""
    probs, _ = forward(weights, record.samples)
    return probs.values


def cmd_eval(args) -> int:
    weights = _load_model(args)
    thresholds = _floats(args.thresholds)
    out = Path(args.out)
    seed = 0 if args.seed is None else args.seed
    _manifest(args, [args.generator_config], seed).write(out)
    data_dir = Path(args.data)
    if not data_dir.is_dir():
        raise UsageError(f"data directory {data_dir} does not exist")
    ds = load_dataset(data_dir)
    if ds.assignment and args.split != "all":
        ds = ds.subset(args.split)
    if not ds.records:
        raise UsageError(f"no records to evaluate in {data_dir} (split {args.split!r})")
    ratio = weights.spec.total_pool
    probs, labels = [], []
    for rec in ds.records:
        p = np.asarray(predict_record(weights, rec), dtype=np.float64)
        y = downsample_labels(rec.truth, ratio).values
        probs.append(p[: len(y)])
        labels.append(y[: len(p)])
    p, y = np.concatenate(probs), np.concatenate(labels)
    curve = roc(p, y)
    b = brier(p, y)
    write_text(out / "roc.csv", roc_csv(curve))
    write_text(out / "summary.csv", summary_csv(curve.auc, b, [operating_point(p, y, t) for t in thresholds]))
    durations = _floats(args.episode_durations)
    if durations:
        gen = GeneratorConfig.from_file(args.generator_config) if args.generator_config else GeneratorConfig()
        report = min_detectable_episode(weights, gen, durations, threshold=args.episode_threshold, seed=seed)
        write_text(out / "episodes.csv", episodes_csv(report))
        log.info("minimum detectable episode: %s s (monotone: %s)", report.min_detectable_s, report.monotone)
    print(f"auc={curve.auc:.6f} brier={b:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# stream


def _stdin_samples(stream):
    """Yield ``(t_s, value)`` pairs from ``t_s,value`` lines; malformed lines raise ValueError."""
    for line in stream:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) == 1:
            yield None, float(parts[0])
        else:
            yield float(parts[0]), float(parts[1])


def cmd_stream(args) -> int:
    weights = _load_model(args)
    if args.out is not None:
        _manifest(args, [], 0 if args.seed is None else args.seed).write(Path(args.out))
    state = StreamState(weights)
    ratio = weights.spec.total_pool
    chunk = max(1, args.chunk_size)
    out = sys.stdout

    if args.record:
        rec = load_record(args.record)
        fs, t0 = rec.fs, rec.samples.start_offset_s
        source = ((None, v) for v in rec.samples.values)
    else:
        fs, t0 = args.fs, None
        source = _stdin_samples(sys.stdin)

    def emit(ps):
        nonlocal n_emitted
        times = output_times(len(ps), fs, ratio, (t0 or 0.0) + n_emitted * ratio / fs)
        for t, p in zip(times, ps):
            out.write(f"{t:.6f},{p:.9f}\n")
            out.flush()
        n_emitted += len(ps)

    n_emitted = 0
    buf = []
    try:
        for t, v in source:
            if t0 is None:
                t0 = t if t is not None else 0.0
            buf.append(v)
            if len(buf) >= chunk:
                emit(state.push(np.array(buf)))
                buf = []
        if buf:
            emit(state.push(np.array(buf)))
        emit(state.flush())
    except StreamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: malformed input line: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


# ---------------------------------------------------------------------------
# inspect


def cmd_inspect(args) -> int:
    weights = _load_model(args)
    layers = [s.strip() for s in args.layers.split(",") if s.strip()]
    valid = weights.spec.layer_names()
    unknown = [name for name in layers if name not in valid]
    if unknown:
        raise UsageError(f"unknown layer(s) {', '.join(unknown)}; valid layers: {', '.join(valid)}")
    out = Path(args.out)
    _manifest(args, [], 0 if args.seed is None else args.seed).write(out)
    rec = load_record(args.record)
    capture = sorted(set(layers) | {"lstm"})
    probs, traces = forward(weights, rec.samples, capture=capture)

    write_text(out / "filters.csv", filters_csv(filter_report(weights, args.n_freq, rec.fs)))
    for name in layers:
        acts = traces[name].activations
        if name in ("lstm", "lstm_cell"):
            acts, _ = normalize_lstm_signs(acts)
        write_text(out / f"ordering_{name}.csv", ordering_csv(order_channels(acts, name)))

    hidden = traces["lstm"].activations.T  # [time, hidden]
    proj = project_embeddings(hidden, weights["dense/kernel"], weights["dense/bias"])
    truth = downsample_labels(rec.truth, weights.spec.total_pool).values
    times = output_times(len(probs), rec.fs, weights.spec.total_pool, rec.samples.start_offset_s)
    write_text(out / "embedding.csv", embedding_csv(times, proj, truth, probs.values))
    keep = subsample_for_display(np.arange(len(times)), args.display_stride)
    sub = type(proj)(proj.points[keep], proj.w_hat, proj.b_hat, proj.pc_direction)
    write_text(out / "embedding_display.csv", embedding_csv(times[keep], sub, truth[keep], probs.values[keep]))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _global_flags(p, suppress):
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=default, help="random seed (recorded in manifest.json)")
    p.add_argument("--out", default=default, help="output directory")
    p.add_argument("--precision", choices=sorted(DTYPES), default=argparse.SUPPRESS if suppress else "f64")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ppgrhythm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset with subject splits")
    _global_flags(g, suppress=True)
    g.add_argument("--config", help="generator config file (key=value)")
    g.add_argument("--subjects", type=int, default=26)
    g.add_argument("--split", default="0.6153846153846154,0.15384615384615385",
                   help="train,validation subject fractions; the rest is test")
    g.add_argument("--binary", action="store_true", help="write binary record files")

    t = sub.add_parser("train", help="train a model on a generated dataset")
    _global_flags(t, suppress=True)
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="training config file (key=value)")
    t.add_argument("--augment", help="augmentation config file (key=value)")
    t.add_argument("--model-spec", help="JSON model spec; default architecture when omitted")
    t.add_argument("--max-epochs", type=int)

    e = sub.add_parser("eval", help="ROC, Brier, operating points and episode detection")
    _global_flags(e, suppress=True)
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", help="split to evaluate, or 'all'")
    e.add_argument("--thresholds", default="0.5")
    e.add_argument("--episode-durations", default=",".join(str(d) for d in DEFAULT_EPISODES),
                   help="AFib episode durations in seconds; empty to skip")
    e.add_argument("--episode-threshold", type=float, default=0.5)
    e.add_argument("--generator-config", help="generator config for episode records")

    s = sub.add_parser("stream", help="stream samples through a model, printing t_s,p lines")
    _global_flags(s, suppress=True)
    s.add_argument("--model", required=True)
    s.add_argument("--record", help="record file; stdin 't_s,value' lines when omitted")
    s.add_argument("--chunk-size", type=int, default=1)
    s.add_argument("--fs", type=float, default=20.0, help="sample rate of stdin input")

    i = sub.add_parser("inspect", help="filter, ordering and embedding reports for one record")
    _global_flags(i, suppress=True)
    i.add_argument("--model", required=True)
    i.add_argument("--record", required=True)
    i.add_argument("--layers", default=",".join(DEFAULT_LAYERS))
    i.add_argument("--n-freq", type=int, default=64)
    i.add_argument("--display-stride", type=int, default=15)
    return parser


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "stream": cmd_stream,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    args.argv = argv
    if args.out is None and args.command != "stream":
        args.out = "out"
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UndefinedMetricError as exc:
        print(f"error: undefined metric: {exc}", file=sys.stderr)
        return EXIT_METRIC
    except (RecordError, ModelFormatError, StreamError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # remaining value errors come from inconsistent arguments (e.g. records shorter than one example)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BrokenPipeError:
        # downstream reader (e.g. `head`) closed the pipe; stop quietly
        import os

        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
