"""Signal, label and dataset containers, record file I/O and subject splits."""
from __future__ import annotations

import dataclasses
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

RECORD_VERSION = 1
BINARY_MAGIC = b"RSC1"
SOURCES = ("synthetic", "imported")
SPLITS = ("train", "validation", "test", "unsplit")


class RecordError(ValueError):
    """Base class for record file problems."""


class RecordFormatError(RecordError):
    pass


class RecordIntegrityError(RecordError):
    pass


class RecordVersionError(RecordError):
    pass


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SampleSeries:
    values: np.ndarray
    sample_rate_hz: float = 20.0
    start_offset_s: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values, np.float64))
        if self.values.ndim != 1:
            raise ValueError("SampleSeries values must be one-dimensional")
        if not self.sample_rate_hz > 0:
            raise ValueError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        if self.start_offset_s < 0:
            raise ValueError("start_offset_s must be non-negative")
        if not np.all(np.isfinite(self.values)):
            raise RecordIntegrityError("samples contain NaN or Inf")

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz

    def times(self) -> np.ndarray:
        return self.start_offset_s + np.arange(len(self)) / self.sample_rate_hz


@dataclass(frozen=True)
class LabelSeries:
    """Binary ground truth (0 = NSR, 1 = AFib) or probabilities in [0, 1]."""

    values: np.ndarray
    rate_hz: float = 20.0

    def __post_init__(self):
        v = np.asarray(self.values)
        dtype = np.int8 if np.issubdtype(v.dtype, np.integer) or v.dtype == bool else np.float64
        object.__setattr__(self, "values", _frozen(v, dtype))
        if self.values.ndim != 1:
            raise ValueError("LabelSeries values must be one-dimensional")
        if not self.rate_hz > 0:
            raise ValueError("rate_hz must be positive")
        if self.values.size and (np.nanmin(self.values) < 0 or np.nanmax(self.values) > 1):
            raise ValueError("label values must lie in [0, 1]")
        if not np.all(np.isfinite(self.values)):
            raise RecordIntegrityError("labels contain NaN or Inf")

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def is_binary(self) -> bool:
        return self.values.dtype == np.int8


@dataclass(frozen=True)
class Record:
    subject_id: str
    samples: SampleSeries
    truth: LabelSeries
    source_tag: str = "synthetic"

    def __post_init__(self):
        if len(self.truth) != len(self.samples):
            raise RecordIntegrityError(
                f"truth length {len(self.truth)} != samples length {len(self.samples)}"
            )
        if self.truth.rate_hz != self.samples.sample_rate_hz:
            raise RecordIntegrityError("truth must be at the sample rate")
        if self.source_tag not in SOURCES:
            raise ValueError(f"source_tag must be one of {SOURCES}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def fs(self) -> float:
        return self.samples.sample_rate_hz

    @classmethod
    def from_arrays(cls, subject_id, values, labels, fs=20.0, source_tag="synthetic"):
        return cls(
            subject_id,
            SampleSeries(values, fs),
            LabelSeries(np.asarray(labels, dtype=np.int8), fs),
            source_tag,
        )


@dataclass(frozen=True)
class Dataset:
    records: tuple = ()
    split_tag: str = "unsplit"
    # subject_id -> split, filled by split_by_subject
    assignment: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if self.split_tag not in SPLITS:
            raise ValueError(f"split_tag must be one of {SPLITS}")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def subject_ids(self) -> list[str]:
        return sorted({r.subject_id for r in self.records})

    def subset(self, split: str) -> "Dataset":
        if not self.assignment:
            raise ValueError("dataset has no split assignment")
        recs = [r for r in self.records if self.assignment[r.subject_id] == split]
        return Dataset(recs, split, {r.subject_id: split for r in recs})


# ---------------------------------------------------------------------------
# record I/O


def save_record(record: Record, path, binary: bool | None = None) -> Path:
    """Write ``record`` to ``path``; binary when the suffix is ``.bin`` unless forced."""
    path = Path(path)
    if binary is None:
        binary = path.suffix == ".bin"
    if binary:
        payload = _encode_binary(record)
        _atomic_write(path, payload)
    else:
        _atomic_write(path, _encode_text(record).encode())
    return path


def _encode_text(record: Record) -> str:
    lines = [
        f"#version={RECORD_VERSION}",
        f"#fs_hz={float(record.fs)!r}",
        f"#subject={record.subject_id}",
        f"#source={record.source_tag}",
    ]
    t = record.samples.times()
    for ti, v, y in zip(t.tolist(), record.samples.values.tolist(), record.truth.values.tolist()):
        lines.append(f"{ti:.6f},{v!r},{int(y)}")
    return "\n".join(lines) + "\n"


def _encode_binary(record: Record) -> bytes:
    n = len(record)
    rec = np.empty(n, dtype=[("x", "<f4"), ("y", "u1")])
    rec["x"] = record.samples.values
    rec["y"] = record.truth.values
    return BINARY_MAGIC + struct.pack("<Id", n, record.fs) + rec.tobytes()


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_record(path) -> Record:
    """Read a record in either encoding; the encoding is sniffed from the magic bytes."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == BINARY_MAGIC:
        return _decode_binary(raw, path.stem)
    if raw[:3] == b"RSC":
        raise RecordVersionError(f"{path}: unsupported binary version {raw[:4]!r}")
    return _decode_text(raw.decode(), path)


def _decode_binary(raw: bytes, stem: str) -> Record:
    if len(raw) < 16:
        raise RecordFormatError("truncated binary header")
    n, fs = struct.unpack_from("<Id", raw, 4)
    body = raw[16:]
    if len(body) != 5 * n:
        raise RecordIntegrityError(f"binary body holds {len(body)} bytes, header declares {n} rows")
    rec = np.frombuffer(body, dtype=[("x", "<f4"), ("y", "u1")])
    x = rec["x"].astype(np.float64)
    if not np.all(np.isfinite(x)):
        raise RecordIntegrityError("record contains NaN or Inf samples")
    if np.any(rec["y"] > 1):
        raise RecordIntegrityError("labels must be 0 or 1")
    # the binary layout carries no subject or source; subject falls back to the file stem
    return Record.from_arrays(stem, x, rec["y"], fs, "imported")


def _decode_text(text: str, path: Path) -> Record:
    header = {}
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, sep, value = line[1:].partition("=")
            if not sep:
                raise RecordFormatError(f"{path}:{lineno}: malformed header line {line!r}")
            header[key.strip()] = value.strip()
            continue
        rows.append((lineno, line.split(",")))

    for key in ("version", "fs_hz"):
        if key not in header:
            raise RecordFormatError(f"{path}: missing header field {key!r}")
    try:
        version = int(header["version"])
        fs = float(header["fs_hz"])
    except ValueError as exc:
        raise RecordFormatError(f"{path}: malformed header: {exc}") from None
    if version != RECORD_VERSION:
        raise RecordVersionError(f"{path}: unsupported record version {version}")
    if not fs > 0:
        raise RecordFormatError(f"{path}: fs_hz must be positive")
    source = header.get("source", "imported")
    if source not in SOURCES:
        raise RecordFormatError(f"{path}: unknown source {source!r}")

    values = np.empty(len(rows))
    labels = np.empty(len(rows), dtype=np.int8)
    for i, (lineno, cols) in enumerate(rows):
        if len(cols) != 3 or cols[2].strip() == "":
            raise RecordIntegrityError(f"{path}:{lineno}: expected t_s,value,label")
        try:
            values[i] = float(cols[1])
            lab = int(cols[2])
        except ValueError:
            raise RecordFormatError(f"{path}:{lineno}: non-numeric field") from None
        if lab not in (0, 1):
            raise RecordIntegrityError(f"{path}:{lineno}: label must be 0 or 1")
        labels[i] = lab
    if not np.all(np.isfinite(values)):
        raise RecordIntegrityError(f"{path}: record contains NaN or Inf samples")
    if not rows:
        raise RecordIntegrityError(f"{path}: record has no samples")
    return Record.from_arrays(header.get("subject", path.stem), values, labels, fs, source)


def load_dataset(directory, pattern: str = "*") -> Dataset:
    """Load every record file in ``directory`` (``.csv`` or ``.bin``), applying ``splits.csv`` if present."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"data directory {directory} does not exist")
    paths = sorted(
        p for p in directory.glob(pattern) if p.suffix in (".csv", ".bin") and p.name != "splits.csv"
    )
    records = [load_record(p) for p in paths]
    assignment = {}
    split_file = directory / "splits.csv"
    if split_file.exists():
        for line in split_file.read_text().splitlines()[1:]:
            if line.strip():
                sid, split = line.split(",")
                assignment[sid] = split
    return Dataset(records, "unsplit", assignment)


# ---------------------------------------------------------------------------
# label handling and splitting


def downsample_labels(truth: LabelSeries, ratio: int) -> LabelSeries:
    """Majority vote over consecutive non-overlapping windows; ties go to label 1."""
    if int(ratio) != ratio or ratio < 1:
        raise ValueError(f"ratio must be a positive integer, got {ratio}")
    ratio = int(ratio)
    v = np.asarray(truth.values)
    n = len(v) // ratio
    windows = v[: n * ratio].reshape(n, ratio)
    if truth.is_binary:
        out = (2 * windows.sum(axis=1) >= ratio).astype(np.int8)
    else:
        out = windows.mean(axis=1)
    return LabelSeries(out, truth.rate_hz / ratio)


def split_by_subject(dataset: Dataset, fractions: Sequence[float], seed: int) -> Dataset:
    """Assign whole subjects to train/validation/test.

    Subject counts are ``round(n * f)`` for train and validation; the remainder is
    the test split. The assignment depends only on the subject set, fractions and seed.
    """
    f_train, f_val = (float(f) for f in fractions)
    if f_train <= 0 or f_val <= 0 or f_train + f_val > 1 + 1e-12:
        raise ValueError("fractions must be positive and sum to at most 1")
    subjects = dataset.subject_ids
    n = len(subjects)
    want_test = f_train + f_val < 1 - 1e-12
    n_splits = 3 if want_test else 2
    if n < n_splits:
        raise ValueError(f"{n} subject(s) cannot fill {n_splits} splits")
    n_train = max(1, int(round(n * f_train)))
    n_val = max(1, int(round(n * f_val)))
    if want_test:
        while n_train + n_val > n - 1:
            if n_train >= n_val and n_train > 1:
                n_train -= 1
            else:
                n_val -= 1
    else:
        n_val = n - n_train
    order = np.random.default_rng(seed).permutation(n)
    assignment = {}
    for rank, idx in enumerate(order):
        sid = subjects[idx]
        if rank < n_train:
            assignment[sid] = "train"
        elif rank < n_train + n_val:
            assignment[sid] = "validation"
        else:
            assignment[sid] = "test"
    return Dataset(dataset.records, "unsplit", assignment)


def write_splits(assignment: dict, directory) -> Path:
    path = Path(directory) / "splits.csv"
    body = "subject_id,split\n" + "".join(f"{k},{assignment[k]}\n" for k in sorted(assignment))
    _atomic_write(path, body.encode())
    return path


def replace(record: Record, **changes) -> Record:
    return dataclasses.replace(record, **changes)


def concat_values(records: Iterable[Record]) -> np.ndarray:
    return np.concatenate([r.samples.values for r in records])
