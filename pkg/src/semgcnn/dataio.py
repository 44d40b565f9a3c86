"""Session files, overlapping windowing and the holdout/two-fold partition.

Session file layout (little-endian, identical on every platform)::

    header  : magic b"SEMG" | version u16 | subject i32 | day i32 | posture i32
              | fs f64 | n_channels i32 | n_samples i64
    rows    : n_samples x (ch1 f32, ch2 f32, ch3 f32, ch4 f32, label u8), packed
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

N_CHANNELS = 4
N_CLASSES = 6
WINDOW_LENGTH = 75
WINDOW_STRIDE = 18

MAGIC = b"SEMG"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHiiidiq")
ROW_DTYPE = np.dtype([("ch1", "<f4"), ("ch2", "<f4"), ("ch3", "<f4"), ("ch4", "<f4"), ("label", "u1")])


class SessionFormatError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class SourceId:
    subject: int
    day: int
    posture: int

    max_subject = 7
    max_day = 8
    max_posture = 4

    def __post_init__(self):
        for name, hi in (("subject", self.max_subject), ("day", self.max_day), ("posture", self.max_posture)):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or not 1 <= v <= hi:
                raise ValueError(f"{name} must be an integer in 1..{hi}, got {v!r}")

    def __str__(self):
        return f"U{self.subject}D{self.day}P{self.posture}"

    @property
    def filename(self):
        return f"s{self.subject}_d{self.day}_p{self.posture}.semg"


def all_sources(n_subjects=7, n_days=8, n_postures=4):
    return [SourceId(u, d, p)
            for u in range(1, n_subjects + 1)
            for d in range(1, n_days + 1)
            for p in range(1, n_postures + 1)]


@dataclass
class SessionRecording:
    source: SourceId
    fs: float
    channels: np.ndarray  # (4, n_samples)
    labels: np.ndarray  # (n_samples,)

    def __post_init__(self):
        self.channels = np.asarray(self.channels)
        self.labels = np.asarray(self.labels)
        if self.channels.ndim != 2 or self.channels.shape[0] != N_CHANNELS:
            raise ValueError(f"channels must be ({N_CHANNELS}, n_samples), got {self.channels.shape}")
        if self.labels.shape != (self.channels.shape[1],):
            raise ValueError("channels and labels differ in length")
        if not self.fs > 0:
            raise ValueError(f"fs must be positive, got {self.fs}")

    @property
    def n_samples(self):
        return self.channels.shape[1]

    def equals(self, other):
        return (self.source == other.source and self.fs == other.fs
                and self.channels.dtype == other.channels.dtype
                and np.array_equal(self.channels, other.channels)
                and np.array_equal(self.labels, other.labels))


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def save_session(rec: SessionRecording, path):
    path = Path(path)
    rows = np.empty(rec.n_samples, dtype=ROW_DTYPE)
    for i in range(N_CHANNELS):
        rows[f"ch{i + 1}"] = rec.channels[i]
    rows["label"] = rec.labels
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, rec.source.subject, rec.source.day,
                          rec.source.posture, float(rec.fs), N_CHANNELS, rec.n_samples)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(rows.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write session file {path}: {exc}") from exc


def load_session(path) -> SessionRecording:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise SessionFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, subject, day, posture, fs, n_channels, n_samples = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise SessionFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise SessionFormatError(f"{path}: unsupported version {version}")
    if n_channels != N_CHANNELS:
        raise SessionFormatError(f"{path}: channel count {n_channels} (expected {N_CHANNELS})")
    if not fs > 0:
        raise SessionFormatError(f"{path}: fs {fs} is not positive")
    if n_samples < 0 or len(raw) - _HEADER.size != n_samples * ROW_DTYPE.itemsize:
        raise SessionFormatError(f"{path}: n_samples {n_samples} does not match payload size")
    try:
        source = SourceId(subject, day, posture)
    except ValueError as exc:
        raise SessionFormatError(f"{path}: {exc}") from None
    rows = np.frombuffer(raw, dtype=ROW_DTYPE, offset=_HEADER.size, count=n_samples)
    labels = rows["label"].copy()
    if labels.size and labels.max() >= N_CLASSES:
        raise SessionFormatError(f"{path}: label {labels.max()} out of range 0..{N_CLASSES - 1}")
    channels = np.stack([rows[f"ch{i + 1}"] for i in range(N_CHANNELS)])
    return SessionRecording(source, float(fs), channels, labels)


def load_csv_session(path, source: SourceId, fs=None) -> SessionRecording:
    """Import a plain ``time, ch1..ch4, label`` CSV (header row optional).

    ``fs`` defaults to the reciprocal of the median time step.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if rows and not _is_number(rows[0][0]):
        rows = rows[1:]
    if not rows:
        raise SessionFormatError(f"{path}: no data rows")
    if any(len(r) != N_CHANNELS + 2 for r in rows):
        raise SessionFormatError(f"{path}: channel count (expected time, ch1..ch4, label)")
    arr = np.array(rows, dtype=np.float64)
    t = arr[:, 0]
    if fs is None:
        if len(t) < 2:
            raise SessionFormatError(f"{path}: cannot infer fs from a single row")
        fs = 1.0 / float(np.median(np.diff(t)))
    labels = arr[:, -1]
    if np.any(labels != np.round(labels)) or labels.min() < 0 or labels.max() >= N_CLASSES:
        raise SessionFormatError(f"{path}: label out of range 0..{N_CLASSES - 1}")
    return SessionRecording(source, float(fs), arr[:, 1:-1].T.astype(np.float32), labels.astype(np.uint8))


def _is_number(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


def read_manifest(path):
    """Rows of a dataset manifest as dicts with typed fields."""
    path = Path(path)
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append({
                "source": SourceId(int(row["subject"]), int(row["day"]), int(row["posture"])),
                "file": row["file"],
                "fs": float(row["fs"]),
                "n_samples": int(row["n_samples"]),
            })
    return out


# ---------------------------------------------------------------------------
# windowing
# ---------------------------------------------------------------------------

@dataclass
class WindowSet:
    """Windows in temporal order. ``data`` is (n, win_len, channels)."""

    data: np.ndarray
    labels: np.ndarray
    origins: np.ndarray
    source: SourceId | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return WindowSet(self.data[idx], self.labels[idx], self.origins[idx], self.source, dict(self.meta))

    def network_input(self):
        """(n, channels, win_len) layout expected by the CNN."""
        return np.ascontiguousarray(self.data.transpose(0, 2, 1))


def window_count(n_samples, win_len=WINDOW_LENGTH, stride=WINDOW_STRIDE):
    if n_samples < win_len:
        return 0
    return (n_samples - win_len) // stride + 1


def window(session: SessionRecording, win_len=WINDOW_LENGTH, stride=WINDOW_STRIDE) -> WindowSet:
    """Cut ``session`` into overlapping windows labelled by their centre sample."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if win_len < 1:
        raise ValueError(f"window length must be >= 1, got {win_len}")
    n = session.n_samples
    count = window_count(n, win_len, stride)
    c = session.channels.shape[0]
    if count == 0:
        return WindowSet(np.zeros((0, win_len, c), dtype=session.channels.dtype),
                         np.zeros(0, dtype=session.labels.dtype), np.zeros(0, dtype=np.int64),
                         session.source, {"too_short": True})
    origins = np.arange(count, dtype=np.int64) * stride
    views = sliding_window_view(session.channels, win_len, axis=1)[:, origins, :]  # (C, n_w, L)
    data = np.ascontiguousarray(views.transpose(1, 2, 0))
    labels = session.labels[origins + win_len // 2]
    return WindowSet(data, labels, origins, session.source, {"too_short": False})


# ---------------------------------------------------------------------------
# partition
# ---------------------------------------------------------------------------

@dataclass
class SessionSplit:
    test: np.ndarray
    fold1: np.ndarray
    fold2: np.ndarray
    intervals: list = field(default_factory=list)

    def fold(self, k):
        if k == 1:
            return self.fold1
        if k == 2:
            return self.fold2
        raise ValueError(f"fold must be 1 or 2, got {k}")

    def other(self, k):
        return self.fold(3 - k)

    def trainable(self):
        """fold1 and fold2 together, in temporal order."""
        return np.sort(np.concatenate([self.fold1, self.fold2]))


def holdout_size(m, frac=0.10):
    return int(np.floor(frac * m + 0.5))


def split(windows, holdout_frac=0.10, n_intervals=10, seed=0) -> SessionSplit:
    """Random window-level holdout, then alternating contiguous intervals.

    After removing ``round(holdout_frac * M)`` random windows, the rest (in
    temporal order) are cut into ``n_intervals`` contiguous runs whose sizes
    differ by at most one (earlier runs take the remainder); odd runs form
    fold 1 and even runs fold 2, counting from 1.
    """
    m = len(windows) if not isinstance(windows, (int, np.integer)) else int(windows)
    if m < n_intervals:
        raise ValueError(f"{m} windows cannot be cut into {n_intervals} intervals")
    k = holdout_size(m, holdout_frac)
    rng = np.random.default_rng(seed)
    test = np.sort(rng.choice(m, size=k, replace=False)).astype(np.int64)
    keep = np.ones(m, dtype=bool)
    keep[test] = False
    rest = np.flatnonzero(keep)
    if len(rest) < n_intervals:
        raise ValueError(f"only {len(rest)} windows remain after holdout; need {n_intervals}")
    intervals = np.array_split(rest, n_intervals)
    fold1 = np.concatenate(intervals[0::2])
    fold2 = np.concatenate(intervals[1::2])
    return SessionSplit(test, fold1, fold2, intervals)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

STD_FLOOR = 1e-8


def channel_stats(x):
    """Per-channel (last axis) mean and floored std over every other axis."""
    x = np.asarray(x)
    if x.size == 0:
        raise ValueError("cannot compute normalization statistics of an empty set")
    axes = tuple(range(x.ndim - 1))
    x64 = x.astype(np.float64, copy=False)
    mean = x64.mean(axis=axes)
    std = np.maximum(x64.std(axis=axes), STD_FLOOR)
    return mean, std


def zscore_fit_apply(train, *others):
    """Standardize every set with statistics of ``train`` alone.

    Arrays carry channels on the last axis. Returns ``([train, *others], (mean, std))``.
    """
    mean, std = channel_stats(train)
    out = []
    for x in (train,) + others:
        x = np.asarray(x)
        dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
        out.append(((x - mean) / std).astype(dtype, copy=False))
    return out, (mean, std)


class ChannelStandardizer(TransformerMixin, BaseEstimator):
    """Per-channel z-scoring of (n, length, channels) window arrays."""

    def fit(self, X, y=None):
        self.mean_, self.scale_ = channel_stats(X)
        self.n_channels_ = self.mean_.shape[0]
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = np.asarray(X)
        if X.shape[-1] != self.n_channels_:
            raise ValueError(f"expected {self.n_channels_} channels, got {X.shape[-1]}")
        dtype = X.dtype if np.issubdtype(X.dtype, np.floating) else np.float64
        return ((X - self.mean_) / self.scale_).astype(dtype, copy=False)
