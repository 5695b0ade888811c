"""Trace ingestion, labeling, preprocessing and synthetic trace generation.

A trace is a ``(channels, frames)`` float32 array of sensor values sampled on
a uniform clock (default 100 Hz).  On disk a trace is a CSV whose header is
``t,<ch1>,...,<chN>`` and whose file name carries the label
(``task<k>_trial<m>.csv`` -> class index ``k - 1``).

Preprocessing order used across the package: fit per-channel standardization
statistics on the raw (un-padded) frames of the training partition, apply
them everywhere, then zero-pad every trace up to a common block-aligned
length.  Padded frames stay exactly zero; each trace remembers how many of
its frames are real in ``source_frames``.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import re
from dataclasses import dataclass, field, replace

import numpy as np

from .config import KeyReader, parse_kv_file
from .errors import (
    ConfigError,
    DimensionError,
    FormatError,
    FusionError,
    InputError,
    InsufficientSupportError,
    LabelingError,
    NumericError,
    RelabelError,
)

log = logging.getLogger(__name__)

DEFAULT_SAMPLE_RATE_HZ = 100.0
DEFAULT_BLOCK_FRAMES = 1000
STD_FLOOR = 1e-9          # channels with std below this standardize with sigma = 1
RATE_TOLERANCE = 0.01     # inferred sample rate must sit within 1% of the declared rate

_FILENAME_RE = re.compile(r"^task(\d+)_trial(\d+)\.csv$")


# ---------------------------------------------------------------------------
# core containers
# ---------------------------------------------------------------------------

@dataclass
class Trace:
    """One recording: values (channels, frames) float32 plus channel metadata.

    ``source_frames`` counts the real frames; anything beyond it is zero
    padding appended by :func:`pad_traces`.
    """

    values: np.ndarray
    channel_names: tuple[str, ...]
    sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ
    source_frames: int | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise DimensionError(f"trace values must be (channels, frames), got shape {self.values.shape}")
        if self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise DimensionError(f"trace needs at least one channel and one frame, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise NumericError("trace values contain NaN or Inf")
        self.channel_names = tuple(self.channel_names)
        if len(self.channel_names) != self.values.shape[0]:
            raise DimensionError(f"{len(self.channel_names)} channel names for "
                                 f"{self.values.shape[0]} channels")
        if self.sample_rate_hz <= 0:
            raise InputError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if self.source_frames is None:
            self.source_frames = self.values.shape[1]
        if not (1 <= self.source_frames <= self.values.shape[1]):
            raise DimensionError(f"source_frames {self.source_frames} outside "
                                 f"[1, {self.values.shape[1]}]")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]

    def source_values(self) -> np.ndarray:
        """The real (un-padded) part of the trace."""
        return self.values[:, :self.source_frames]


@dataclass
class LabeledDataset:
    """Parallel traces/labels plus the ordered class vocabulary."""

    traces: list[Trace]
    labels: np.ndarray
    vocab: tuple[str, ...]

    def __post_init__(self):
        self.traces = list(self.traces)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.vocab = tuple(self.vocab)
        if self.labels.shape != (len(self.traces),):
            raise DimensionError(f"{self.labels.shape[0] if self.labels.ndim else 0} labels "
                                 f"for {len(self.traces)} traces")
        if len(set(self.vocab)) != len(self.vocab):
            raise InputError(f"duplicate class names in vocab {self.vocab}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.vocab)):
            raise InputError(f"labels must lie in [0, {len(self.vocab)}), got "
                             f"[{self.labels.min()}, {self.labels.max()}]")
        first = self.traces[0] if self.traces else None
        for trace in self.traces:
            if trace.channels != first.channels or trace.channel_names != first.channel_names:
                raise DimensionError("all traces in a dataset must share channel count and names")

    def __len__(self) -> int:
        return len(self.traces)

    @property
    def channel_names(self) -> tuple[str, ...] | None:
        return self.traces[0].channel_names if self.traces else None

    @property
    def channels(self) -> int | None:
        return self.traces[0].channels if self.traces else None

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=len(self.vocab))

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(traces=[self.traces[i] for i in indices],
                              labels=self.labels[indices], vocab=self.vocab)


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

def parse_trace_csv(path: str, expected_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ) -> Trace:
    """Read a trace CSV: header ``t,<ch1>,...``, one row per frame.

    Validates the header (present, non-empty, unique names), numeric cells,
    strictly increasing time, and that the sample rate inferred from the
    median time delta lies within 1% of ``expected_rate_hz``.
    """
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise FormatError(f"{path}: cannot read: {exc}") from exc
    if not rows:
        raise FormatError(f"{path}: empty file")
    header = [name.strip() for name in rows[0]]
    if len(header) < 2:
        raise FormatError(f"{path}: header needs a time column plus at least one channel")
    if all(_is_number(cell) for cell in header):
        raise FormatError(f"{path}: missing header row (first line is numeric)")
    if any(name == "" for name in header):
        raise FormatError(f"{path}: blank column name in header")
    if len(set(header)) != len(header):
        raise FormatError(f"{path}: duplicate column names in header")
    data_rows = rows[1:]
    if not data_rows:
        raise FormatError(f"{path}: no data rows after the header")

    channels = len(header) - 1
    times = np.empty(len(data_rows), dtype=np.float64)
    values = np.empty((channels, len(data_rows)), dtype=np.float32)
    for r, row in enumerate(data_rows):
        if len(row) != len(header):
            raise FormatError(f"{path}: row {r + 2} has {len(row)} cells, expected {len(header)}")
        for c, cell in enumerate(row):
            try:
                number = float(cell)
            except ValueError:
                raise FormatError(f"{path}: row {r + 2}, column {header[c]!r}: "
                                  f"non-numeric value {cell!r}") from None
            if c == 0:
                times[r] = number
            else:
                values[c - 1, r] = number
    if not np.all(np.isfinite(times)) or not np.all(np.isfinite(values)):
        raise FormatError(f"{path}: non-finite value in data")
    if len(times) > 1:
        deltas = np.diff(times)
        if np.any(deltas <= 0):
            bad = int(np.argmax(deltas <= 0))
            raise FormatError(f"{path}: time not strictly increasing at row {bad + 3}")
        inferred = 1.0 / float(np.median(deltas))
        if abs(inferred - expected_rate_hz) > RATE_TOLERANCE * expected_rate_hz:
            raise FormatError(f"{path}: inferred sample rate {inferred:.3f} Hz is outside 1% "
                              f"of expected {expected_rate_hz:g} Hz")
    return Trace(values=values, channel_names=tuple(header[1:]), sample_rate_hz=expected_rate_hz)


def _is_number(cell: str) -> bool:
    try:
        float(cell)
        return True
    except ValueError:
        return False


def write_trace_csv(trace: Trace, path: str) -> None:
    """Write all frames of a trace; float32 values round-trip exactly via %.9g."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("t",) + trace.channel_names)
        for f in range(trace.frames):
            row = [f"{f / trace.sample_rate_hz:.4f}"]
            row.extend(f"{v:.9g}" for v in trace.values[:, f])
            writer.writerow(row)


def label_from_filename(name: str) -> tuple[int, int]:
    """task<k>_trial<m>.csv -> (k, m); the class index used downstream is k - 1."""
    base = os.path.basename(name)
    m = _FILENAME_RE.match(base)
    if m is None:
        raise LabelingError(f"{base!r} does not match the task<k>_trial<m>.csv naming convention")
    task_id, trial = int(m.group(1)), int(m.group(2))
    if task_id < 1:
        raise LabelingError(f"{base!r}: task numbers start at 1")
    return task_id, trial


def load_csv_dir(path: str, expected_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ) -> LabeledDataset:
    """Load every ``task<k>_trial<m>.csv`` in a directory into a labeled dataset.

    Class index = task number - 1; the vocabulary is task1..taskN for the
    largest task number present.  Files not matching the naming convention
    (such as a companion manifest) are ignored.
    """
    try:
        names = sorted(n for n in os.listdir(path) if _FILENAME_RE.match(n))
    except OSError as exc:
        raise FormatError(f"cannot list directory {path!r}: {exc}") from exc
    if not names:
        raise FormatError(f"no task<k>_trial<m>.csv trace files found in {path!r}")
    traces: list[Trace] = []
    labels: list[int] = []
    max_task = 0
    for name in names:
        task_id, _ = label_from_filename(name)
        traces.append(parse_trace_csv(os.path.join(path, name), expected_rate_hz))
        labels.append(task_id - 1)
        max_task = max(max_task, task_id)
    vocab = tuple(f"task{k}" for k in range(1, max_task + 1))
    log.info("loaded %d traces across %d classes from %s", len(traces), max_task, path)
    return LabeledDataset(traces=traces, labels=np.array(labels), vocab=vocab)


# ---------------------------------------------------------------------------
# padding
# ---------------------------------------------------------------------------

def padded_length(longest: int, block_frames: int) -> int:
    """Smallest multiple of block_frames that fits the longest trace."""
    if block_frames < 1:
        raise ConfigError(f"block_frames must be >= 1, got {block_frames}")
    return max(1, math.ceil(longest / block_frames)) * block_frames


def pad_traces(dataset: LabeledDataset, block_frames: int = DEFAULT_BLOCK_FRAMES,
               target_frames: int | None = None) -> LabeledDataset:
    """Append zero frames so every trace reaches a common block-aligned length.

    With ``target_frames`` the caller fixes the final length (it must still
    fit the longest trace -- padding never truncates).
    """
    if not dataset.traces:
        return dataset
    longest = max(trace.frames for trace in dataset.traces)
    if target_frames is None:
        target_frames = padded_length(longest, block_frames)
    elif target_frames < longest:
        raise InputError(f"target_frames {target_frames} would truncate a "
                         f"{longest}-frame trace")
    padded = []
    for trace in dataset.traces:
        if trace.frames == target_frames:
            padded.append(trace)
            continue
        values = np.zeros((trace.channels, target_frames), dtype=np.float32)
        values[:, :trace.frames] = trace.values
        padded.append(Trace(values=values, channel_names=trace.channel_names,
                            sample_rate_hz=trace.sample_rate_hz,
                            source_frames=trace.source_frames))
    return LabeledDataset(traces=padded, labels=dataset.labels, vocab=dataset.vocab)


# ---------------------------------------------------------------------------
# standardization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StandardizationStats:
    """Per-channel mean and standard deviation fitted on training data."""

    mean: np.ndarray   # float64 (channels,)
    std: np.ndarray    # float64 (channels,), degenerate channels already floored to 1

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=np.float64))
        if self.mean.ndim != 1 or self.mean.shape != self.std.shape:
            raise DimensionError(f"stats must be aligned vectors, got {self.mean.shape} "
                                 f"and {self.std.shape}")
        if np.any(self.std <= 0):
            raise InputError("standard deviations must be positive")

    @property
    def channels(self) -> int:
        return self.mean.shape[0]


def standardize_fit(dataset: LabeledDataset) -> StandardizationStats:
    """Population mean/std per channel over all non-padded frames, pooled across traces."""
    if not dataset.traces:
        raise InputError("cannot fit standardization on an empty dataset")
    channels = dataset.channels
    total = 0
    acc = np.zeros(channels, dtype=np.float64)
    acc_sq = np.zeros(channels, dtype=np.float64)
    for trace in dataset.traces:
        source = trace.source_values().astype(np.float64)
        acc += source.sum(axis=1)
        acc_sq += (source * source).sum(axis=1)
        total += trace.source_frames
    mean = acc / total
    var = acc_sq / total - mean * mean
    std = np.sqrt(np.maximum(var, 0.0))
    std = np.where(std < STD_FLOOR, 1.0, std)
    return StandardizationStats(mean=mean, std=std)


def standardize_apply(dataset: LabeledDataset, stats: StandardizationStats) -> LabeledDataset:
    """Map every non-padded value to (x - mean) / std; padded frames stay zero."""
    if dataset.traces and dataset.channels != stats.channels:
        raise DimensionError(f"stats cover {stats.channels} channels but dataset has "
                             f"{dataset.channels}")
    out = []
    for trace in dataset.traces:
        values = trace.values.copy()
        source = trace.values[:, :trace.source_frames].astype(np.float64)
        values[:, :trace.source_frames] = ((source - stats.mean[:, None]) /
                                           stats.std[:, None]).astype(np.float32)
        out.append(Trace(values=values, channel_names=trace.channel_names,
                         sample_rate_hz=trace.sample_rate_hz,
                         source_frames=trace.source_frames))
    return LabeledDataset(traces=out, labels=dataset.labels, vocab=dataset.vocab)


def save_stats(stats: StandardizationStats, channel_names, path: str) -> None:
    channel_names = tuple(channel_names)
    if len(channel_names) != stats.channels:
        raise DimensionError(f"{len(channel_names)} names for {stats.channels} channels")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("channel", "mean", "std"))
        for name, mu, sigma in zip(channel_names, stats.mean, stats.std):
            writer.writerow((name, repr(float(mu)), repr(float(sigma))))


def load_stats(path: str) -> tuple[StandardizationStats, tuple[str, ...]]:
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise FormatError(f"{path}: cannot read: {exc}") from exc
    if not rows or [c.strip() for c in rows[0]] != ["channel", "mean", "std"]:
        raise FormatError(f"{path}: expected header 'channel,mean,std'")
    names, means, stds = [], [], []
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != 3:
            raise FormatError(f"{path}: row {r} has {len(row)} cells, expected 3")
        names.append(row[0])
        try:
            means.append(float(row[1]))
            stds.append(float(row[2]))
        except ValueError:
            raise FormatError(f"{path}: row {r}: non-numeric statistic") from None
    if not names:
        raise FormatError(f"{path}: no channel rows")
    return StandardizationStats(mean=np.array(means), std=np.array(stds)), tuple(names)


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    """Stratified split fractions (must sum to 1) and the shuffle seed."""

    train_frac: float
    val_frac: float
    test_frac: float
    seed: int = 0

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(not (0.0 < f < 1.0) for f in fracs):
            raise ConfigError(f"split fractions must lie in (0, 1), got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {sum(fracs)!r}")

    @property
    def fractions(self) -> tuple[float, float, float]:
        return (self.train_frac, self.val_frac, self.test_frac)

    def tag(self) -> str:
        return "/".join(f"{f:g}" for f in self.fractions)


def largest_remainder_counts(n: int, fractions) -> list[int]:
    """Apportion n items to fractions: floor quotas, then leftovers by largest remainder.

    Remainder ties break in favour of the earlier fraction (train, then val, then test).
    """
    quotas = [n * f for f in fractions]
    counts = [int(math.floor(q)) for q in quotas]
    leftover = n - sum(counts)
    remainders = sorted(range(len(fractions)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in remainders[:leftover]:
        counts[i] += 1
    return counts


def stratified_split(dataset: LabeledDataset, spec: SplitSpec
                     ) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Per-class seeded shuffle, then largest-remainder apportioning per class.

    Every class needs at least 3 samples.  The three results are disjoint and
    exhaustive; identical seeds give identical index sets.
    """
    counts = dataset.class_counts()
    for k, count in enumerate(counts):
        if count < 3:
            raise InsufficientSupportError(f"class {dataset.vocab[k]!r} has only {count} "
                                           f"sample(s); stratified splitting needs >= 3")
    rng = np.random.default_rng(spec.seed)
    parts: tuple[list[int], list[int], list[int]] = ([], [], [])
    for k in range(len(dataset.vocab)):
        indices = np.flatnonzero(dataset.labels == k)
        perm = rng.permutation(indices)
        n_train, n_val, _ = largest_remainder_counts(len(indices), spec.fractions)
        parts[0].extend(perm[:n_train].tolist())
        parts[1].extend(perm[n_train:n_train + n_val].tolist())
        parts[2].extend(perm[n_train + n_val:].tolist())
    train, val, test = (dataset.subset(sorted(part)) for part in parts)
    log.info("stratified split %s -> %d/%d/%d samples", spec.tag(), len(train), len(val), len(test))
    return train, val, test


# ---------------------------------------------------------------------------
# relabeling / class selection / fusion
# ---------------------------------------------------------------------------

def relabel_binary(dataset: LabeledDataset, positive_classes) -> LabeledDataset:
    """Collapse to two classes: positive set -> 1, the rest -> 0.

    ``positive_classes`` is a set of vocab indices; it must be a non-empty
    proper subset.  The new vocabulary records which source classes landed on
    each side.
    """
    positive = {int(k) for k in positive_classes}
    if not positive:
        raise RelabelError("positive class set is empty")
    if not positive.issubset(range(len(dataset.vocab))):
        raise RelabelError(f"positive classes {sorted(positive)} outside vocab of "
                           f"{len(dataset.vocab)} classes")
    if len(positive) == len(dataset.vocab):
        raise RelabelError("positive class set covers every class; nothing to separate")
    negative_names = [name for k, name in enumerate(dataset.vocab) if k not in positive]
    positive_names = [name for k, name in enumerate(dataset.vocab) if k in positive]
    vocab = (f"neg({'+'.join(negative_names)})", f"pos({'+'.join(positive_names)})")
    labels = np.isin(dataset.labels, sorted(positive)).astype(np.int64)
    return LabeledDataset(traces=list(dataset.traces), labels=labels, vocab=vocab)


def select_classes(dataset: LabeledDataset, names) -> LabeledDataset:
    """Keep only the named classes; the new vocab keeps the original order."""
    names = list(names)
    unknown = [n for n in names if n not in dataset.vocab]
    if unknown:
        raise InputError(f"unknown class name(s) {unknown}; vocab is {list(dataset.vocab)}")
    if not names:
        raise InputError("select_classes needs at least one class name")
    keep = [k for k, name in enumerate(dataset.vocab) if name in set(names)]
    remap = {old: new for new, old in enumerate(keep)}
    mask = np.isin(dataset.labels, keep)
    labels = np.array([remap[int(l)] for l in dataset.labels[mask]], dtype=np.int64)
    traces = [trace for trace, m in zip(dataset.traces, mask) if m]
    return LabeledDataset(traces=traces, labels=labels,
                          vocab=tuple(dataset.vocab[k] for k in keep))


def rename_classes(dataset: LabeledDataset, mapping: dict) -> LabeledDataset:
    unknown = [n for n in mapping if n not in dataset.vocab]
    if unknown:
        raise InputError(f"cannot rename unknown class(es) {unknown}")
    vocab = tuple(mapping.get(name, name) for name in dataset.vocab)
    return LabeledDataset(traces=list(dataset.traces), labels=dataset.labels.copy(), vocab=vocab)


def merge_datasets(a: LabeledDataset, b: LabeledDataset,
                   block_frames: int = DEFAULT_BLOCK_FRAMES) -> LabeledDataset:
    """Fuse two datasets; classes union by name (a's order first, b's new classes after).

    Channel counts and names must match; all traces are re-padded jointly to
    the merged block-aligned maximum length.
    """
    if not a.traces:
        return pad_traces(b, block_frames) if b.traces else b
    if not b.traces:
        return pad_traces(a, block_frames)
    if a.channels != b.channels or a.channel_names != b.channel_names:
        raise FusionError(f"cannot merge: channels {a.channels}/{a.channel_names} vs "
                          f"{b.channels}/{b.channel_names}")
    vocab = list(a.vocab)
    for name in b.vocab:
        if name not in vocab:
            vocab.append(name)
    b_map = {k: vocab.index(name) for k, name in enumerate(b.vocab)}
    labels = np.concatenate([a.labels, np.array([b_map[int(l)] for l in b.labels], dtype=np.int64)])
    merged = LabeledDataset(traces=list(a.traces) + list(b.traces), labels=labels,
                            vocab=tuple(vocab))
    return pad_traces(merged, block_frames)


# ---------------------------------------------------------------------------
# synthetic traces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a labeled synthetic dataset.

    Each (class, channel) pair gets one deterministic template
    ``A*sin(2*pi*f*t + phi) + drift*t`` with parameters drawn once from the
    seeded generator; every trial adds fresh Gaussian noise and draws its
    frame count uniformly from ``frame_range`` (inclusive).  The same seed
    always produces bit-identical datasets.
    """

    num_classes: int = 6
    trials_per_class: int = 20
    channels: int = 24
    frame_range: tuple[int, int] = (800, 1600)
    noise_std: float = 0.1
    seed: int = 0
    sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ
    class_prefix: str = "task"

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.trials_per_class < 1:
            raise ConfigError(f"trials_per_class must be >= 1, got {self.trials_per_class}")
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")
        lo, hi = self.frame_range
        if lo < 10 or hi < lo:
            raise ConfigError(f"frame_range must satisfy 10 <= min <= max, got {self.frame_range}")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.sample_rate_hz <= 0:
            raise ConfigError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")

    def class_names(self) -> tuple[str, ...]:
        return tuple(f"{self.class_prefix}{k + 1}" for k in range(self.num_classes))


# template parameter columns: amplitude, frequency (Hz), phase (rad), drift (units/s)
_AMPLITUDE_RANGE = (0.5, 2.0)
_FREQUENCY_RANGE = (0.2, 1.5)
_DRIFT_RANGE = (-0.05, 0.05)


def _draw_templates(rng: np.random.Generator, spec: SynthSpec) -> np.ndarray:
    params = np.empty((spec.num_classes, spec.channels, 4), dtype=np.float64)
    for k in range(spec.num_classes):
        for c in range(spec.channels):
            params[k, c, 0] = rng.uniform(*_AMPLITUDE_RANGE)
            params[k, c, 1] = rng.uniform(*_FREQUENCY_RANGE)
            params[k, c, 2] = rng.uniform(0.0, 2.0 * math.pi)
            params[k, c, 3] = rng.uniform(*_DRIFT_RANGE)
    return params


def template_parameters(spec: SynthSpec) -> np.ndarray:
    """(num_classes, channels, 4) array of the per-template (A, f, phi, drift) draws."""
    return _draw_templates(np.random.default_rng(spec.seed), spec)


def template_waveform(params_kc: np.ndarray, frames: int, sample_rate_hz: float) -> np.ndarray:
    """Noise-free template for one class: params (channels, 4) -> (channels, frames) float64."""
    t = np.arange(frames, dtype=np.float64) / sample_rate_hz
    amp, freq, phase, drift = (params_kc[:, i][:, None] for i in range(4))
    return amp * np.sin(2.0 * math.pi * freq * t[None, :] + phase) + drift * t[None, :]


def synth_generate(spec: SynthSpec) -> LabeledDataset:
    """Generate trials_per_class traces per class; deterministic per seed.

    Draw order (fixed for reproducibility): all template parameters first,
    then per class, per trial: frame count, then the noise matrix.
    """
    rng = np.random.default_rng(spec.seed)
    params = _draw_templates(rng, spec)
    channel_names = tuple(f"c{c + 1:02d}" for c in range(spec.channels))
    traces: list[Trace] = []
    labels: list[int] = []
    lo, hi = spec.frame_range
    for k in range(spec.num_classes):
        for _ in range(spec.trials_per_class):
            frames = int(rng.integers(lo, hi + 1))
            clean = template_waveform(params[k], frames, spec.sample_rate_hz)
            noise = rng.normal(0.0, spec.noise_std, size=clean.shape) if spec.noise_std > 0 \
                else np.zeros_like(clean)
            traces.append(Trace(values=(clean + noise).astype(np.float32),
                                channel_names=channel_names,
                                sample_rate_hz=spec.sample_rate_hz))
            labels.append(k)
    log.info("generated %d synthetic traces (%d classes x %d trials, %d channels)",
             len(traces), spec.num_classes, spec.trials_per_class, spec.channels)
    return LabeledDataset(traces=traces, labels=np.array(labels), vocab=spec.class_names())


def parse_synth_spec(source: str | dict, origin: str = "<config>") -> SynthSpec:
    """Build a SynthSpec from a flat key=value file path or an already-parsed dict."""
    pairs = parse_kv_file(source) if isinstance(source, str) else dict(source)
    origin = source if isinstance(source, str) else origin
    reader = KeyReader(pairs, origin=origin)
    spec = SynthSpec(
        num_classes=reader.take_int("num_classes", SynthSpec.num_classes),
        trials_per_class=reader.take_int("trials_per_class", SynthSpec.trials_per_class),
        channels=reader.take_int("channels", SynthSpec.channels),
        frame_range=(reader.take_int("frame_min", SynthSpec.frame_range[0]),
                     reader.take_int("frame_max", SynthSpec.frame_range[1])),
        noise_std=reader.take_float("noise_std", SynthSpec.noise_std),
        seed=reader.take_int("seed", SynthSpec.seed),
        sample_rate_hz=reader.take_float("sample_rate_hz", DEFAULT_SAMPLE_RATE_HZ),
        class_prefix=reader.take_str("class_prefix", "task"),
    )
    reader.reject_unknown()
    return spec
