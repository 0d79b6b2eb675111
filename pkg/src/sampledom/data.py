"""Trials, datasets, the synthetic generator, file formats, splits and crops.

Binary dataset layout (all little-endian)::

    b"SDOM"                      magic
    u16                          format version (1)
    u32 C, u32 T, u32 N, u32 O   channels, time points, trials, classes
    f64                          sample rate in Hz
    N x { u8 label, u8 provenance, C*T f64 signal (row-major, channel-major) }

Provenance bytes: 0 clean, 1 outlier, 2 label_noise, 255 unknown.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sampledom.numerics import make_rng

MAGIC = b"SDOM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIIIId")

PROVENANCE_CODES = {"clean": 0, "outlier": 1, "label_noise": 2, None: 255}
PROVENANCE_NAMES = {v: k for k, v in PROVENANCE_CODES.items()}


class DatasetFormatError(ValueError):
    """Malformed dataset file. ``offset`` is the byte offset (binary) or line number (CSV)."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (at {offset})")


class DatasetVersionError(DatasetFormatError):
    pass


@dataclass(frozen=True)
class Trial:
    signal: np.ndarray  # (C, T)
    label: int

    def __post_init__(self):
        sig = np.asarray(self.signal, dtype=np.float64)
        if sig.ndim != 2:
            raise ValueError(f"trial signal must be 2-d (channels x time), got shape {sig.shape}")
        if sig.shape[0] < 1 or sig.shape[1] < 4:
            raise ValueError(f"trial needs C >= 1 and T >= 4, got {sig.shape}")
        if not np.all(np.isfinite(sig)):
            raise ValueError("trial signal contains non-finite values")
        object.__setattr__(self, "signal", sig)

    @property
    def channels(self) -> int:
        return self.signal.shape[0]

    @property
    def time_points(self) -> int:
        return self.signal.shape[1]


class Dataset:
    """An ordered, immutable collection of equally shaped labeled trials.

    Signals are stored stacked as an (N, C, T) array; indexing yields
    :class:`Trial` objects.
    """

    def __init__(self, signals, labels, num_classes: int, sample_rate_hz: float = 250.0, provenance=None):
        signals = np.array(signals, dtype=np.float64)
        labels = np.array(labels, dtype=np.int64)
        if signals.ndim != 3:
            raise ValueError(f"signals must have shape (N, C, T), got {signals.shape}")
        n, c, t = signals.shape
        if n < 1:
            raise ValueError("dataset needs at least one trial")
        if c < 1 or t < 4:
            raise ValueError(f"trials need C >= 1 and T >= 4, got C={c}, T={t}")
        if labels.shape != (n,):
            raise ValueError(f"expected {n} labels, got shape {labels.shape}")
        if num_classes < 1 or labels.min() < 0 or labels.max() >= num_classes:
            raise ValueError(f"labels must lie in [0, {num_classes})")
        if not np.all(np.isfinite(signals)):
            raise ValueError("signals contain non-finite values")
        if provenance is not None:
            provenance = tuple(provenance)
            if len(provenance) != n:
                raise ValueError(f"expected {n} provenance tags, got {len(provenance)}")
            bad = set(provenance) - {"clean", "outlier", "label_noise"}
            if bad:
                raise ValueError(f"unknown provenance tags {sorted(bad)}")
        signals.setflags(write=False)
        labels.setflags(write=False)
        self.signals = signals
        self.labels = labels
        self.num_classes = int(num_classes)
        self.sample_rate_hz = float(sample_rate_hz)
        self.provenance = provenance

    @classmethod
    def from_trials(cls, trials, num_classes: int, sample_rate_hz: float = 250.0, provenance=None) -> "Dataset":
        trials = list(trials)
        if not trials:
            raise ValueError("dataset needs at least one trial")
        shapes = {tr.signal.shape for tr in trials}
        if len(shapes) != 1:
            raise ValueError(f"trials have mismatched shapes {sorted(shapes)}")
        return cls(
            np.stack([tr.signal for tr in trials]),
            [tr.label for tr in trials],
            num_classes,
            sample_rate_hz,
            provenance,
        )

    def __len__(self) -> int:
        return self.signals.shape[0]

    def __getitem__(self, i: int) -> Trial:
        return Trial(self.signals[i], int(self.labels[i]))

    @property
    def trials(self) -> list[Trial]:
        return [self[i] for i in range(len(self))]

    @property
    def channels(self) -> int:
        return self.signals.shape[1]

    @property
    def time_points(self) -> int:
        return self.signals.shape[2]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        prov = None if self.provenance is None else [self.provenance[i] for i in indices]
        return Dataset(self.signals[indices], self.labels[indices], self.num_classes, self.sample_rate_hz, prov)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.sample_rate_hz == other.sample_rate_hz
            and self.provenance == other.provenance
            and np.array_equal(self.labels, other.labels)
            and self.signals.shape == other.signals.shape
            and self.signals.tobytes() == other.signals.tobytes()
        )

    def __repr__(self) -> str:
        n, c, t = self.signals.shape
        return f"Dataset(N={n}, C={c}, T={t}, O={self.num_classes}, fs={self.sample_rate_hz})"


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthSpec:
    """Synthetic multichannel oscillation benchmark.

    Clean trials carry a class-specific sinusoid on that class's active
    channels; phase is the class reference phase plus uniform jitter in
    ``+-phase_jitter`` radians. Every channel of every trial gets Gaussian
    background noise with a 1/f**noise_exponent power spectrum (0 = white).
    ``snr`` is the per-channel power ratio between the sinusoid and that
    noise. Outlier trials carry no rhythm, only white noise at
    ``outlier_power`` times the power of a clean active channel, like an
    artifact-dominated recording. Label-noise trials are clean trials of
    another class carrying the wrong label. Fractions convert to per-class
    counts by rounding down.

    The defaults give a weak per-sample rhythm (snr 0.02) so the reference
    classifier lands well below its ceiling, with 20% outliers and no label
    noise.
    """

    num_classes: int = 2
    channels: int = 8
    time_points: int = 256
    trials_per_class: int = 80
    class_frequencies_hz: tuple[float, ...] = (10.0, 12.0)
    snr: float = 0.02
    outlier_fraction: float = 0.2
    label_noise_fraction: float = 0.0
    seed: int = 0
    sample_rate_hz: float = 250.0
    amplitude: float = 1.0
    active_channels: int = 5
    phase_jitter: float = math.pi / 4
    noise_exponent: float = 0.0
    outlier_power: float = 4.0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if len(self.class_frequencies_hz) != self.num_classes:
            raise ValueError(
                f"class_frequencies_hz has {len(self.class_frequencies_hz)} entries for {self.num_classes} classes"
            )
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise ValueError(f"outlier_fraction must lie in [0, 1], got {self.outlier_fraction}")
        if not 0.0 <= self.label_noise_fraction <= 1.0:
            raise ValueError(f"label_noise_fraction must lie in [0, 1], got {self.label_noise_fraction}")
        if self.outlier_fraction + self.label_noise_fraction > 1.0:
            raise ValueError("outlier_fraction + label_noise_fraction must not exceed 1")
        if self.channels < 1 or self.time_points < 4:
            raise ValueError("need channels >= 1 and time_points >= 4")
        if not 1 <= self.active_channels <= self.channels:
            raise ValueError(f"active_channels must lie in [1, {self.channels}]")
        if self.trials_per_class < 2:
            raise ValueError("trials_per_class must be >= 2")
        if self.snr <= 0 or self.amplitude <= 0 or self.sample_rate_hz <= 0:
            raise ValueError("snr, amplitude and sample_rate_hz must be positive")
        if self.noise_exponent < 0 or self.outlier_power < 0:
            raise ValueError("noise_exponent and outlier_power must be non-negative")

    @property
    def noise_sigma(self) -> float:
        # sinusoid power A^2/2 over noise power sigma^2
        return self.amplitude / math.sqrt(2.0 * self.snr)


def colored_noise(rng, shape, sigma: float, exponent: float) -> np.ndarray:
    """Gaussian noise along the last axis with power spectrum ~ 1/f**exponent.

    White noise is shaped in the frequency domain; the DC bin takes the gain
    of the lowest nonzero frequency. Scaled so the expected variance is
    ``sigma**2``.
    """
    white = rng.normal(size=shape)
    if exponent == 0 or sigma == 0:
        return sigma * white
    n = shape[-1]
    freqs = np.fft.rfftfreq(n)
    freqs[0] = freqs[1]
    gain = freqs ** (-exponent / 2.0)
    # bins other than DC and Nyquist stand for two conjugate components
    mult = np.full(gain.shape, 2.0)
    mult[0] = 1.0
    if n % 2 == 0:
        mult[-1] = 1.0
    gain /= math.sqrt(np.sum(mult * gain**2) / n)
    spectrum = np.fft.rfft(white, axis=-1, norm="ortho") * gain
    return sigma * np.fft.irfft(spectrum, n=n, axis=-1, norm="ortho")


def _clean_signal(spec: SynthSpec, cls: int, active, ref_phase: np.ndarray, rng) -> np.ndarray:
    t = np.arange(spec.time_points) / spec.sample_rate_hz
    phase = ref_phase[cls] + rng.uniform(-spec.phase_jitter, spec.phase_jitter)
    wave = spec.amplitude * np.sin(2.0 * math.pi * spec.class_frequencies_hz[cls] * t + phase)
    sig = np.zeros((spec.channels, spec.time_points))
    sig[active[cls]] = wave
    return sig + colored_noise(rng, sig.shape, spec.noise_sigma, spec.noise_exponent)


def generate(spec: SynthSpec) -> Dataset:
    spec.validate()
    rng = make_rng(spec.seed)
    active = [np.sort(rng.choice(spec.channels, spec.active_channels, replace=False)) for _ in range(spec.num_classes)]
    ref_phase = rng.uniform(0.0, 2.0 * math.pi, size=spec.num_classes)
    n_out = math.floor(spec.outlier_fraction * spec.trials_per_class + 1e-9)
    n_lab = math.floor(spec.label_noise_fraction * spec.trials_per_class + 1e-9)
    shape = (spec.channels, spec.time_points)
    outlier_sigma = math.sqrt(spec.outlier_power * (spec.amplitude**2 / 2.0 + spec.noise_sigma**2))

    signals, labels, prov = [], [], []
    for cls in range(spec.num_classes):
        kinds = ["outlier"] * n_out + ["label_noise"] * n_lab + ["clean"] * (spec.trials_per_class - n_out - n_lab)
        kinds = [kinds[i] for i in rng.permutation(len(kinds))]
        for kind in kinds:
            if kind == "clean":
                sig = _clean_signal(spec, cls, active, ref_phase, rng)
            elif kind == "outlier":
                sig = rng.normal(0.0, outlier_sigma, size=shape)
            else:
                source = (cls + 1 + rng.integers(spec.num_classes - 1)) % spec.num_classes
                sig = _clean_signal(spec, source, active, ref_phase, rng)
            signals.append(sig)
            labels.append(cls)
            prov.append(kind)
    return Dataset(np.stack(signals), labels, spec.num_classes, spec.sample_rate_hz, prov)


# ---------------------------------------------------------------------------
# file formats


def save(dataset: Dataset, path) -> None:
    if len(dataset) < 1:
        raise ValueError("refusing to save an empty dataset")
    if dataset.num_classes > 255:
        raise ValueError("binary format stores labels in one byte; at most 255 classes")
    n, c, t = dataset.signals.shape
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, c, t, n, dataset.num_classes, dataset.sample_rate_hz)]
    prov = dataset.provenance or [None] * n
    body = dataset.signals.astype("<f8")
    for i in range(n):
        parts.append(struct.pack("<BB", int(dataset.labels[i]), PROVENANCE_CODES[prov[i]]))
        parts.append(body[i].tobytes())
    Path(path).write_bytes(b"".join(parts))


def loads(blob: bytes) -> Dataset:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise DatasetFormatError("bad magic, not an SDOM dataset file", 0)
    if len(blob) < _HEADER.size:
        raise DatasetFormatError("truncated header", len(blob))
    _, version, c, t, n, o, fs = _HEADER.unpack_from(blob, 0)
    if version != FORMAT_VERSION:
        raise DatasetVersionError(f"unsupported format version {version}, expected {FORMAT_VERSION}", 4)
    if n < 1 or c < 1 or t < 4 or o < 1:
        raise DatasetFormatError(f"invalid header C={c} T={t} N={n} O={o}", 6)
    record = 2 + 8 * c * t
    offset = _HEADER.size
    signals = np.empty((n, c, t))
    labels = np.empty(n, dtype=np.int64)
    prov = []
    for i in range(n):
        if offset + record > len(blob):
            raise DatasetFormatError(f"truncated record for trial {i}", offset)
        label, code = blob[offset], blob[offset + 1]
        if label >= o:
            raise DatasetFormatError(f"label {label} out of range for {o} classes", offset)
        if code not in PROVENANCE_NAMES:
            raise DatasetFormatError(f"unknown provenance code {code}", offset + 1)
        labels[i] = label
        prov.append(PROVENANCE_NAMES[code])
        signals[i] = np.frombuffer(blob, dtype="<f8", count=c * t, offset=offset + 2).reshape(c, t)
        offset += record
    if offset != len(blob):
        raise DatasetFormatError(f"{len(blob) - offset} trailing bytes", offset)
    if not np.all(np.isfinite(signals)):
        raise DatasetFormatError("non-finite signal values", _HEADER.size)
    known = [p for p in prov if p is not None]
    if known and len(known) != n:
        raise DatasetFormatError("provenance must be given for all trials or none", _HEADER.size)
    return Dataset(signals, labels, o, fs, prov if known else None)


def load(path) -> Dataset:
    return loads(Path(path).read_bytes())


def load_csv(path, sample_rate_hz: float = 250.0, num_classes: int | None = None) -> Dataset:
    """Read the long CSV layout ``trial,channel,time,value,label``.

    Every (trial, channel, time) cell must appear exactly once and a trial's
    rows must agree on the label. Trial ids are ordered numerically.
    """
    cells: dict[tuple[int, int, int], float] = {}
    trial_labels: dict[int, int] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DatasetFormatError("empty CSV file", 1)
        if [h.strip() for h in header] != ["trial", "channel", "time", "value", "label"]:
            raise DatasetFormatError(f"expected header trial,channel,time,value,label, got {','.join(header)}", 1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise DatasetFormatError(f"expected 5 columns, got {len(row)}", lineno)
            try:
                trial, ch, tp, label = int(row[0]), int(row[1]), int(row[2]), int(row[4])
                value = float(row[3])
            except ValueError as exc:
                raise DatasetFormatError(f"unparseable field: {exc}", lineno) from None
            if min(trial, ch, tp, label) < 0:
                raise DatasetFormatError("negative index or label", lineno)
            if not math.isfinite(value):
                raise DatasetFormatError("non-finite value", lineno)
            key = (trial, ch, tp)
            if key in cells:
                raise DatasetFormatError(f"duplicate cell trial={trial} channel={ch} time={tp}", lineno)
            if trial_labels.setdefault(trial, label) != label:
                raise DatasetFormatError(f"trial {trial} has conflicting labels", lineno)
            cells[key] = value
    if not cells:
        raise DatasetFormatError("CSV contains no data rows", 2)
    trial_ids = sorted(trial_labels)
    c = 1 + max(k[1] for k in cells)
    t = 1 + max(k[2] for k in cells)
    if len(cells) != len(trial_ids) * c * t:
        raise DatasetFormatError(f"incomplete grid: expected {len(trial_ids) * c * t} cells, got {len(cells)}")
    pos = {tid: i for i, tid in enumerate(trial_ids)}
    signals = np.empty((len(trial_ids), c, t))
    for (trial, ch, tp), value in cells.items():
        signals[pos[trial], ch, tp] = value
    labels = [trial_labels[tid] for tid in trial_ids]
    o = num_classes if num_classes is not None else max(labels) + 1
    return Dataset(signals, labels, o, sample_rate_hz)


def save_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "channel", "time", "value", "label"])
        for i in range(len(dataset)):
            label = int(dataset.labels[i])
            for ch in range(dataset.channels):
                for tp in range(dataset.time_points):
                    w.writerow([i, ch, tp, repr(float(dataset.signals[i, ch, tp])), label])


# ---------------------------------------------------------------------------
# splitting and cropping


def _class_permutations(dataset: Dataset, seed: int) -> list[np.ndarray]:
    rng = make_rng(seed)
    return [rng.permutation(np.flatnonzero(dataset.labels == k)) for k in range(dataset.num_classes)]


def split(dataset: Dataset, fold_index: int, num_folds: int, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified k-fold split; returns (train, test) for fold ``fold_index``.

    Each class is shuffled once per seed and cut into ``num_folds`` nearly
    equal contiguous chunks, so the folds of one seed partition the dataset.
    """
    if num_folds < 2:
        raise ValueError("num_folds must be >= 2")
    if not 0 <= fold_index < num_folds:
        raise ValueError(f"fold_index must lie in [0, {num_folds})")
    counts = dataset.class_counts()
    for k, cnt in enumerate(counts):
        if 0 < cnt < num_folds:
            raise ValueError(f"class {k} has {cnt} trials, fewer than {num_folds} folds")
    test = []
    for perm in _class_permutations(dataset, seed):
        if perm.size:
            test.extend(np.array_split(perm, num_folds)[fold_index])
    test = np.sort(np.asarray(test, dtype=np.int64))
    train = np.setdiff1d(np.arange(len(dataset)), test)
    return dataset.subset(train), dataset.subset(test)


def holdout_indices(dataset: Dataset, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Stratified holdout. Returns (kept, held_out) index arrays, both sorted.

    Each class holds out ``floor(fraction * count)`` trials, at least one when
    the class has two or more trials.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"holdout fraction must lie in (0, 1), got {fraction}")
    held = []
    for perm in _class_permutations(dataset, seed):
        k = int(fraction * perm.size)
        if perm.size >= 2:
            k = max(k, 1)
        held.extend(perm[:k])
    held = np.sort(np.asarray(held, dtype=np.int64))
    return np.setdiff1d(np.arange(len(dataset)), held), held


def crop_starts(time_points: int, window: int, stride: int) -> list[int]:
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if not 1 <= window <= time_points:
        raise ValueError(f"window {window} must lie in [1, {time_points}]")
    return list(range(0, time_points - window + 1, stride))


def crop(trial: Trial, window_points: int, stride_points: int) -> list[Trial]:
    """All maximal windows ``[k*stride, k*stride + window)`` inside the trial."""
    starts = crop_starts(trial.time_points, window_points, stride_points)
    return [Trial(trial.signal[:, s : s + window_points], trial.label) for s in starts]


def crop_array(signals: np.ndarray, window: int, stride: int) -> np.ndarray:
    """Vectorized crop of an (N, C, T) stack into (N, K, C, window)."""
    starts = crop_starts(signals.shape[-1], window, stride)
    return np.stack([signals[..., s : s + window] for s in starts], axis=1)
