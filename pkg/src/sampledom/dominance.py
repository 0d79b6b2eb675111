"""Two-stage dominance scoring and the curriculum ramp.

Stage one collapses each encoded trial (C x t) to one representative value
per encoded time point: the channel value of highest KDE density among that
time point's C channel values. Stage two scores each trial against the other
trials of its class: at every time point a trial's representative value gets
its density among the class's values, and the raw score is the mean over
time. Raw scores are normalized by the class maximum and the most dominant
samples are clamped to 1.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from sampledom.data import Dataset
from sampledom.kde import KdeConfig, columnwise_self_density, silverman_bandwidth, DegenerateDistributionError
from sampledom.sae import SaeModel, encode_dataset

TIE_TOLERANCE = 1e-12


@dataclass(frozen=True)
class CurriculumSchedule:
    start: int = 50  # T1
    end: int = 150  # T2

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ValueError(f"curriculum needs 0 <= start < end, got start={self.start}, end={self.end}")


@dataclass(frozen=True)
class DominanceRecord:
    trial_index: int
    label: int
    raw_score: float
    clamped_score: float
    curriculum_weight: float
    provenance: str | None = None

    @property
    def is_dominant(self) -> bool:
        return self.clamped_score == 1.0

    def at_epoch(self, epoch: int, schedule: CurriculumSchedule) -> "DominanceRecord":
        return replace(self, curriculum_weight=curriculum_weight(self.clamped_score, epoch, schedule))


def _bandwidths(values: np.ndarray, cfg: KdeConfig):
    """Scalar bandwidth, or one per column under the Silverman rule."""
    if cfg.bandwidth_rule != "silverman":
        return cfg.bandwidth
    hs = np.empty(values.shape[1])
    for j in range(values.shape[1]):
        try:
            hs[j] = silverman_bandwidth(values[:, j])
        except DegenerateDistributionError:
            hs[j] = cfg.bandwidth
    return hs


def channel_wise_representative(rep: np.ndarray, cfg: KdeConfig = KdeConfig()) -> np.ndarray:
    """Collapse a (C, t) representation to its length-t representative series.

    At each time point the channel value with the highest density among that
    time point's channel values wins; values tied with the maximum (within
    1e-12) are averaged.
    """
    rep = np.asarray(rep, dtype=np.float64)
    if rep.ndim != 2 or rep.shape[0] < 1:
        raise ValueError(f"representation must be (C, t) with C >= 1, got {rep.shape}")
    dens = columnwise_self_density(rep, _bandwidths(rep, cfg))
    winners = dens >= dens.max(axis=0, keepdims=True) - TIE_TOLERANCE
    return (rep * winners).sum(axis=0) / winners.sum(axis=0)


def sample_wise_scores(batch: np.ndarray, cfg: KdeConfig = KdeConfig()) -> np.ndarray:
    """Raw dominance score of each row of an (M, t) same-class batch.

    Each row's value at a time point is scored by the KDE of the M values at
    that time point (its own term included); the raw score is the mean of
    these t densities.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] < 2:
        raise ValueError(f"sample-wise scoring needs an (M, t) batch with M >= 2, got {batch.shape}")
    return columnwise_self_density(batch, _bandwidths(batch, cfg)).mean(axis=1)


def clamp_scores(raw_scores, psi: float = 90.0, mode: str = "percentile") -> np.ndarray:
    """Normalize raw scores by their maximum, then set dominant samples to exactly 1.

    ``mode="percentile"``: samples at or above the (100 - psi)-th percentile
    of the normalized scores are dominant, i.e. roughly the top psi percent.
    ``mode="absolute"``: samples whose normalized score is at least psi/100
    are dominant.
    """
    raw = np.asarray(raw_scores, dtype=np.float64)
    if raw.size == 0 or not np.all(np.isfinite(raw)):
        raise ValueError("raw scores must be finite and non-empty")
    if not 0.0 < psi < 100.0:
        raise ValueError(f"psi must lie in (0, 100), got {psi}")
    top = raw.max()
    if not top > 0:
        raise ValueError("raw scores must have a positive maximum")
    normalized = raw / top
    if mode == "percentile":
        threshold = np.percentile(normalized, 100.0 - psi)
    elif mode == "absolute":
        threshold = psi / 100.0
    else:
        raise ValueError(f"unknown psi mode {mode!r}")
    return np.where(normalized >= threshold, 1.0, normalized)


def curriculum_weight(clamped: float, epoch: int, schedule: CurriculumSchedule = CurriculumSchedule()) -> float:
    """Linear ramp from ``clamped`` at epoch T1 to 1 at epoch T2."""
    if epoch < schedule.start:
        return clamped
    if epoch > schedule.end:
        return 1.0
    frac = (epoch - schedule.start) / (schedule.end - schedule.start)
    return clamped + (1.0 - clamped) * frac


def curriculum_weights(clamped, epoch: int, schedule: CurriculumSchedule = CurriculumSchedule()) -> np.ndarray:
    clamped = np.asarray(clamped, dtype=np.float64)
    if epoch < schedule.start:
        return clamped.copy()
    if epoch > schedule.end:
        return np.ones_like(clamped)
    frac = (epoch - schedule.start) / (schedule.end - schedule.start)
    return clamped + (1.0 - clamped) * frac


def representative_series(representations: np.ndarray, cfg: KdeConfig = KdeConfig()) -> np.ndarray:
    """Stage one over an (N, C, t) stack; returns (N, t)."""
    return np.stack([channel_wise_representative(r, cfg) for r in representations])


def score_representatives(
    series: np.ndarray, labels, num_classes: int, cfg: KdeConfig = KdeConfig(), psi: float = 90.0, psi_mode: str = "percentile"
) -> tuple[np.ndarray, np.ndarray]:
    """Stage two plus clamping. Returns (raw, clamped), aligned with ``series`` rows."""
    labels = np.asarray(labels)
    raw = np.empty(len(labels))
    clamped = np.empty(len(labels))
    for k in range(num_classes):
        idx = np.flatnonzero(labels == k)
        if idx.size == 0:
            continue
        if idx.size < 2:
            raise ValueError(f"class {k} has {idx.size} trial(s); dominance scoring needs at least 2 per class")
        raw[idx] = sample_wise_scores(series[idx], cfg)
        clamped[idx] = clamp_scores(raw[idx], psi, psi_mode)
    return raw, clamped


def estimate_all(
    dataset: Dataset,
    sae: SaeModel,
    cfg: KdeConfig = KdeConfig(),
    psi: float = 90.0,
    psi_mode: str = "percentile",
) -> list[DominanceRecord]:
    """Dominance records for every trial, in dataset order (epoch-0 weights)."""
    series = representative_series(encode_dataset(sae, dataset), cfg)
    raw, clamped = score_representatives(series, dataset.labels, dataset.num_classes, cfg, psi, psi_mode)
    prov = dataset.provenance or [None] * len(dataset)
    return [
        DominanceRecord(i, int(dataset.labels[i]), float(raw[i]), float(clamped[i]), float(clamped[i]), prov[i])
        for i in range(len(dataset))
    ]


SCORE_COLUMNS = ["trial_index", "class", "raw_score", "clamped_score", "is_dominant", "provenance"]


def write_score_report(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCORE_COLUMNS)
        for r in records:
            w.writerow([r.trial_index, r.label, repr(r.raw_score), repr(r.clamped_score), int(r.is_dominant), r.provenance or ""])


def read_score_report(path) -> list[DominanceRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SCORE_COLUMNS:
            raise ValueError(f"not a score report: header {header}")
        for lineno, row in enumerate(reader, start=2):
            try:
                idx, label, raw, clamped = int(row[0]), int(row[1]), float(row[2]), float(row[3])
            except (ValueError, IndexError) as exc:
                raise ValueError(f"line {lineno}: {exc}") from None
            records.append(DominanceRecord(idx, label, raw, clamped, clamped, row[5] or None))
    return records
