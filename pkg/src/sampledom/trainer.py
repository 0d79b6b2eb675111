"""Reference classifier, dominance-weighted cross-entropy and the evaluation grid."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from sampledom.data import Dataset, Trial, crop_array, holdout_indices, split
from sampledom.dominance import CurriculumSchedule, DominanceRecord, curriculum_weights, estimate_all
from sampledom.kde import KdeConfig
from sampledom.numerics import AdamWState, ShapeError, adamw_step, child_seed, make_rng
from sampledom.sae import TrainingDivergedError, train_sae

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12
CONDITIONS = ("baseline/no_crop", "weighted/no_crop", "baseline/crop", "weighted/crop")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 0.001
    weight_decay: float = 0.01
    batch_size: int = 16
    hidden: int = 64
    schedule: CurriculumSchedule = field(default_factory=CurriculumSchedule)
    use_crops: bool = False
    crop_window: int = 200
    crop_stride: int = 25
    early_stopping: bool = True
    early_stop_after: int = 180
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.early_stopping and not self.early_stop_after < self.epochs:
            raise ValueError(f"early stopping after epoch {self.early_stop_after} needs epochs > {self.early_stop_after}")
        if self.batch_size < 1 or self.hidden < 1:
            raise ValueError("batch_size and hidden must be >= 1")


@dataclass
class ClassifierModel:
    """One-hidden-layer ReLU network with a softmax head over flattened (C, window) input.

    ``input_scale`` divides raw signals before the first layer. When
    ``window`` is set the model was trained on crops and predicts by
    averaging the class probabilities of every crop.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    channels: int
    input_scale: float = 1.0
    window: int | None = None
    stride: int | None = None
    history: dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, channels: int, width: int, hidden: int, num_classes: int, rng, **kw) -> "ClassifierModel":
        d = channels * width
        lim1 = math.sqrt(6.0 / (d + hidden))
        lim2 = math.sqrt(6.0 / (hidden + num_classes))
        return cls(
            rng.uniform(-lim1, lim1, size=(d, hidden)),
            np.zeros(hidden),
            rng.uniform(-lim2, lim2, size=(hidden, num_classes)),
            np.zeros(num_classes),
            channels,
            **kw,
        )

    @property
    def input_width(self) -> int:
        return self.w1.shape[0] // self.channels

    @property
    def num_classes(self) -> int:
        return self.w2.shape[1]

    def parameters(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]

    def snapshot(self) -> list[np.ndarray]:
        return [p.copy() for p in self.parameters()]

    def restore(self, params: list[np.ndarray]) -> None:
        for dst, src in zip(self.parameters(), params):
            dst[...] = src


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(model: ClassifierModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hidden activations and class probabilities for a batch of flattened inputs."""
    hidden = np.maximum(x @ model.w1 + model.b1, 0.0)
    return hidden, softmax(hidden @ model.w2 + model.b2)


class LogClampCounter:
    """Counts cross-entropy terms whose probability hit the log floor."""

    count = 0


def weighted_ce_loss(probs, label: int, gamma: float) -> float:
    """``-gamma * log(probs[label])`` with the probability floored at 1e-12."""
    p = float(np.asarray(probs)[label])
    if p < LOG_FLOOR:
        LogClampCounter.count += 1
        p = LOG_FLOOR
    return -gamma * math.log(p)


def batch_loss(probs: np.ndarray, labels: np.ndarray, gammas: np.ndarray) -> float:
    """Mean over the batch of the per-sample weighted cross-entropy."""
    p = probs[np.arange(len(labels)), labels]
    clamped = p < LOG_FLOOR
    if clamped.any():
        LogClampCounter.count += int(clamped.sum())
    return float(np.mean(-gammas * np.log(np.maximum(p, LOG_FLOOR))))


def loss_and_grads(model: ClassifierModel, x: np.ndarray, labels: np.ndarray, gammas: np.ndarray):
    """Weighted CE on one batch and gradients ordered like ``model.parameters()``.

    The gradient w.r.t. the logits of sample j is gamma_j * (softmax - onehot) / B.
    """
    hidden, probs = forward(model, x)
    loss = batch_loss(probs, labels, gammas)
    d_logits = probs.copy()
    d_logits[np.arange(len(labels)), labels] -= 1.0
    d_logits *= (gammas / len(labels))[:, None]
    g_w2 = hidden.T @ d_logits
    g_b2 = d_logits.sum(axis=0)
    d_hidden = (d_logits @ model.w2.T) * (hidden > 0)
    g_w1 = x.T @ d_hidden
    g_b1 = d_hidden.sum(axis=0)
    return loss, [g_w1, g_b1, g_w2, g_b2]


def _model_inputs(model: ClassifierModel, signals: np.ndarray) -> np.ndarray:
    """(N, K, C*window) crop stack, K = 1 without cropping."""
    signals = np.asarray(signals, dtype=np.float64)
    if signals.ndim == 2:
        signals = signals[None]
    if signals.shape[1] != model.channels:
        raise ShapeError(f"model expects {model.channels} channels, got {signals.shape[1]}")
    if model.window is None:
        if signals.shape[2] != model.input_width:
            raise ShapeError(f"model expects {model.input_width} time points, got {signals.shape[2]}")
        crops = signals[:, None]
    else:
        if signals.shape[2] < model.window:
            raise ShapeError(f"trial has {signals.shape[2]} time points, shorter than the crop window {model.window}")
        crops = crop_array(signals, model.window, model.stride)
    n, k = crops.shape[:2]
    return crops.reshape(n, k, -1) / model.input_scale


def predict_proba(model: ClassifierModel, signals: np.ndarray) -> np.ndarray:
    """Class probabilities for an (N, C, T) stack, averaged over crops when cropping."""
    x = _model_inputs(model, signals)
    n, k, d = x.shape
    _, probs = forward(model, x.reshape(n * k, d))
    return probs.reshape(n, k, -1).mean(axis=1)


def predict(model: ClassifierModel, trial: Trial | np.ndarray) -> tuple[int, np.ndarray]:
    signal = trial.signal if isinstance(trial, Trial) else trial
    probs = predict_proba(model, signal)[0]
    return int(np.argmax(probs)), probs


def mean_ce(model: ClassifierModel, dataset: Dataset) -> float:
    probs = predict_proba(model, dataset.signals)
    return batch_loss(probs, dataset.labels, np.ones(len(dataset)))


def training_examples(model: ClassifierModel, train: Dataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flattened model inputs, labels and parent-trial index for every (crop of every) trial.

    Per-example weights are ``trial_weights[parent]``, so each crop carries its
    parent trial's dominance weight.
    """
    x = _model_inputs(model, train.signals)
    n, k, d = x.shape
    return x.reshape(n * k, d), np.repeat(train.labels, k), np.repeat(np.arange(n), k)


def train_classifier(
    train: Dataset,
    val: Dataset | None,
    records: list[DominanceRecord] | None,
    cfg: TrainConfig = TrainConfig(),
) -> ClassifierModel:
    """Train on dominance-weighted cross-entropy with the curriculum ramp.

    ``records=None`` trains the baseline (every weight 1). Crops inherit their
    parent trial's weight. With early stopping, the returned weights are the
    ones with the lowest validation loss among epochs after
    ``cfg.early_stop_after``; otherwise the last epoch's.
    """
    if records is None:
        clamped = np.ones(len(train))
    else:
        if len(records) != len(train):
            raise ValueError(f"{len(records)} dominance records for {len(train)} training trials")
        clamped = np.array([r.clamped_score for r in records])
        if np.any(clamped < 0) or np.any(clamped > 1):
            raise ValueError("clamped scores must lie in [0, 1]")

    rng = make_rng(cfg.seed)
    window = cfg.crop_window if cfg.use_crops else None
    stride = cfg.crop_stride if cfg.use_crops else None
    width = window if cfg.use_crops else train.time_points
    scale = float(np.std(train.signals)) or 1.0
    model = ClassifierModel.initialize(
        train.channels, width, cfg.hidden, train.num_classes, rng, input_scale=scale, window=window, stride=stride
    )

    x, labels, parent = training_examples(model, train)
    n, k = len(train), x.shape[0] // len(train)

    opt = AdamWState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    params = model.parameters()
    use_val = cfg.early_stopping and val is not None and len(val) > 0
    best_loss, best_params, best_epoch = math.inf, None, None
    train_hist, val_hist = [], []
    for epoch in range(1, cfg.epochs + 1):
        gammas = curriculum_weights(clamped, epoch, cfg.schedule)[parent]
        order = rng.permutation(n * k)
        total = 0.0
        for start in range(0, n * k, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = loss_and_grads(model, x[idx], labels[idx], gammas[idx])
            adamw_step(params, grads, opt)
            total += loss * idx.size
        epoch_loss = total / (n * k)
        if not math.isfinite(epoch_loss):
            raise TrainingDivergedError(epoch, epoch_loss)
        train_hist.append(epoch_loss)
        if use_val:
            vl = mean_ce(model, val)
            val_hist.append(vl)
            if epoch > cfg.early_stop_after and vl < best_loss:
                best_loss, best_params, best_epoch = vl, model.snapshot(), epoch
    if best_params is not None:
        model.restore(best_params)
    model.history = {"train_loss": train_hist, "val_loss": val_hist, "best_epoch": best_epoch}
    return model


def save_classifier(model: ClassifierModel, path) -> None:
    """Write parameters and input handling to an ``.npz`` archive (no pickling)."""
    with open(path, "wb") as fh:
        np.savez(
            fh,
            w1=model.w1, b1=model.b1, w2=model.w2, b2=model.b2,
            meta=np.array([model.channels, model.input_scale, model.window or 0, model.stride or 0], dtype=np.float64),
        )


def load_classifier(path) -> ClassifierModel:
    with np.load(path, allow_pickle=False) as z:
        channels, scale, window, stride = z["meta"].tolist()
        return ClassifierModel(
            z["w1"], z["b1"], z["w2"], z["b2"], int(channels), float(scale),
            int(window) or None, int(stride) or None,
        )


# ---------------------------------------------------------------------------
# evaluation harness


@dataclass
class EvalReport:
    condition: str
    per_fold: list[float]
    confusion: list[list[int]]

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_fold))

    @property
    def std(self) -> float:
        return float(np.std(self.per_fold, ddof=1)) if len(self.per_fold) > 1 else 0.0

    def to_dict(self) -> dict:
        return {"per_fold": self.per_fold, "mean": self.mean, "std": self.std, "confusion": self.confusion}


@dataclass
class Evaluation:
    reports: dict[str, EvalReport]
    seeds: list[int]
    num_folds: int
    settings: dict = field(default_factory=dict)

    def delta(self, crop: str) -> float | None:
        b, w = self.reports.get(f"baseline/{crop}"), self.reports.get(f"weighted/{crop}")
        if b is None or w is None:
            return None
        return w.mean - b.mean

    def seed_means(self, condition: str) -> list[float]:
        acc = self.reports[condition].per_fold
        return [float(np.mean(acc[i : i + self.num_folds])) for i in range(0, len(acc), self.num_folds)]

    def to_dict(self) -> dict:
        deltas = {c: self.delta(c) for c in ("no_crop", "crop") if self.delta(c) is not None}
        return {
            "seeds": self.seeds,
            "num_folds": self.num_folds,
            "settings": self.settings,
            "conditions": {name: r.to_dict() for name, r in self.reports.items()},
            "deltas": deltas,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        """Plain-text accuracy table, one row per condition: mean (std) in percent."""
        labels = {"no_crop": "w/o crop.", "crop": "with crop."}
        lines = [f"{'Cropping':<12}{'Method':<12}{'Accuracy':>18}", "-" * 42]
        for crop in ("no_crop", "crop"):
            for method, name in (("baseline", "Baseline"), ("weighted", "Weighted")):
                r = self.reports.get(f"{method}/{crop}")
                if r is not None:
                    lines.append(f"{labels[crop]:<12}{name:<12}{f'{r.mean:.2f} ({r.std:.2f})':>18}")
        return "\n".join(lines)


def _accuracy(model: ClassifierModel, test: Dataset, confusion: np.ndarray) -> float:
    pred = np.argmax(predict_proba(model, test.signals), axis=1)
    np.add.at(confusion, (test.labels, pred), 1)
    return float(100.0 * np.mean(pred == test.labels))


def evaluate(
    dataset: Dataset,
    kde_cfg: KdeConfig = KdeConfig(),
    train_cfg: TrainConfig = TrainConfig(),
    num_folds: int = 4,
    seeds=(0,),
    sae_epochs: int = 500,
    psi: float = 90.0,
    psi_mode: str = "percentile",
    crop_modes=("no_crop", "crop"),
    progress=None,
    sae_lr: float = 0.001,
    sae_weight_decay: float = 0.01,
) -> Evaluation:
    """Baseline vs dominance-weighted accuracy across seeds and stratified folds.

    For every (seed, fold): split, hold out a stratified validation slice of
    the training part, fit the autoencoder on the remaining training trials,
    score them, then train baseline and weighted classifiers from the same
    initialization and batch order and test both on the held-out fold.
    """
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("at least one seed is required")
    crop_modes = [c for c in ("no_crop", "crop") if c in crop_modes]
    if not crop_modes:
        raise ValueError("crop_modes must include 'no_crop' and/or 'crop'")
    o = dataset.num_classes
    acc = {f"{m}/{c}": [] for c in crop_modes for m in ("baseline", "weighted")}
    conf = {name: np.zeros((o, o), dtype=np.int64) for name in acc}
    for seed in seeds:
        for fold in range(num_folds):
            split_seed = int(child_seed(seed, 1).generate_state(1)[0])
            train_full, test = split(dataset, fold, num_folds, split_seed)
            keep, held = holdout_indices(train_full, train_cfg.val_fraction, split_seed + fold + 1)
            train, val = train_full.subset(keep), train_full.subset(held)
            sae = train_sae(
                train,
                epochs=sae_epochs,
                optimizer=AdamWState(lr=sae_lr, weight_decay=sae_weight_decay),
                rng=make_rng(child_seed(seed, 2, fold)),
            )
            records = estimate_all(train, sae, kde_cfg, psi, psi_mode)
            run_seed = int(child_seed(seed, 3, fold).generate_state(1)[0])
            for crop in crop_modes:
                cfg = replace(train_cfg, use_crops=(crop == "crop"), seed=run_seed)
                for method in ("baseline", "weighted"):
                    model = train_classifier(train, val, records if method == "weighted" else None, cfg)
                    name = f"{method}/{crop}"
                    acc[name].append(_accuracy(model, test, conf[name]))
            if progress is not None:
                progress(seed, fold, {k: v[-1] for k, v in acc.items()})
    reports = {name: EvalReport(name, acc[name], conf[name].tolist()) for name in CONDITIONS if name in acc}
    settings = {
        "kde": asdict(kde_cfg),
        "train": {**asdict(train_cfg), "seed": None, "use_crops": None},
        "sae_epochs": sae_epochs,
        "sae_lr": sae_lr,
        "sae_weight_decay": sae_weight_decay,
        "psi": psi,
        "psi_mode": psi_mode,
    }
    return Evaluation(reports, seeds, num_folds, settings)
