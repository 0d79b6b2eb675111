"""Per-channel MLP stacked autoencoder.

One encoder is shared by all channels: every channel's length-T series is
pushed through T -> T/2 -> T/4 (ReLU after both layers) and the decoder
mirrors it, T/4 -> T/2 (ReLU) -> T with a linear output so reconstructions
can go negative. Gradients are derived by hand.

Checkpoint layout (little-endian)::

    b"SAEW", u16 version, u16 layer count,
    per layer: u32 fan_in, u32 fan_out,
    per layer: fan_in*fan_out f64 weights (row-major), fan_out f64 biases
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sampledom.data import Dataset, DatasetFormatError, DatasetVersionError, Trial
from sampledom.numerics import AdamWState, ShapeError, adamw_step, make_rng

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SAEW"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")


def layer_sizes(time_points: int) -> list[int]:
    t = time_points // 4
    hidden = max(time_points // 2, t)
    return [time_points, hidden, t, hidden, time_points]


@dataclass
class SaeModel:
    """Encoder layers 0-1 and decoder layers 2-3; ``weights[i]`` maps sizes[i] -> sizes[i+1]."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    history: list[float] = field(default_factory=list)

    def __post_init__(self):
        if len(self.weights) != 4 or len(self.biases) != 4:
            raise ShapeError("SaeModel needs exactly four layers")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: bias {b.shape} does not fit weight {w.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(f"layer {i}: input {w.shape[0]} does not match previous output")
        if self.weights[0].shape[0] != self.weights[3].shape[1]:
            raise ShapeError("decoder output width must equal encoder input width")

    @classmethod
    def initialize(cls, time_points: int, rng: np.random.Generator) -> "SaeModel":
        """Glorot-uniform weights, zero biases."""
        sizes = layer_sizes(time_points)
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @classmethod
    def zeros(cls, time_points: int) -> "SaeModel":
        sizes = layer_sizes(time_points)
        return cls(
            [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
            [np.zeros(b) for b in sizes[1:]],
        )

    @property
    def input_width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def code_width(self) -> int:
        return self.weights[1].shape[1]

    def parameters(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def copy(self) -> "SaeModel":
        return SaeModel([w.copy() for w in self.weights], [b.copy() for b in self.biases], list(self.history))


def _check_width(model: SaeModel, width: int) -> None:
    if width != model.input_width:
        raise ShapeError(f"trial has {width} time points, model expects {model.input_width}")


def _forward(model: SaeModel, rows: np.ndarray) -> list[np.ndarray]:
    """Activations for each layer, starting with the input rows."""
    acts = [rows]
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = acts[-1] @ w + b
        acts.append(z if i == 3 else np.maximum(z, 0.0))
    return acts


def encode_rows(model: SaeModel, rows: np.ndarray) -> np.ndarray:
    h = np.maximum(rows @ model.weights[0] + model.biases[0], 0.0)
    return np.maximum(h @ model.weights[1] + model.biases[1], 0.0)


def encode(model: SaeModel, trial: Trial | np.ndarray) -> np.ndarray:
    """Encode each channel independently; returns the (C, t) representation."""
    signal = trial.signal if isinstance(trial, Trial) else np.asarray(trial, dtype=np.float64)
    _check_width(model, signal.shape[-1])
    return encode_rows(model, signal)


def encode_dataset(model: SaeModel, dataset: Dataset) -> np.ndarray:
    """Representations of every trial as an (N, C, t) array."""
    _check_width(model, dataset.time_points)
    n, c, t = dataset.signals.shape
    return encode_rows(model, dataset.signals.reshape(n * c, t)).reshape(n, c, -1)


def reconstruct(model: SaeModel, trial: Trial | np.ndarray) -> np.ndarray:
    signal = trial.signal if isinstance(trial, Trial) else np.asarray(trial, dtype=np.float64)
    _check_width(model, signal.shape[-1])
    return _forward(model, signal)[-1]


def reconstruction_loss(model: SaeModel, signals: np.ndarray) -> float:
    """Mean squared reconstruction error over every (trial, channel, time) entry."""
    rows = np.asarray(signals, dtype=np.float64).reshape(-1, model.input_width)
    diff = _forward(model, rows)[-1] - rows
    return float(np.mean(diff * diff))


def loss_and_grads(model: SaeModel, rows: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """MSE over all entries of ``rows`` and its gradient, ordered like ``model.parameters()``."""
    acts = _forward(model, rows)
    diff = acts[-1] - rows
    loss = float(np.mean(diff * diff))
    delta = 2.0 * diff / diff.size
    gw = [None] * 4
    gb = [None] * 4
    for i in range(3, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ model.weights[i].T) * (acts[i] > 0)
    return loss, [*gw, *gb]


def train_sae(
    dataset: Dataset,
    epochs: int = 500,
    optimizer: AdamWState | None = None,
    rng: np.random.Generator | int = 0,
    batch_size: int | None = None,
    model: SaeModel | None = None,
) -> SaeModel:
    """Fit the autoencoder on every channel of every trial in ``dataset``.

    Full-batch AdamW by default; ``batch_size`` switches to shuffled
    mini-batches of channel rows. Returns the weights after the last epoch,
    with per-epoch training losses in ``model.history``.
    """
    if len(dataset) < 1:
        raise ValueError("cannot train on an empty dataset")
    if not isinstance(rng, np.random.Generator):
        rng = make_rng(rng)
    optimizer = optimizer if optimizer is not None else AdamWState()
    model = model.copy() if model is not None else SaeModel.initialize(dataset.time_points, rng)
    _check_width(model, dataset.time_points)
    rows = dataset.signals.reshape(-1, dataset.time_points)
    params = model.parameters()
    for epoch in range(1, epochs + 1):
        if batch_size is None or batch_size >= rows.shape[0]:
            loss, grads = loss_and_grads(model, rows)
            adamw_step(params, grads, optimizer)
        else:
            order = rng.permutation(rows.shape[0])
            total = 0.0
            for start in range(0, rows.shape[0], batch_size):
                batch = rows[order[start : start + batch_size]]
                batch_loss, grads = loss_and_grads(model, batch)
                adamw_step(params, grads, optimizer)
                total += batch_loss * batch.shape[0]
            loss = total / rows.shape[0]
        if not math.isfinite(loss) or not all(np.all(np.isfinite(p)) for p in params):
            raise TrainingDivergedError(epoch, loss)
        model.history.append(loss)
        if epoch % 100 == 0:
            log.debug("sae epoch %d loss %.6g", epoch, loss)
    return model


def save_checkpoint(model: SaeModel, path) -> None:
    parts = [struct.pack("<4sHH", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(model.weights))]
    parts += [struct.pack("<II", *w.shape) for w in model.weights]
    for w, b in zip(model.weights, model.biases):
        parts.append(w.astype("<f8").tobytes())
        parts.append(b.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> SaeModel:
    blob = Path(path).read_bytes()
    if len(blob) < 8 or blob[:4] != CHECKPOINT_MAGIC:
        raise DatasetFormatError("bad magic, not an SAEW checkpoint", 0)
    _, version, nlayers = struct.unpack_from("<4sHH", blob, 0)
    if version != CHECKPOINT_VERSION:
        raise DatasetVersionError(f"unsupported checkpoint version {version}", 4)
    offset = 8
    if len(blob) < offset + 8 * nlayers:
        raise DatasetFormatError("truncated layer table", len(blob))
    shapes = [struct.unpack_from("<II", blob, offset + 8 * i) for i in range(nlayers)]
    offset += 8 * nlayers
    weights, biases = [], []
    for fan_in, fan_out in shapes:
        need = 8 * (fan_in * fan_out + fan_out)
        if offset + need > len(blob):
            raise DatasetFormatError("truncated parameter block", offset)
        w = np.frombuffer(blob, "<f8", fan_in * fan_out, offset).reshape(fan_in, fan_out).astype(np.float64)
        offset += 8 * fan_in * fan_out
        b = np.frombuffer(blob, "<f8", fan_out, offset).astype(np.float64)
        offset += 8 * fan_out
        weights.append(w)
        biases.append(b)
    if offset != len(blob):
        raise DatasetFormatError(f"{len(blob) - offset} trailing bytes", offset)
    return SaeModel(weights, biases)
