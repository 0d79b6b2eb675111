"""Dense arithmetic helpers, seeded RNG and the AdamW optimizer.

Matrices are plain float64 numpy arrays. Randomness always comes from an
explicitly seeded ``numpy.random.Generator`` backed by PCG64; nothing here
touches numpy's global RNG.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when array shapes are not conformable."""


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    """Return a PCG64 generator. Same seed, same stream."""
    return np.random.Generator(np.random.PCG64(seed))


def child_seed(root: int, *keys: int) -> np.random.SeedSequence:
    """Deterministically derive an independent seed for a pipeline stage."""
    return np.random.SeedSequence([int(root), *(int(k) for k in keys)])


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=DTYPE)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-d matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def gaussian_noise(rng: np.random.Generator, rows: int, cols: int, sigma: float) -> np.ndarray:
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return np.zeros((rows, cols), dtype=DTYPE)
    return rng.normal(0.0, sigma, size=(rows, cols))


@dataclass
class AdamWState:
    """Optimizer hyperparameters plus first/second moment buffers.

    Moments are allocated lazily on the first step so one state object can be
    created before the parameter shapes are known.
    """

    lr: float = 0.001
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)


def adamw_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamWState) -> list[np.ndarray]:
    """Apply one AdamW update to ``params`` in place and return them.

    Weight decay is decoupled from the gradient: each parameter is first
    shrunk by ``lr * weight_decay`` and then moved by the bias-corrected Adam
    direction.
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"parameter shape {p.shape} does not match gradient shape {g.shape}")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    for p, m in zip(params, state.first_moment):
        if p.shape != m.shape:
            raise ShapeError(f"parameter shape {p.shape} does not match optimizer moment {m.shape}")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**state.step
    bias2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p *= 1.0 - state.lr * state.weight_decay
        p -= state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.epsilon)
    return params
