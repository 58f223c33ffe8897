"""Adam, ReduceLROnPlateau and a central finite-difference gradient oracle.

All three operate on flat float64 vectors. Model code packs its tensors with
:class:`ParamPack` and hands the optimizer a plain vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    learning_rate: float = 1e-3

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.first_moment.shape != self.second_moment.shape:
            raise ValueError("moment vectors differ in length")

    @classmethod
    def zeros(cls, size: int, **kwargs) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), **kwargs)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update. Mutates and returns ``state``."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if not (params.shape == grads.shape == state.first_moment.shape):
        raise ValueError(
            f"length mismatch: params {params.shape}, grads {grads.shape}, "
            f"moments {state.first_moment.shape}"
        )
    state.step_count += 1
    t = state.step_count
    state.first_moment = state.beta1 * state.first_moment + (1 - state.beta1) * grads
    state.second_moment = state.beta2 * state.second_moment + (1 - state.beta2) * grads * grads
    m_hat = state.first_moment / (1 - state.beta1 ** t)
    v_hat = state.second_moment / (1 - state.beta2 ** t)
    new = params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return new, state


@dataclass
class PlateauState:
    current_lr: float = 1e-3
    patience: int = 10
    factor: float = 0.5
    min_lr: float = 1e-6
    best_metric: float = math.inf
    bad_epochs: int = 0

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ValueError("factor must lie in (0, 1)")
        self.current_lr = max(self.current_lr, self.min_lr)


def plateau_step(state: PlateauState, metric: float) -> PlateauState:
    """Track a metric to be minimized; shrink the rate after ``patience`` bad epochs."""
    if metric < state.best_metric:
        state.best_metric = metric
        state.bad_epochs = 0
        return state
    state.bad_epochs += 1
    if state.bad_epochs > state.patience:
        state.current_lr = max(state.current_lr * state.factor, state.min_lr)
        state.bad_epochs = 0
    return state


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-4) -> np.ndarray:
    if h <= 0:
        raise ValueError("h must be > 0")
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a, b) -> float:
    """Norm-wise relative difference, safe when both vectors vanish."""
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


@dataclass
class ParamPack:
    """Ordered name -> shape layout for flattening a dict of arrays."""

    shapes: dict[str, tuple[int, ...]] = field(default_factory=dict)

    @classmethod
    def of(cls, arrays: dict[str, np.ndarray]) -> "ParamPack":
        return cls({k: tuple(np.shape(v)) for k, v in arrays.items()})

    @property
    def size(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes.values())

    def flatten(self, arrays: dict[str, np.ndarray]) -> np.ndarray:
        if not self.shapes:
            return np.zeros(0)
        return np.concatenate([np.asarray(arrays[k], dtype=np.float64).ravel() for k in self.shapes])

    def unflatten(self, vec) -> dict:
        """Split ``vec`` (numpy array or torch tensor) back into named views."""
        out, pos = {}, 0
        for k, shape in self.shapes.items():
            size = int(np.prod(shape))
            out[k] = vec[pos:pos + size].reshape(shape)
            pos += size
        return out


def train_loop(
    loss_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0: np.ndarray,
    epochs: int,
    lr: float,
    scheduler: PlateauState | None = None,
    **adam_kwargs,
) -> tuple[np.ndarray, list[float]]:
    """Full-batch Adam loop over ``loss_and_grad(x, epoch) -> (loss, grad)``.

    Returns the final parameters and the loss recorded before each step.
    """
    x = np.array(x0, dtype=np.float64)
    state = AdamState.zeros(x.size, learning_rate=lr, **adam_kwargs)
    trace: list[float] = []
    for epoch in range(epochs):
        loss, grad = loss_and_grad(x, epoch)
        trace.append(float(loss))
        x, state = adam_step(state, x, grad)
        if scheduler is not None:
            plateau_step(scheduler, float(loss))
            state.learning_rate = scheduler.current_lr
    return x, trace
