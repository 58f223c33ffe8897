"""Bridge between flat numpy parameter vectors and torch autograd."""

from __future__ import annotations

from typing import Callable

import numpy as np
import torch

DTYPE = torch.float64


def as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def value_and_grad(fn: Callable[[torch.Tensor], torch.Tensor]) -> Callable[[np.ndarray], tuple[float, np.ndarray]]:
    """Wrap a scalar torch function of a flat vector as ``x -> (value, gradient)``."""

    def wrapped(x: np.ndarray) -> tuple[float, np.ndarray]:
        t = torch.tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
        out = fn(t)
        (grad,) = torch.autograd.grad(out, t, allow_unused=True)
        g = np.zeros_like(x, dtype=np.float64) if grad is None else grad.detach().numpy().copy()
        return float(out.detach()), g

    return wrapped


def value_only(fn: Callable[[torch.Tensor], torch.Tensor]) -> Callable[[np.ndarray], float]:
    def wrapped(x: np.ndarray) -> float:
        with torch.no_grad():
            return float(fn(torch.as_tensor(np.asarray(x, dtype=np.float64))))

    return wrapped
