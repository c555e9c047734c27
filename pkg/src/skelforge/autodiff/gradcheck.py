"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_grad(f: Callable[[Sequence[np.ndarray]], float], arrays: Sequence[np.ndarray], step: float = 1e-5) -> list[np.ndarray]:
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            fp = f(arrays)
            flat[i] = old - step
            fm = f(arrays)
            flat[i] = old
            gflat[i] = (fp - fm) / (2.0 * step)
        grads.append(g)
    return grads


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def check_gradients(
    fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], step: float = 1e-5
) -> float:
    """Largest relative error between autodiff and central differences over all inputs.

    ``fn`` receives one Tensor per array and must return a scalar Tensor.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    fn(*leaves).backward()
    analytic = [leaf.grad if leaf.grad is not None else np.zeros(leaf.shape) for leaf in leaves]

    def scalar(arrs):
        return fn(*[Tensor(a) for a in arrs]).item()

    numeric = numeric_grad(scalar, arrays, step)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))
