"""
Finite-difference helpers shared by the test suites of every app.
"""
import numpy as np

from apps.tensorcore.tensor import Tensor, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def numerical_gradient(loss_fn, tensor: Tensor, step: float = 1e-4, entries=None) -> np.ndarray:
    """
    Central differences of scalar loss_fn() w.r.t. tensor.data.
    `entries` restricts the differences to flat indices; others are left at 0.
    """
    tensor.data = np.ascontiguousarray(tensor.data)
    grad = np.zeros(tensor.size, dtype=np.float64)
    flat = tensor.data.reshape(-1)
    indices = range(tensor.size) if entries is None else entries
    with no_grad():
        for i in indices:
            original = flat[i]
            flat[i] = original + step
            plus = loss_fn().item()
            flat[i] = original - step
            minus = loss_fn().item()
            flat[i] = original
            grad[i] = (plus - minus) / (2 * step)
    return grad.reshape(tensor.shape)


def gradient_check(loss_fn, tensors, step: float = 1e-4, max_entries: int = None, seed: int = 0) -> float:
    """
    Worst relative error between backward() and central differences over `tensors`.
    With max_entries, a seeded random subset of each tensor's entries is checked.
    """
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in tensors:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
        entries = None
        if max_entries is not None and t.size > max_entries:
            entries = rng.choice(t.size, size=max_entries, replace=False)
        numeric = numerical_gradient(loss_fn, t, step, entries)
        if entries is not None:
            analytic = analytic.reshape(-1)[entries]
            numeric = numeric.reshape(-1)[entries]
        worst = max(worst, relative_error(analytic, numeric))
    return worst
