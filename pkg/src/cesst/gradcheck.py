"""Central finite differences, used as the independent oracle for ``backward``."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        v = v.data
    return float(np.asarray(v).reshape(-1)[0])


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-4,
                     indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """(f(x+h) - f(x-h)) / 2h per element of ``x``.

    ``x`` is left untouched; ``f`` receives fresh tensors.  When ``indices``
    (flat positions) is given only those entries are estimated and the rest
    of the returned array is zero.
    """
    base = np.array(x.data, copy=True)
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)
    todo = range(flat.size) if indices is None else indices
    with no_grad():
        for i in todo:
            orig = flat[i]
            flat[i] = orig + step
            fp = _scalar(f(Tensor(base.copy())))
            flat[i] = orig - step
            fm = _scalar(f(Tensor(base.copy())))
            flat[i] = orig
            grad[i] = (fp - fm) / (2 * step)
    return grad.reshape(base.shape)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / max(||a||, ||b||); 0 when both vanish."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


@dataclass
class GradCheckResult:
    name: str
    rel_error: float
    checked: int
    passed: bool


def check_gradients(fn: Callable[[], Tensor], tensors: dict[str, Tensor], step: float = 1e-4,
                    tol: float = 1e-4, max_entries: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None) -> list[GradCheckResult]:
    """Compare ``backward`` against central differences for each tensor in ``tensors``.

    ``fn`` is a closure producing a scalar loss from the current values of the
    tensors; entries are perturbed in place and restored.  With
    ``max_entries`` a random subset of positions per tensor is checked.
    """
    for t in tensors.values():
        t.grad = None
    loss = fn()
    backward(loss)
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}
    rng = rng or np.random.default_rng(0)
    results = []
    for name, t in tensors.items():
        flat = t.data.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            idx = np.sort(rng.choice(n, size=max_entries, replace=False))
        else:
            idx = np.arange(n)
        numeric = np.empty(len(idx))
        with no_grad():
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + step
                fp = _scalar(fn())
                flat[i] = orig - step
                fm = _scalar(fn())
                flat[i] = orig
                numeric[j] = (fp - fm) / (2 * step)
        err = relative_error(analytic[name].reshape(-1)[idx], numeric)
        results.append(GradCheckResult(name, err, len(idx), err <= tol))
    return results


def check_gradients_pooled(fn: Callable[[], Tensor], tensors: dict[str, Tensor], name: str,
                           n_entries: int = 32, step: float = 1e-4, tol: float = 1e-4,
                           rng: Optional[np.random.Generator] = None) -> GradCheckResult:
    """Like :func:`check_gradients` but samples ``n_entries`` positions across all tensors.

    Used for whole models, where checking every parameter tensor separately
    would need thousands of forward passes.
    """
    for t in tensors.values():
        t.grad = None
    backward(fn())
    rng = rng or np.random.default_rng(0)
    items = list(tensors.items())
    sizes = np.array([t.size for _, t in items])
    picks = rng.choice(int(sizes.sum()), size=min(n_entries, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    analytic, numeric = [], []
    with no_grad():
        for flat_i in np.sort(picks):
            j = int(np.searchsorted(offsets, flat_i, side="right") - 1)
            _, t = items[j]
            i = int(flat_i - offsets[j])
            g = t.grad.reshape(-1)[i] if t.grad is not None else 0.0
            flat = t.data.reshape(-1)
            orig = flat[i]
            flat[i] = orig + step
            fp = _scalar(fn())
            flat[i] = orig - step
            fm = _scalar(fn())
            flat[i] = orig
            analytic.append(g)
            numeric.append((fp - fm) / (2 * step))
    err = relative_error(np.array(analytic), np.array(numeric))
    return GradCheckResult(name, err, len(picks), err <= tol)
