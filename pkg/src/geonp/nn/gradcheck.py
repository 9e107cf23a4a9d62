"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, record_kinks

# gradients whose norm is below this are compared in absolute terms
GRAD_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)`` over one tensor."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    if analytic.size == 0:
        return 0.0
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / denom)


def numerical_gradient(loss_fn: Callable[[], Tensor], tensor: Tensor, eps: float = 1e-3,
                       indices: Sequence[tuple] | None = None) -> tuple[list[tuple], np.ndarray]:
    """Central differences of ``loss_fn()`` w.r.t. entries of ``tensor``.

    ``tensor.data`` is perturbed in place and restored.
    """
    if indices is None:
        indices = list(np.ndindex(*tensor.shape))
    out = np.empty(len(indices), dtype=np.float64)
    for k, idx in enumerate(indices):
        orig = tensor.data[idx].copy()
        tensor.data[idx] = orig + eps
        plus = float(loss_fn().data)
        tensor.data[idx] = orig - eps
        minus = float(loss_fn().data)
        tensor.data[idx] = orig
        out[k] = (plus - minus) / (2 * eps)
    return list(indices), out


def _kink_signature(loss_fn: Callable[[], Tensor]) -> list[np.ndarray]:
    with record_kinks() as log:
        loss_fn()
    return [m.copy() for m in log]


def _crosses_kink(loss_fn: Callable[[], Tensor], tensor: Tensor, idx: tuple, eps: float,
                  base: list[np.ndarray]) -> bool:
    """True when moving one entry by +-eps flips any relu or clamp branch."""
    orig = tensor.data[idx].copy()
    try:
        for step in (eps, -eps):
            tensor.data[idx] = orig + step
            sig = _kink_signature(loss_fn)
            if len(sig) != len(base) or any(not np.array_equal(a, b) for a, b in zip(sig, base)):
                return True
    finally:
        tensor.data[idx] = orig
    return False


def check_gradients(loss_fn: Callable[[], Tensor], tensors: dict[str, Tensor], eps: float = 1e-3,
                    max_entries: int | None = None, rng: np.random.Generator | None = None,
                    skip_kinks: bool = False) -> dict[str, float]:
    """Compare backprop against central differences for each named tensor.

    With ``max_entries`` only a random subset of each tensor's entries is
    perturbed. With ``skip_kinks`` entries whose perturbation flips a relu or
    clamp branch are passed over, since central differences straddle the kink
    there; the remaining entries are sampled in random order. Returns the max
    relative error per tensor.
    """
    for t in tensors.values():
        t.zero_grad()
    loss = loss_fn()
    backward(loss)
    analytic = {name: t.grad.copy() for name, t in tensors.items()}
    errors = {}
    for name, t in tensors.items():
        all_idx = list(np.ndindex(*t.shape))
        if skip_kinks:
            rng = rng or np.random.default_rng(0)
            base = _kink_signature(loss_fn)
            limit = len(all_idx) if max_entries is None else max_entries
            kept = []
            for i in rng.permutation(len(all_idx)):
                if len(kept) == limit:
                    break
                if not _crosses_kink(loss_fn, t, all_idx[i], eps, base):
                    kept.append(all_idx[i])
            all_idx = sorted(kept)
        elif max_entries is not None and len(all_idx) > max_entries:
            rng = rng or np.random.default_rng(0)
            pick = rng.choice(len(all_idx), size=max_entries, replace=False)
            all_idx = [all_idx[i] for i in sorted(pick)]
        idx, numeric = numerical_gradient(loss_fn, t, eps, all_idx)
        a = np.array([analytic[name][i] for i in idx])
        errors[name] = relative_error(a, numeric)
    for t in tensors.values():
        t.zero_grad()
    return errors
