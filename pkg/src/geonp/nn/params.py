from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor, get_default_dtype


class ParamStore:
    """Named tensors with a per-entry trainability flag.

    Iteration is always in sorted-name order so that optimizer updates,
    gradient norms and checkpoints are reproducible.
    """

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"parameter {name!r} already registered")
        t = Tensor(np.array(value, dtype=get_default_dtype()), requires_grad=trainable)
        self._tensors[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._tensors))

    def names(self) -> list[str]:
        return sorted(self._tensors)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(k, self._tensors[k]) for k in sorted(self._tensors)]

    def trainable_items(self) -> list[tuple[str, Tensor]]:
        return [(k, t) for k, t in self.items() if self._trainable[k]]

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def num_parameters(self, trainable_only: bool = True) -> int:
        items = self.trainable_items() if trainable_only else self.items()
        return sum(t.size for _, t in items)

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._tensors) - set(state)
        unexpected = set(state) - set(self._tensors)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, t in self._tensors.items():
            value = np.asarray(state[name])
            if value.shape != t.shape:
                raise ValueError(f"{name}: shape {value.shape} != {t.shape}")
            t.data = value.astype(t.dtype, copy=True)
            t.zero_grad()

    def astype(self, dtype) -> None:
        """Convert every tensor in place (used for 64-bit gradient checks)."""
        for t in self._tensors.values():
            t.data = t.data.astype(dtype)
            t.zero_grad()
