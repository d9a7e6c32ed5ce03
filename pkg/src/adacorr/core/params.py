"""Named parameter tensors with gradient buffers and optimizer slots."""
from __future__ import annotations

import numpy as np


class ParamStore:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.state: dict[str, dict[str, np.ndarray]] = {}
        self.step = 0

    def add(self, name: str, value) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already exists")
        arr = np.array(value, dtype=np.float64, copy=True)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def __contains__(self, name):
        return name in self.params

    def __getitem__(self, name):
        return self.params[name]

    def names(self) -> list[str]:
        """Canonical (sorted) parameter order."""
        return sorted(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name in self.names():
            out.add(name, self.params[name])
        return out

    def set(self, name: str, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.params[name].shape:
            raise ValueError(f"{name}: shape {value.shape} != {self.params[name].shape}")
        self.params[name][...] = value
