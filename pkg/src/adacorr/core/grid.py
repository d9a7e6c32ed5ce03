"""Field containers for single samples on the periodic unit grid."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GridField:
    """Real multi-channel field, ``data`` shaped (channels, *dims)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim < 2:
            raise ValueError("GridField data needs a channel axis and at least one grid axis")
        if not np.all(np.isfinite(arr)):
            raise ValueError("GridField contains non-finite entries")
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape[1:]

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(1.0 / n for n in self.dims)

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)


@dataclass(frozen=True)
class ComplexField:
    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        re = np.asarray(self.re, dtype=np.float64)
        im = np.asarray(self.im, dtype=np.float64)
        if re.shape != im.shape:
            raise ValueError(f"real/imag shape mismatch: {re.shape} vs {im.shape}")
        object.__setattr__(self, "re", re)
        object.__setattr__(self, "im", im)

    @classmethod
    def from_complex(cls, z) -> "ComplexField":
        z = np.asarray(z)
        return cls(z.real.copy(), z.imag.copy())

    @classmethod
    def from_grid(cls, field: GridField) -> "ComplexField":
        if field.channels != 2:
            raise ValueError("complex field needs exactly two channels")
        return cls(field.data[0], field.data[1])

    def to_complex(self) -> np.ndarray:
        return self.re + 1j * self.im

    def to_grid(self) -> GridField:
        return GridField(np.stack((self.re, self.im)))
