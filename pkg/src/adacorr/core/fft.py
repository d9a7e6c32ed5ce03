"""Iterative radix-2 FFT along the last axis, vectorised over leading axes."""
from functools import lru_cache

import numpy as np


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@lru_cache(maxsize=None)
def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=None)
def _twiddles(m: int) -> np.ndarray:
    # exp(-2*pi*i*j/(2m)) for j < m, evaluated directly (no recurrence drift)
    return np.exp(-1j * np.pi * np.arange(m) / m)


def _check_length(n: int) -> None:
    if not is_power_of_two(n):
        raise ValueError(f"FFT length must be a power of two, got {n}")


def fft(x) -> np.ndarray:
    """Unnormalised forward DFT, X[k] = sum_n x[n] exp(-2 pi i k n / N)."""
    a = np.asarray(x, dtype=np.complex128)
    n = a.shape[-1]
    _check_length(n)
    lead = a.shape[:-1]
    a = a[..., _bit_reverse(n)]
    m = 1
    while m < n:
        blocks = a.reshape(*lead, n // (2 * m), 2, m)
        even = blocks[..., 0, :]
        odd = blocks[..., 1, :] * _twiddles(m)
        a = np.stack((even + odd, even - odd), axis=-2).reshape(*lead, n)
        m *= 2
    return a


def ifft(x) -> np.ndarray:
    """Inverse DFT with the 1/N factor, so ``ifft(fft(x)) == x``."""
    a = np.asarray(x, dtype=np.complex128)
    n = a.shape[-1]
    return np.conj(fft(np.conj(a))) / n


def fftfreq_signed(n: int) -> np.ndarray:
    """Integer wavenumbers in (-N/2, N/2] matching the FFT output order."""
    k = np.arange(n)
    return np.where(k <= n // 2, k, k - n)


def dft_reference(x) -> np.ndarray:
    """O(N^2) direct DFT; test oracle only."""
    a = np.asarray(x, dtype=np.complex128)
    n = a.shape[-1]
    k = np.arange(n)
    mat = np.exp(-2j * np.pi * np.outer(k, k) / n)
    return a @ mat.T
