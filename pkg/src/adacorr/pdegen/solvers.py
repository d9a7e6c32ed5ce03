"""Initial-condition samplers and reference solvers on the periodic unit grid.

Grid points are x_i = i / N, i = 0..N-1. Solvers are vectorised over any
leading (sample) axes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..core.fft import fft, fftfreq_signed, ifft, is_power_of_two

PDES = ("te2d", "cac2d", "lse1d", "nls1d")
HORIZONS = {"te2d": 0.05, "cac2d": 0.5, "lse1d": 0.025, "nls1d": 0.025}
RESOLUTIONS = {"te2d": 64, "cac2d": 32, "lse1d": 128, "nls1d": 128}
SOLVER_DT = {"te2d": 0.0, "cac2d": 1e-4, "lse1d": 1e-4, "nls1d": 1e-4}
PAPER_CAC_DT = 1e-5


class SolverInstability(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"solution blew up at step {step} (max |u| = {value:.3g})")
        self.step = step


@dataclass(frozen=True)
class PdeSpec:
    pde: str
    resolution: int = 0
    dt_solver: float = 0.0
    horizon: float = 0.0
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.pde not in PDES:
            raise ValueError(f"unknown pde {self.pde!r}; choose from {PDES}")
        if not self.resolution:
            object.__setattr__(self, "resolution", RESOLUTIONS[self.pde])
        if not self.horizon:
            object.__setattr__(self, "horizon", HORIZONS[self.pde])
        if not self.dt_solver:
            object.__setattr__(self, "dt_solver", SOLVER_DT[self.pde])
        defaults = {"epsilon": 0.01, "V": 1.0, "lambda": 1.0}
        object.__setattr__(self, "params", {**defaults, **dict(self.params)})
        if self.pde != "te2d":
            ratio = self.horizon / self.dt_solver
            if abs(ratio - round(ratio)) > 1e-9 * ratio:
                raise ValueError(f"dt_solver {self.dt_solver} does not divide horizon {self.horizon}")
        if self.pde == "cac2d":
            h = 1.0 / self.resolution
            bound = h * h / (4.0 * self.params["epsilon"])
            if self.dt_solver > bound:
                raise ValueError(f"dt_solver {self.dt_solver} exceeds diffusion bound {bound:.3g}")
        if self.pde in ("lse1d", "nls1d") and not is_power_of_two(self.resolution):
            raise ValueError("Schrodinger grids must be a power of two")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt_solver)) if self.dt_solver else 0

    @property
    def dims(self) -> tuple[int, ...]:
        n = self.resolution
        return (n, n) if self.pde.endswith("2d") else (n,)

    @property
    def channels(self) -> int:
        return 2 if self.pde in ("lse1d", "nls1d") else 1


def grid(n: int) -> np.ndarray:
    return np.arange(n) / n


# --------------------------------------------------------------- transport

def sample_ic_te2d(rng: np.random.Generator) -> dict:
    """Amplitude in [2.5, 3], wave numbers from {0, 1, 2, 3}."""
    return {"A": rng.uniform(2.5, 3.0), "k1": int(rng.integers(0, 4)),
            "k2": int(rng.integers(0, 4))}


def te2d_field(params: dict, n: int, t: float = 0.0) -> np.ndarray:
    """A sin(2 pi k1 (x - t)) sin(2 pi k2 (y - t)), shape (1, n, n); x is axis 1."""
    xs = grid(n)
    sx = np.sin(2 * np.pi * params["k1"] * np.mod(xs - t, 1.0))
    sy = np.sin(2 * np.pi * params["k2"] * np.mod(xs - t, 1.0))
    return (params["A"] * np.outer(sx, sy))[None]


def solve_te2d(params: dict, t: float, n: int) -> np.ndarray:
    """Exact transport with velocity (1, 1): u(x, y, t) = u0(x - t, y - t)."""
    return te2d_field(params, n, t)


# ---------------------------------------------------- conservative Allen-Cahn

def laplacian5(u: np.ndarray) -> np.ndarray:
    n = u.shape[-1]
    return (np.roll(u, 1, -1) + np.roll(u, -1, -1) + np.roll(u, 1, -2) + np.roll(u, -1, -2)
            - 4.0 * u) * (n * n)


def solve_cac2d(u0: np.ndarray, spec: PdeSpec, horizon: float | None = None) -> np.ndarray:
    """Forward Euler on u_t = eps Lap u + f(u) - mean f(u), f(u) = u - u^3."""
    eps = spec.params["epsilon"]
    dt = spec.dt_solver
    steps = spec.n_steps if horizon is None else int(round(horizon / dt))
    u = np.array(u0, dtype=np.float64, copy=True)
    for step in range(steps):
        f = u - u * u * u
        fmean = f.mean(axis=(-2, -1), keepdims=True)
        u = u + dt * (eps * laplacian5(u) + (f - fmean))
        peak = np.abs(u).max()
        if not peak <= 10.0:
            raise SolverInstability(step + 1, float(peak))
    return u


def sample_ic_cac2d(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=(1, n, n))


# -------------------------------------------------------------- Schrodinger

def sample_ic_schrodinger(rng: np.random.Generator, n: int, n_modes: int = 5):
    """Sum over k = 1..5 of (a_k + i b_k) exp(i (2 pi k x + phi_k)).

    Returns (psi as complex array of shape (n,), provenance dict).
    """
    a = rng.standard_normal(n_modes)
    b = rng.standard_normal(n_modes)
    phi = rng.uniform(0.0, 2 * np.pi, size=n_modes)
    x = grid(n)
    k = np.arange(1, n_modes + 1)
    psi = ((a + 1j * b)[:, None] * np.exp(1j * (2 * np.pi * k[:, None] * x + phi[:, None]))).sum(0)
    return psi, {"a": a, "b": b, "phi": phi}


def kinetic_factor(n: int, dt: float) -> np.ndarray:
    """Half-step propagator exp(-i (2 pi k)^2 dt / 4) for i psi_t + 1/2 psi_xx = 0."""
    k = 2 * np.pi * fftfreq_signed(n)
    return np.exp(-1j * k * k * dt / 4.0)


def solve_schrodinger(psi0: np.ndarray, spec: PdeSpec, horizon: float | None = None,
                      dt: float | None = None) -> np.ndarray:
    """Strang splitting: half kinetic, full potential/nonlinear phase, half kinetic."""
    psi = np.asarray(psi0, dtype=np.complex128)
    n = psi.shape[-1]
    if not is_power_of_two(n):
        raise ValueError(f"grid length {n} is not a power of two")
    dt = spec.dt_solver if dt is None else dt
    horizon = spec.horizon if horizon is None else horizon
    steps = int(round(horizon / dt))
    half = kinetic_factor(n, dt)
    nonlinear = spec.pde == "nls1d"
    lam, V = spec.params["lambda"], spec.params["V"]
    potential = np.exp(1j * V * dt)
    for _ in range(steps):
        psi = ifft(fft(psi) * half)
        if nonlinear:
            psi = psi * np.exp(1j * lam * (psi.real ** 2 + psi.imag ** 2) * dt)
        else:
            psi = psi * potential
        psi = ifft(fft(psi) * half)
    return psi


def to_channels(psi: np.ndarray) -> np.ndarray:
    """Complex (..., n) -> real (..., 2, n) with (Re, Im) channels."""
    return np.stack((psi.real, psi.imag), axis=-2)


def from_channels(u: np.ndarray) -> np.ndarray:
    return u[..., 0, :] + 1j * u[..., 1, :]
