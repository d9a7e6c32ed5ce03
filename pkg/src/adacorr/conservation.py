"""Correction operators that make model outputs satisfy a conservation law exactly.

All tape-level functions treat the leading axis as the sample axis: a field
``U`` is shaped (batch, channels, *grid) and per-sample targets are shaped
(batch,). Discrete quantities are plain (unweighted) sums over every
participating entry of one sample.

Two law classes are handled:

* linear (mass):       sum_i U_i   = m0
* quadratic (norm):    sum_i U_i^2 = c0

The learnable corrections redistribute the residual along a coefficient field
``A``. The projection corrections are the closed-form nearest feasible points
and serve as non-learnable baselines.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .core import tape as T
from .core.tape import Node, Tape

log = logging.getLogger(__name__)

LINEAR = "linear"
QUADRATIC = "quadratic"


class DegenerateFieldError(ValueError):
    """Raised when a correction cannot reach the target (e.g. U == 0, c0 > 0)."""


class Constraint(Enum):
    SUM_TO_ONE = "sum_to_one"
    UNCONSTRAINED = "unconstrained"


@dataclass(frozen=True)
class ConservationLaw:
    kind: str
    channels: tuple[int, ...] = (0,)
    epsilon: float = 1e-12
    exactness_pass: bool = True
    strict: bool = False

    def __post_init__(self):
        if self.kind not in (LINEAR, QUADRATIC):
            raise ValueError(f"law kind must be {LINEAR!r} or {QUADRATIC!r}, got {self.kind!r}")
        if not self.channels:
            raise ValueError("a conservation law needs at least one channel")
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")

    def check_channels(self, n_channels: int) -> None:
        if max(self.channels) >= n_channels or min(self.channels) < 0:
            raise ValueError(f"law channels {self.channels} outside 0..{n_channels - 1}")

    @property
    def constraint(self) -> Constraint:
        return Constraint.SUM_TO_ONE if self.kind == LINEAR else Constraint.UNCONSTRAINED


@dataclass
class CorrectionCoefficients:
    A: Node
    constraint: Constraint = field(default=Constraint.UNCONSTRAINED)


def _node(tape_or_none, x) -> tuple[Node, bool]:
    if isinstance(x, Node):
        return x, False
    return (tape_or_none or Tape()).constant(np.asarray(x, dtype=np.float64)), True


def _per_sample(target, batch: int, ndim: int) -> np.ndarray:
    t = np.broadcast_to(np.asarray(target, dtype=np.float64), (batch,))
    return t.reshape((batch,) + (1,) * (ndim - 1))


def _select(U: Node, law: ConservationLaw | None) -> Node:
    if law is None or tuple(law.channels) == tuple(range(U.value.shape[1])):
        return U
    law.check_channels(U.value.shape[1])
    return T.take_channels(U, law.channels)


def _unwrap(result: Node, was_array: bool):
    return result.value if was_array else result


# ------------------------------------------------------------------ quantities

def quantity_linear(U, law: ConservationLaw | None = None):
    """Per-sample sum of the participating entries."""
    U, arr = _node(None, U)
    return _unwrap(T.sample_sum(_select(U, law), keepdims=False), arr)


def quantity_quadratic(U, law: ConservationLaw | None = None):
    """Per-sample sum of squares; with (Re, Im) channels this is sum |psi|^2."""
    U, arr = _node(None, U)
    return _unwrap(T.sample_sum(T.square(_select(U, law)), keepdims=False), arr)


def quantity(U, law: ConservationLaw):
    if law.kind == LINEAR:
        return quantity_linear(U, law)
    return quantity_quadratic(U, law)


# ------------------------------------------------------------ linear corrector

def local_correct(U, i: int, m0) -> np.ndarray:
    """Overwrite entry ``i`` (flat index within a sample) so the sum equals m0."""
    U = np.asarray(U, dtype=np.float64)
    flat = U.reshape(U.shape[0], -1)
    if not 0 <= i < flat.shape[1]:
        raise IndexError(f"entry {i} out of range for {flat.shape[1]} entries")
    m0 = np.broadcast_to(np.asarray(m0, dtype=np.float64), (U.shape[0],))
    out = flat.copy()
    others = np.delete(flat, i, axis=1).sum(axis=1)
    out[:, i] = m0 - others
    return out.reshape(U.shape)


def linear_correct(U, A: CorrectionCoefficients, m0):
    """U + (m0 - M(U)) * A with sum(A) = 1, so the corrected sum is m0.

    When M(U) already equals m0 the correction term is exactly zero and the
    output is U bit for bit.
    """
    if A.constraint is not Constraint.SUM_TO_ONE:
        raise ValueError("linear correction needs sum-to-one coefficients")
    U, arr = _node(A.A.tape, U)
    B = U.value.shape[0]
    residual = T.sub(_per_sample(m0, B, U.value.ndim), T.sample_sum(U))
    return _unwrap(T.add(U, T.mul(residual, A.A)), arr)


# --------------------------------------------------------- quadratic corrector

def lambda2_roots(lambda1: float, S_U2: float, S_UA: float, S_A2: float, c0: float):
    """Real roots r of lambda1^2 S_U2 + 2 lambda1 r S_UA + r^2 S_A2 = c0."""
    if S_A2 <= 0:
        raise ValueError("S_A2 must be positive")
    a = S_A2
    b = 2.0 * lambda1 * S_UA
    c = lambda1 * lambda1 * S_U2 - c0
    disc = b * b - 4.0 * a * c
    if disc < 0:
        return ()
    root = math.sqrt(disc)
    # cancellation-free pairing of the two roots
    q = -0.5 * (b + math.copysign(root, b))
    if q == 0.0:
        return (0.0,)
    r1, r2 = q / a, c / q
    return tuple(sorted({r1, r2}))


def quadratic_correct(U, A: CorrectionCoefficients, c0, law: ConservationLaw):
    """sqrt(c0/(S_U2+eps)) * (U - 2 S_UA/(S_A2+eps) * A), optionally rescaled.

    With eps = 0 the cross terms cancel and sum(out^2) = c0. With eps > 0 and
    ``law.exactness_pass`` the result is multiplied by sqrt(c0/sum(out^2)) on
    the tape, which restores the target to rounding error.
    A field with S_A2 == 0 (A identically zero) gets no A-term.
    """
    U, arr = _node(A.A.tape, U)
    Av = A.A
    B, nd = U.value.shape[0], U.value.ndim
    c0_arr = np.broadcast_to(np.asarray(c0, dtype=np.float64), (B,))
    if np.any(c0_arr < 0):
        raise ValueError("quadratic target c0 must be non-negative")
    eps = law.epsilon
    c0b = c0_arr.reshape((B,) + (1,) * (nd - 1))

    S_U2 = T.sample_sum(T.square(U))
    degenerate = (S_U2.value == 0) & (c0b > 0)
    if np.any(degenerate):
        if law.strict or eps == 0:
            raise DegenerateFieldError("U is identically zero but the target c0 is positive")
        log.warning("quadratic correction: %d degenerate sample(s) passed through",
                    int(degenerate.sum()))
    # where c0 == 0 the output is zero whatever the denominator, so guard it away from 0
    pad_u = np.where((S_U2.value + eps) == 0, 1.0, 0.0)
    scale = T.div(np.sqrt(c0b), T.sqrt(T.add(S_U2, eps + pad_u)))

    S_UA = T.sample_sum(T.mul(U, Av))
    S_A2 = T.sample_sum(T.square(Av))
    pad_a = np.where((S_A2.value + eps) == 0, 1.0, 0.0)
    coef = T.div(T.mul(S_UA, 2.0), T.add(S_A2, eps + pad_a))
    out = T.mul(scale, T.sub(U, T.mul(coef, Av)))

    if eps > 0 and law.exactness_pass:
        S_out = T.sample_sum(T.square(out))
        pad_o = np.where(S_out.value == 0, 1.0, 0.0)
        out = T.mul(out, T.div(np.sqrt(c0b), T.sqrt(T.add(S_out, pad_o))))
    return _unwrap(out, arr)


def apply_correction(Y: Node, A: CorrectionCoefficients, target, law: ConservationLaw) -> Node:
    """Correct the law's channels of ``Y`` and leave the rest untouched."""
    law.check_channels(Y.value.shape[1])
    sub = _select(Y, law)
    if law.kind == LINEAR:
        fixed = linear_correct(sub, A, target)
    else:
        fixed = quadratic_correct(sub, A, target, law)
    if sub is Y:
        return fixed
    return T.replace_channels(Y, fixed, law.channels)


# ----------------------------------------------------------------- projections

def project_linear(U, m0):
    """Nearest point (Euclidean) with sum m0: a uniform offset."""
    U, arr = _node(None, U)
    B = U.value.shape[0]
    n = U.value[0].size
    shift = T.mul(T.sub(_per_sample(m0, B, U.value.ndim), T.sample_sum(U)), 1.0 / n)
    return _unwrap(T.add(U, shift), arr)


def project_quadratic(U, c0):
    """Nearest point with sum of squares c0: radial scaling onto the sphere."""
    U, arr = _node(None, U)
    B, nd = U.value.shape[0], U.value.ndim
    S = T.sample_sum(T.square(U))
    if np.any(S.value == 0):
        raise DegenerateFieldError("projection onto the sphere is not unique for U == 0")
    c0b = np.sqrt(_per_sample(c0, B, nd))
    return _unwrap(T.mul(U, T.div(c0b, T.sqrt(S))), arr)


def project(U, law: ConservationLaw, target):
    U, arr = _node(None, U)
    sub = _select(U, law)
    fixed = project_linear(sub, target) if law.kind == LINEAR else project_quadratic(sub, target)
    if sub is not U:
        fixed = T.replace_channels(U, fixed, law.channels)
    return _unwrap(fixed, arr)


# ------------------------------------------------------------ penalty / metric

def penalty_term(U, law: ConservationLaw, target):
    """Per-sample |quantity(U) - target| (the caller applies the weight)."""
    U, arr = _node(None, U)
    q = quantity(U, law)
    B = U.value.shape[0]
    t = np.broadcast_to(np.asarray(target, dtype=np.float64), (B,))
    return _unwrap(T.absolute(T.sub(q, t)), arr)


def conservation_error(pred, law: ConservationLaw, target) -> tuple[np.ndarray, np.ndarray]:
    """Absolute and relative per-sample residuals; relative is NaN for |target| <= 1e-8."""
    pred = pred.value if isinstance(pred, Node) else np.asarray(pred, dtype=np.float64)
    q = quantity(pred, law)
    t = np.broadcast_to(np.asarray(target, dtype=np.float64), q.shape)
    err = np.abs(q - t)
    big = np.abs(t) > 1e-8
    rel = np.where(big, err / np.where(big, np.abs(t), 1.0), np.nan)
    return err, rel


def tolerance(law: ConservationLaw, target) -> np.ndarray:
    """Per-sample absolute tolerance that the correctors guarantee."""
    t = np.abs(np.asarray(target, dtype=np.float64))
    if law.kind == LINEAR:
        return 1e-10 * np.maximum(1.0, t)
    if law.epsilon > 0 and law.exactness_pass:
        return 1e-12 * np.maximum(1.0, t)
    return 1e-10 * np.maximum(1.0, t)
