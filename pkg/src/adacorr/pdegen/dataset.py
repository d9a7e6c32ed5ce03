"""Paired (initial state, state after one horizon) datasets and their file format.

Binary layout (little-endian):

    magic "NODS1" | version u32 | pde tag u32 | law tag u32 | n_samples u32 |
    channels u32 | rank u32 | dims u32 x rank | seed u64 |
    per sample: input f64 x (channels*prod(dims)), target f64 x same, cons_target f64

A ``<path>.meta`` sidecar mirrors the generating PdeSpec as ``key=value`` lines.
"""
from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from ..conservation import LINEAR, QUADRATIC, ConservationLaw, quantity
from .solvers import (PDES, PdeSpec, sample_ic_cac2d, sample_ic_schrodinger,
                      sample_ic_te2d, solve_cac2d, solve_schrodinger, te2d_field, to_channels)

log = logging.getLogger(__name__)

MAGIC = b"NODS1"
VERSION = 1
LAWS = ("mass", "norm")
VALID_PAIRS = {"te2d": ("mass", "norm"), "cac2d": ("mass",), "lse1d": ("norm",),
               "nls1d": ("norm",)}


class CorruptDataError(ValueError):
    pass


def check_pair(pde: str, law: str) -> None:
    if law not in VALID_PAIRS.get(pde, ()):
        pairs = ", ".join(f"{p}+{l}" for p, ls in VALID_PAIRS.items() for l in ls)
        raise ValueError(f"invalid pde/law combination {pde}+{law}; valid pairs: {pairs}")


def law_for(law: str, channels: int, epsilon: float = 1e-12,
            exactness_pass: bool = True) -> ConservationLaw:
    kind = LINEAR if law == "mass" else QUADRATIC
    return ConservationLaw(kind, tuple(range(channels)), epsilon=epsilon,
                           exactness_pass=exactness_pass)


@dataclass
class DatasetSplit:
    pde: str
    law: str
    spec: PdeSpec
    inputs: np.ndarray
    targets: np.ndarray
    cons_targets: np.ndarray
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        if not (len(self.inputs) == len(self.targets) == len(self.cons_targets)):
            raise ValueError("inputs, targets and cons_targets must have equal length")

    def __len__(self):
        return len(self.inputs)

    @property
    def conservation_law(self) -> ConservationLaw:
        return law_for(self.law, self.spec.channels)


def compute_cons_target(inputs: np.ndarray, law: str) -> np.ndarray:
    """Conserved quantity of each (batched) initial condition."""
    return quantity(inputs, law_for(law, inputs.shape[1]))


# ------------------------------------------------------------------ generation

def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def generate_trajectories(spec: PdeSpec, indices, steps: int = 1):
    """Initial states and states at k * horizon for k = 1..steps.

    Returns (inputs (n, C, *dims), trajectory (n, steps, C, *dims), provenance).
    Each sample draws from its own stream seeded by (spec.seed, index).
    """
    indices = list(indices)
    n = spec.resolution
    shape = (spec.channels,) + spec.dims
    if not indices:
        return np.zeros((0,) + shape), np.zeros((0, steps) + shape), []
    prov = []
    if spec.pde == "te2d":
        ics, traj = [], []
        for i in indices:
            p = sample_ic_te2d(_sample_rng(spec.seed, i))
            p["zero"] = p["k1"] == 0 or p["k2"] == 0
            prov.append(p)
            ics.append(te2d_field(p, n, 0.0))
            traj.append([te2d_field(p, n, k * spec.horizon) for k in range(1, steps + 1)])
        return np.stack(ics), np.array(traj), prov
    if spec.pde == "cac2d":
        u = np.stack([sample_ic_cac2d(_sample_rng(spec.seed, i), n) for i in indices])
        prov = [{"index": i} for i in indices]
        inputs, traj = u, []
        for _ in range(steps):
            u = solve_cac2d(u, spec)
            traj.append(u)
        return inputs, np.stack(traj, axis=1), prov
    psis = []
    for i in indices:
        psi, p = sample_ic_schrodinger(_sample_rng(spec.seed, i), n)
        psis.append(psi)
        prov.append(p)
    psi = np.stack(psis)
    inputs, traj = to_channels(psi), []
    for _ in range(steps):
        psi = solve_schrodinger(psi, spec)
        traj.append(to_channels(psi))
    return inputs, np.stack(traj, axis=1), prov


def validate_targets(inputs, targets, law: str, cons_targets=None, rtol: float = 1e-8) -> float:
    """Largest relative conservation residual of ``targets``; raises above ``rtol``."""
    if len(inputs) == 0:
        return 0.0
    cons = compute_cons_target(inputs, law) if cons_targets is None else cons_targets
    q = compute_cons_target(targets, law)
    resid = np.abs(q - cons) / np.maximum(1.0, np.abs(cons))
    worst = float(resid.max())
    if worst > rtol:
        raise CorruptDataError(f"generated targets violate the {law} law (residual {worst:.3g})")
    return worst


def generate_split(spec: PdeSpec, law: str, n: int, offset: int = 0,
                   rollout_steps: int = 1) -> tuple[DatasetSplit, list[DatasetSplit]]:
    """Split for one-step training plus one split per additional rollout step."""
    check_pair(spec.pde, law)
    inputs, traj, prov = generate_trajectories(spec, range(offset, offset + n), rollout_steps)
    cons = compute_cons_target(inputs, law)
    splits = []
    for k in range(rollout_steps):
        validate_targets(inputs, traj[:, k], law, cons)
        splits.append(DatasetSplit(spec.pde, law, spec, inputs, np.ascontiguousarray(traj[:, k]),
                                   cons, prov))
    return splits[0], splits[1:]


# ------------------------------------------------------------------ file format

_PDE_TAGS = {p: i for i, p in enumerate(PDES)}
_LAW_TAGS = {l: i for i, l in enumerate(LAWS)}


def spec_to_meta(spec: PdeSpec, law: str, n: int) -> str:
    lines = [f"pde={spec.pde}", f"law={law}", f"resolution={spec.resolution}",
             f"dt_solver={spec.dt_solver!r}", f"horizon={spec.horizon!r}",
             f"epsilon={spec.params['epsilon']!r}", f"V={spec.params['V']!r}",
             f"lambda={spec.params['lambda']!r}", f"seed={spec.seed}", f"n_samples={n}"]
    return "\n".join(lines) + "\n"


def parse_meta(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def write_dataset(split: DatasetSplit, path) -> None:
    path = os.fspath(path)
    spec = split.spec
    dims = spec.dims
    header = MAGIC + struct.pack("<6I", VERSION, _PDE_TAGS[split.pde], _LAW_TAGS[split.law],
                                 len(split), spec.channels, len(dims))
    header += struct.pack(f"<{len(dims)}I", *dims) + struct.pack("<Q", spec.seed)
    with open(path, "wb") as fh:
        fh.write(header)
        for i in range(len(split)):
            fh.write(np.ascontiguousarray(split.inputs[i], dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(split.targets[i], dtype="<f8").tobytes())
            fh.write(struct.pack("<d", split.cons_targets[i]))
    with open(path + ".meta", "w") as fh:
        fh.write(spec_to_meta(spec, split.law, len(split)))


def read_dataset(path, validate: bool = True) -> DatasetSplit:
    path = os.fspath(path)
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:5] != MAGIC:
        raise CorruptDataError(f"{path}: not a dataset file (bad magic)")
    try:
        version, pde_tag, law_tag, n, channels, rank = struct.unpack_from("<6I", buf, 5)
        if version != VERSION:
            raise CorruptDataError(f"{path}: unsupported version {version}")
        pos = 5 + 24
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        (seed,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
    except struct.error as exc:
        raise CorruptDataError(f"{path}: truncated header") from exc
    pde, law = PDES[pde_tag], LAWS[law_tag]
    size = channels * int(np.prod(dims, dtype=np.int64))
    record = 2 * size + 1
    if len(buf) - pos != 8 * record * n:
        raise CorruptDataError(f"{path}: expected {n} samples, file size does not match")
    body = np.frombuffer(buf, dtype="<f8", offset=pos).reshape(n, record)
    shape = (n, channels) + tuple(dims)
    inputs = body[:, :size].reshape(shape).astype(np.float64)
    targets = body[:, size:2 * size].reshape(shape).astype(np.float64)
    cons = body[:, -1].astype(np.float64)

    meta = {}
    if os.path.exists(path + ".meta"):
        with open(path + ".meta") as fh:
            meta = parse_meta(fh.read())
    spec = PdeSpec(pde, resolution=int(dims[0]),
                   dt_solver=float(meta.get("dt_solver", 0.0)),
                   horizon=float(meta.get("horizon", 0.0)),
                   params={"epsilon": float(meta.get("epsilon", 0.01)),
                           "V": float(meta.get("V", 1.0)),
                           "lambda": float(meta.get("lambda", 1.0))},
                   seed=int(seed))
    if validate and n:
        recomputed = compute_cons_target(inputs, law)
        rel = np.abs(recomputed - cons) / np.maximum(1.0, np.abs(cons))
        if rel.max() > 1e-12:
            bad = int(np.argmax(rel))
            raise CorruptDataError(f"{path}: cons_target of sample {bad} does not match its "
                                   f"input (relative mismatch {rel[bad]:.3g})")
    return DatasetSplit(pde, law, spec, inputs, targets, cons)

