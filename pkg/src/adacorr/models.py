"""Desk-scale neural operators, coefficient generators and the corrected forward pass."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .conservation import (LINEAR, ConservationLaw, Constraint, CorrectionCoefficients,
                           apply_correction, project)
from .core import tape as T
from .core.nn import circular_conv2d, dense, softmax_flat, spectral_conv1d
from .core.params import ParamStore
from .core.tape import Node, ShapeError, Tape

ARCHS = ("fno1d", "cnn2d")
GENERATORS = ("softmax_vector", "pointwise_mlp", "conv_k3")
METHODS = ("raw", "adaptive", "penalty", "projection", "ablation")


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "fno1d"
    in_channels: int = 3
    out_channels: int = 2
    hidden_width: int = 32
    layers: int = 4
    modes: int = 16
    activation: str = "gelu"
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.layers < 1:
            raise ValueError("need at least one layer")


@dataclass(frozen=True)
class CorrectionHead:
    generator: str
    law: ConservationLaw
    hidden_layers: int = 3
    activation: str = "tanh"

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}")

    @property
    def constraint(self) -> Constraint:
        return self.law.constraint


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _add_dense(store, rng, name, cin, cout):
    store.add(f"{name}.w", _uniform(rng, (cout, cin), cin))
    store.add(f"{name}.b", _uniform(rng, (cout,), cin))


def _dense(tape, store, name, x):
    return dense(x, tape.param(store, f"{name}.w"), tape.param(store, f"{name}.b"))


def _add_conv(store, rng, name, cin, cout):
    store.add(f"{name}.k", _uniform(rng, (cout, cin, 3, 3), 9 * cin))
    store.add(f"{name}.b", _uniform(rng, (cout,), 9 * cin))


def _conv(tape, store, name, x):
    return circular_conv2d(x, tape.param(store, f"{name}.k"), tape.param(store, f"{name}.b"))


# ------------------------------------------------------------------ backbones

def init_model(cfg: ModelConfig, store: ParamStore, prefix: str = "model") -> None:
    rng = np.random.default_rng([cfg.seed, 0])
    w = cfg.hidden_width
    if cfg.arch == "fno1d":
        _add_dense(store, rng, f"{prefix}.lift", cfg.in_channels, w)
        scale = 1.0 / (w * w)
        for i in range(cfg.layers):
            store.add(f"{prefix}.spec{i}.w", scale * rng.uniform(size=(cfg.modes, w, w, 2)))
            _add_dense(store, rng, f"{prefix}.skip{i}", w, w)
        _add_dense(store, rng, f"{prefix}.proj", w, cfg.out_channels)
    else:
        cin = cfg.in_channels
        for i in range(cfg.layers):
            _add_conv(store, rng, f"{prefix}.conv{i}", cin, w)
            cin = w
        _add_dense(store, rng, f"{prefix}.proj", w, cfg.out_channels)


def fno1d_forward(cfg: ModelConfig, tape: Tape, store: ParamStore, x: Node,
                  prefix: str = "model") -> tuple[Node, Node]:
    """Returns (output, final hidden features)."""
    n = x.value.shape[-1]
    if x.value.ndim != 3 or n & (n - 1) or n < 2 * cfg.modes:
        raise ShapeError(f"fno1d needs (batch, channels, N) with N a power of two >= "
                         f"{2 * cfg.modes}, got {x.value.shape}")
    h = _dense(tape, store, f"{prefix}.lift", x)
    for i in range(cfg.layers):
        spec = spectral_conv1d(h, tape.param(store, f"{prefix}.spec{i}.w"))
        h = T.activation(cfg.activation, T.add(spec, _dense(tape, store, f"{prefix}.skip{i}", h)))
    return _dense(tape, store, f"{prefix}.proj", h), h


def cnn2d_forward(cfg: ModelConfig, tape: Tape, store: ParamStore, x: Node,
                  prefix: str = "model") -> tuple[Node, Node]:
    h = x
    for i in range(cfg.layers):
        h = T.activation(cfg.activation, _conv(tape, store, f"{prefix}.conv{i}", h))
    return _dense(tape, store, f"{prefix}.proj", h), h


def model_forward(cfg, tape, store, x, prefix="model"):
    fwd = fno1d_forward if cfg.arch == "fno1d" else cnn2d_forward
    return fwd(cfg, tape, store, x, prefix)


# ----------------------------------------------------------------- generators

def _add_mlp(store, rng, prefix, cin, hidden, cout, n_hidden):
    dims = [cin] + [hidden] * n_hidden + [cout]
    for j in range(len(dims) - 1):
        _add_dense(store, rng, f"{prefix}.l{j}", dims[j], dims[j + 1])


def _mlp(tape, store, prefix, x, n_hidden, act):
    h = x
    for j in range(n_hidden):
        h = T.activation(act, _dense(tape, store, f"{prefix}.l{j}", h))
    return _dense(tape, store, f"{prefix}.l{n_hidden}", h)


def init_head(head: CorrectionHead, cfg: ModelConfig, store: ParamStore,
              grid_shape=None, prefix: str = "head") -> None:
    rng = np.random.default_rng([cfg.seed, 1])
    c = len(head.law.channels)
    head.law.check_channels(cfg.out_channels)
    if head.generator == "softmax_vector":
        if grid_shape is None:
            raise ValueError("softmax_vector needs the grid shape")
        shape = (1, c) + tuple(grid_shape)
        if head.law.kind == LINEAR:
            store.add(f"{prefix}.logits", np.zeros(shape))
        else:
            store.add(f"{prefix}.logits", 0.01 * rng.standard_normal(shape))
    elif head.generator == "pointwise_mlp":
        _add_mlp(store, rng, f"{prefix}.mlp", cfg.out_channels, 2 * cfg.out_channels, c,
                 head.hidden_layers)
    else:
        _add_conv(store, rng, f"{prefix}.conv", cfg.out_channels + cfg.hidden_width, c)


def generate_A(head: CorrectionHead, tape: Tape, store: ParamStore, y: Node,
               features: Node | None, prefix: str = "head") -> CorrectionCoefficients:
    if features is not None and features.value.shape[2:] != y.value.shape[2:]:
        raise ShapeError(f"feature grid {features.value.shape[2:]} != output grid "
                         f"{y.value.shape[2:]}")
    B = y.value.shape[0]
    if head.generator == "softmax_vector":
        logits = tape.param(store, f"{prefix}.logits")
        if logits.value.shape[2:] != y.value.shape[2:]:
            raise ShapeError(f"coefficient grid {logits.value.shape[2:]} != output grid "
                             f"{y.value.shape[2:]}")
        raw = logits
    elif head.generator == "pointwise_mlp":
        raw = _mlp(tape, store, f"{prefix}.mlp", y, head.hidden_layers, head.activation)
    else:
        z = T.concat([y, features], axis=1)
        if z.value.ndim == 3:
            # 1D fields run through the 2D kernel as a single periodic row
            z = T.reshape(z, z.value.shape[:2] + (1,) + z.value.shape[2:])
            raw = _conv(tape, store, f"{prefix}.conv", z)
            raw = T.reshape(raw, raw.value.shape[:2] + raw.value.shape[3:])
        else:
            raw = _conv(tape, store, f"{prefix}.conv", z)
    if head.law.kind == LINEAR:
        A = softmax_flat(raw, start_axis=1)
    else:
        A = raw
    if A.value.shape[0] != B:
        A = T.expand_batch(A, B)
    return CorrectionCoefficients(A, head.constraint)


def corrected_forward(cfg: ModelConfig, head: CorrectionHead, tape: Tape, store: ParamStore,
                      x: Node, target) -> Node:
    y, features = model_forward(cfg, tape, store, x)
    A = generate_A(head, tape, store, y, features)
    return apply_correction(y, A, target, head.law)


def append_mlp_forward(cfg: ModelConfig, head: CorrectionHead, tape: Tape, store: ParamStore,
                       x: Node) -> Node:
    """Ablation: the same pointwise MLP appended residually, no correction."""
    y, _ = model_forward(cfg, tape, store, x)
    return T.add(y, _mlp(tape, store, "append.mlp", y, head.hidden_layers, head.activation))


def init_append_mlp(head: CorrectionHead, cfg: ModelConfig, store: ParamStore) -> None:
    rng = np.random.default_rng([cfg.seed, 2])
    _add_mlp(store, rng, "append.mlp", cfg.out_channels, 2 * cfg.out_channels,
             cfg.out_channels, head.hidden_layers)


# ------------------------------------------------------------------ surrogate

def with_coordinates(state: np.ndarray) -> np.ndarray:
    """Append x (1D) or x, y (2D) coordinate channels on the unit grid."""
    state = np.asarray(state, dtype=np.float64)
    B, spatial = state.shape[0], state.shape[2:]
    axes = [np.arange(n) / n for n in spatial]
    grids = np.meshgrid(*axes, indexing="ij")
    coords = np.broadcast_to(np.stack(grids)[None], (B, len(spatial)) + tuple(spatial))
    return np.concatenate([state, coords], axis=1)


class Surrogate:
    """A backbone plus the conservation treatment selected by ``method``."""

    def __init__(self, cfg: ModelConfig, method: str, law: ConservationLaw,
                 generator: str = "pointwise_mlp", grid_shape=None, store: ParamStore = None):
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}")
        self.cfg = cfg
        self.method = method
        self.law = law
        self.head = CorrectionHead(generator, law)
        self.grid_shape = tuple(grid_shape) if grid_shape is not None else None
        if store is None:
            store = ParamStore()
            init_model(cfg, store)
            if method == "adaptive":
                init_head(self.head, cfg, store, self.grid_shape)
            elif method == "ablation":
                init_append_mlp(self.head, cfg, store)
        self.store = store

    def forward(self, tape: Tape, state: np.ndarray, target) -> Node:
        x = tape.constant(with_coordinates(state))
        if self.method == "adaptive":
            return corrected_forward(self.cfg, self.head, tape, self.store, x, target)
        if self.method == "ablation":
            return append_mlp_forward(self.cfg, self.head, tape, self.store, x)
        y, _ = model_forward(self.cfg, tape, self.store, x)
        if self.method == "projection":
            return project(y, self.law, target)
        return y

    def predict(self, state: np.ndarray, target) -> np.ndarray:
        return self.forward(Tape(), state, target).value


# ----------------------------------------------------------------- checkpoint

CKPT_MAGIC = b"NOPC1"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(store: ParamStore, path) -> None:
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        for name in store.names():
            arr = store.params[name]
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> ParamStore:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:5] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (version,) = struct.unpack_from("<I", buf, 5)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 9
    store = ParamStore()
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            name = buf[pos + 4:pos + 4 + nlen].decode("utf-8")
            pos += 4 + nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            shape = struct.unpack_from(f"<{rank}I", buf, pos + 4)
            pos += 4 + 4 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * count > len(buf):
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            data = np.frombuffer(buf, dtype="<f8", count=count, offset=pos)
            pos += 8 * count
            store.add(name, data.reshape(shape))
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header") from exc
    return store
