"""Plain-text run configuration: ``key=value`` lines, ``#`` comments, last key wins."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from .conservation import ConservationLaw
from .models import ModelConfig, Surrogate
from .pdegen.dataset import law_for
from .pdegen.solvers import PAPER_CAC_DT, PdeSpec
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str = ""
    # data
    pde: str = "lse1d"
    law: str = "norm"
    res: int = 0
    n_train: int = 512
    n_test: int = 128
    rollout_steps: int = 10
    paper_dt: bool = False
    seed: int = 0
    # model
    arch: str = ""
    width: int = 0
    layers: int = 4
    modes: int = 16
    activation: str = "gelu"
    generator: str = "pointwise_mlp"
    # training
    method: str = "adaptive"
    lam: float = 0.0
    epochs: int = 100
    batch_size: int = 32
    lr0: float = 0.0
    epsilon: float = 1e-12
    exactness_pass: bool = True
    # paths / evaluation
    data: str = ""
    out: str = ""
    checkpoint: str = ""
    steps: int = 10
    lambdas: str = ""

    # ---------------------------------------------------------------- derived
    def pde_spec(self) -> PdeSpec:
        kw = {"resolution": self.res, "seed": self.seed}
        if self.paper_dt and self.pde == "cac2d":
            kw["dt_solver"] = PAPER_CAC_DT
        return PdeSpec(self.pde, **kw)

    def resolved_arch(self) -> str:
        return self.arch or ("cnn2d" if self.pde.endswith("2d") else "fno1d")

    def model_config(self, channels: int, ndim: int) -> ModelConfig:
        arch = self.resolved_arch()
        width = self.width or (32 if arch == "fno1d" else 16)
        return ModelConfig(arch=arch, in_channels=channels + ndim, out_channels=channels,
                           hidden_width=width, layers=self.layers, modes=self.modes,
                           activation=self.activation, seed=self.seed)

    def conservation_law(self, channels: int) -> ConservationLaw:
        return law_for(self.law, channels, self.epsilon, self.exactness_pass)

    def train_config(self, method: str | None = None, lam: float | None = None,
                     seed: int | None = None) -> TrainConfig:
        lr0 = self.lr0 or (1.5e-3 if self.resolved_arch() == "fno1d" else 1e-4)
        return TrainConfig(method=method or self.method,
                           lam=self.lam if lam is None else lam, epochs=self.epochs,
                           batch_size=self.batch_size, lr0=lr0,
                           seed=self.seed if seed is None else seed)

    def build_model(self, channels: int, grid_shape, method: str | None = None,
                    seed: int | None = None, store=None) -> Surrogate:
        cfg = self.model_config(channels, len(grid_shape))
        if seed is not None:
            cfg = ModelConfig(**{**asdict(cfg), "seed": seed})
        return Surrogate(cfg, method or self.method, self.conservation_law(channels),
                         self.generator, grid_shape, store=store)

    # -------------------------------------------------------------- text form
    def to_text(self) -> str:
        lines = [f"{f.name}={_dump(getattr(self, f.name))}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    def update(self, values: dict) -> "RunConfig":
        types = {f.name: f.type for f in fields(self)}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key == "lambda":
                key = "lam"
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            setattr(self, key, _coerce(types[key], raw, key))
        return self


def _dump(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(tp, raw, key):
    if not isinstance(raw, str):
        return raw
    try:
        if tp in (bool, "bool"):
            low = raw.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return low in ("1", "true", "yes")
        if tp in (int, "int"):
            return int(raw)
        if tp in (float, "float"):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw.strip()


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return RunConfig().update(parse_config_text(fh.read()))
