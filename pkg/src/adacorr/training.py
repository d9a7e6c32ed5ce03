"""Losses, Adam, the training loop, evaluation with rollout, and the penalty sweep."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .conservation import conservation_error, penalty_term
from .core import tape as T
from .core.params import ParamStore
from .core.tape import Node, Tape
from .models import Surrogate
from .pdegen.dataset import DatasetSplit

log = logging.getLogger(__name__)


class NumericalFailure(RuntimeError):
    def __init__(self, epoch: int, batch: int, detail: str):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {detail}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class TrainConfig:
    method: str = "raw"
    lam: float = 0.0
    epochs: int = 100
    batch_size: int = 32
    lr0: float = 1.5e-3
    decay: float = 0.5
    decay_every: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("penalty weight must be non-negative")
        if self.lr0 <= 0:
            raise ValueError("learning rate must be positive")


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr0 * cfg.decay ** (epoch // cfg.decay_every)


# ----------------------------------------------------------------------- loss

def relative_l2(pred, gt) -> np.ndarray:
    """Per-sample ||pred - gt|| / ||gt||; NaN where gt is identically zero."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    B = gt.shape[0]
    num = np.sqrt(((pred - gt) ** 2).reshape(B, -1).sum(axis=1))
    den = np.sqrt((gt ** 2).reshape(B, -1).sum(axis=1))
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)


def relative_l2_loss(pred: Node, gt: np.ndarray) -> Node | None:
    """Mean relative L2 over samples with non-zero ground truth, on the tape."""
    B = gt.shape[0]
    den = np.sqrt((gt ** 2).reshape(B, -1).sum(axis=1))
    valid = den > 0
    if not valid.any():
        return None
    weights = np.where(valid, 1.0 / np.where(valid, den, 1.0), 0.0) / valid.sum()
    return T.reduce_sum(T.mul(T.l2norm(T.sub(pred, gt)), weights))


# ---------------------------------------------------------------------- Adam

def adam_step(store: ParamStore, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name in store.names():
        g = store.grads[name]
        slot = store.state.setdefault(name, {"m": np.zeros_like(g), "v": np.zeros_like(g)})
        slot["m"] = beta1 * slot["m"] + (1.0 - beta1) * g
        slot["v"] = beta2 * slot["v"] + (1.0 - beta2) * g * g
        m_hat = slot["m"] / c1
        v_hat = slot["v"] / c2
        store.params[name] -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------- train

@dataclass
class TrainResult:
    store: ParamStore
    losses: list = field(default_factory=list)
    max_train_cons_err: list = field(default_factory=list)
    skipped_batches: int = 0


def _grad_norms(store: ParamStore) -> str:
    total = np.sqrt(sum(float((g ** 2).sum()) for g in store.grads.values()))
    pmax = max(float(np.abs(p).max()) for p in store.params.values())
    return f"grad norm {total:.3g}, max |param| {pmax:.3g}"


def train(model: Surrogate, data: DatasetSplit, cfg: TrainConfig) -> TrainResult:
    """Minimise mean relative L2 (plus the weighted penalty for that method)."""
    if data.law != _law_name(model):
        raise ValueError(f"dataset law {data.law!r} does not match the model's law")
    store = model.store
    law = model.law
    n = len(data)
    rng = np.random.default_rng([cfg.seed, 7])
    result = TrainResult(store)
    for epoch in range(cfg.epochs):
        lr = lr_at(cfg, epoch)
        perm = rng.permutation(n)
        batch_losses, worst = [], 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = np.sort(perm[start:start + cfg.batch_size])
            tape = Tape()
            target = data.cons_targets[idx]
            pred = model.forward(tape, data.inputs[idx], target)
            loss = relative_l2_loss(pred, data.targets[idx])
            if model.method == "penalty" and cfg.lam > 0:
                pen = T.mul(T.mean(penalty_term(pred, law, target)), cfg.lam)
                loss = pen if loss is None else T.add(loss, pen)
            if loss is None:
                result.skipped_batches += 1
                continue
            value = float(loss.value)
            if not np.isfinite(value):
                raise NumericalFailure(epoch, b, _grad_norms(store))
            store.zero_grad()
            tape.backward(loss, store)
            adam_step(store, lr, cfg.beta1, cfg.beta2, cfg.eps_opt)
            batch_losses.append(value)
            worst = max(worst, float(conservation_error(pred, law, target)[0].max()))
        result.losses.append(float(np.mean(batch_losses)) if batch_losses else float("nan"))
        result.max_train_cons_err.append(worst)
        log.debug("epoch %d lr %.3g loss %.6g", epoch, lr, result.losses[-1])
    return result


def _law_name(model: Surrogate) -> str:
    return "mass" if model.law.kind == "linear" else "norm"


# ------------------------------------------------------------------- evaluate

@dataclass
class EvalReport:
    rel_l2_mean: float
    rel_l2_std: float
    cons_err_abs: float
    cons_err_rel: float
    rollout_rel_l2: list
    rollout_cons_abs: list
    rollout_cons_rel: list
    wall_time: float
    skipped: int = 0


def _predict_batched(predict, states, targets, batch):
    out = []
    for s in range(0, len(states), batch):
        out.append(predict(states[s:s + batch], targets[s:s + batch]))
    return np.concatenate(out) if out else np.zeros_like(states)


def evaluate(model, test: DatasetSplit, rollout: list[DatasetSplit] = (), steps: int = 1,
             batch: int = 64) -> EvalReport:
    """One-step metrics plus an autoregressive rollout of up to ``steps`` steps.

    ``model`` is a :class:`Surrogate` or any callable ``(states, cons_targets) -> states``.
    The conservation target stays at the initial condition's value for every step.
    """
    predict = model.predict if isinstance(model, Surrogate) else model
    law = test.conservation_law
    truths = [test.targets] + [r.targets for r in rollout]
    steps = max(1, min(steps, len(truths)))
    t0 = time.perf_counter()
    cons = test.cons_targets
    state = test.inputs
    rel_means, abs_means, relc_means = [], [], []
    first = None
    skipped = 0
    for k in range(steps):
        state = _predict_batched(predict, state, cons, batch)
        rel = relative_l2(state, truths[k])
        err_abs, err_rel = conservation_error(state, law, cons)
        if k == 0:
            first = rel
            skipped = int(np.isnan(rel).sum())
            first_abs, first_rel = err_abs, err_rel
        rel_means.append(float(np.nanmean(rel)) if np.isfinite(rel).any() else float("nan"))
        abs_means.append(float(err_abs.mean()) if len(err_abs) else 0.0)
        relc_means.append(float(np.nanmean(err_rel)) if np.isfinite(err_rel).any()
                          else float("nan"))
    if skipped:
        log.info("relative L2 skipped %d test sample(s) with zero ground truth", skipped)
    valid = first[np.isfinite(first)]
    return EvalReport(
        rel_l2_mean=float(valid.mean()) if valid.size else float("nan"),
        rel_l2_std=float(valid.std()) if valid.size else float("nan"),
        cons_err_abs=float(first_abs.mean()) if len(first_abs) else 0.0,
        cons_err_rel=float(np.nanmean(first_rel)) if np.isfinite(first_rel).any()
        else float("nan"),
        rollout_rel_l2=rel_means, rollout_cons_abs=abs_means, rollout_cons_rel=relc_means,
        wall_time=time.perf_counter() - t0, skipped=skipped)


# ---------------------------------------------------------------------- sweep

MASS_LAMBDAS = (0.0, 1e-4, 1e-3, 1e-2)
NORM_LAMBDAS = (0.0, 1e-5, 1e-4, 1e-3)


def default_lambdas(law: str) -> tuple[float, ...]:
    return MASS_LAMBDAS if law == "mass" else NORM_LAMBDAS


def lambda_sweep(make_model, train_split: DatasetSplit, test_split: DatasetSplit, lambdas,
                 cfg: TrainConfig) -> list[dict]:
    """One penalty model per weight, each from the same seed and initialisation."""
    rows = []
    for lam in lambdas:
        if lam < 0:
            raise ValueError("penalty weights must be non-negative")
        model = make_model("penalty")
        res = train(model, train_split, replace(cfg, method="penalty", lam=float(lam)))
        rep = evaluate(model, test_split)
        rows.append({"lambda": float(lam), "rel_l2": rep.rel_l2_mean,
                     "cons_err": rep.cons_err_abs, "final_loss": res.losses[-1]
                     if res.losses else float("nan")})
    return rows


def write_csv(path, header, rows) -> None:
    """Rows are dicts keyed by the header names."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(row[h]) if isinstance(row[h], float) else row[h] for h in header])
