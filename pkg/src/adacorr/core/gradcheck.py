"""Central finite-difference gradient verification."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .params import ParamStore
from .tape import Node, Tape


def grad_check(f: Callable[[Tape, ParamStore], Node], store: ParamStore, h: float = 1e-6,
               names=None) -> float:
    """Worst relative error between tape gradients and central differences.

    ``f`` builds a scalar root on the tape it is given. The relative error of
    each coordinate uses the denominator max(|analytic|, |numeric|, 1e-8).
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    names = store.names() if names is None else list(names)
    store.zero_grad()
    tape = Tape()
    root = f(tape, store)
    tape.backward(root, store)
    analytic = {n: store.grads[n].copy() for n in names}

    def value():
        return float(np.sum(f(Tape(), store).value))

    worst = 0.0
    for name in names:
        p = store.params[name]
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = value()
            flat[i] = orig - h
            fm = value()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            ana = analytic[name].reshape(-1)[i]
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
