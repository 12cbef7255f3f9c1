from __future__ import annotations

from typing import Mapping, Optional

import numpy as np

from .params import ParamStore


class SGD:
    """Momentum SGD: ``v <- momentum * v - lr * g``, ``p <- p + v``.

    Velocities start at zero and are created on the first call.
    ``trainable`` restricts updates to a subset of names; the rest are frozen.
    """

    def __init__(self, params: ParamStore, lr: float, momentum: float = 0.0,
                 trainable: Optional[list[str]] = None):
        if lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0 <= momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.trainable = list(params.names()) if trainable is None else list(trainable)
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, grads: Optional[Mapping[str, np.ndarray]] = None) -> None:
        if grads is None:
            grads = {k: self.params[k].grad for k in self.trainable}
        for name in self.trainable:
            g = grads.get(name)
            if g is None:
                raise KeyError(f"missing gradient for trainable parameter {name!r}")
            p = self.params[name]
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(p.data)
            v = self.momentum * v - self.lr * g
            self.velocity[name] = v.astype(p.data.dtype, copy=False)
            p.data = p.data + self.velocity[name]


def sgd_step(params: ParamStore, grads: Mapping[str, np.ndarray], lr: float, momentum: float = 0.0,
             state: Optional[SGD] = None) -> SGD:
    """Functional form of one update. Pass the returned optimizer back in as ``state``."""
    opt = state or SGD(params, lr, momentum)
    opt.step(grads)
    return opt
