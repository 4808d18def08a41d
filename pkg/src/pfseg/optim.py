"""SGD with momentum and L2 weight decay."""

from typing import Dict, Mapping

import numpy as np

from pfseg.tensor import ShapeError, Tensor


def sgd_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    velocity: Dict[str, np.ndarray],
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
) -> None:
    """In-place update ``v = momentum*v + g + wd*p; p -= lr*v``.

    Parameters missing from ``grads`` are left alone.  ``velocity`` is
    updated in place and created lazily as zeros.
    """
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if momentum < 0 or weight_decay < 0:
        raise ValueError("momentum and weight_decay must be non-negative")
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p.data)
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p.data
        p.data -= lr * v


class SGD:
    def __init__(self, params: Mapping[str, Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        sgd_step(self.params, grads, self.velocity, self.lr, self.momentum, self.weight_decay)
