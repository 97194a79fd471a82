"""Adam optimizer and seeded random streams."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from . import _kernels
from .autodiff import Tensor
from .errors import TrainingError

STREAMS = ("init", "disc_init", "shuffle_source", "shuffle_target", "dropout_source", "dropout_target")


def seeded_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators for each consumer of randomness in a run.

    Keeping streams separate means adding a consumer (e.g. a discriminator)
    never shifts the draws seen by the others.
    """
    children = np.random.SeedSequence(int(seed) & (2**64 - 1)).spawn(len(STREAMS))
    return {name: np.random.Generator(np.random.PCG64(ss)) for name, ss in zip(STREAMS, children)}


class Adam:
    """Adam with bias correction, updating parameters in place."""

    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float = 2e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        missing = [p.name or str(i) for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            raise TrainingError(f"parameters without gradient: {', '.join(missing)}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        # bias correction folded into the step size and epsilon
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        step = self.lr * np.sqrt(c2) / c1
        eps = self.eps * np.sqrt(c2)
        for p, m, v in zip(self.params, self.m, self.v):
            f = p.data.dtype.type
            g = np.ascontiguousarray(p.grad, dtype=p.data.dtype)
            _kernels.adam_update(p.data, g, m, v, f(b1), f(b2), f(step), f(eps))
