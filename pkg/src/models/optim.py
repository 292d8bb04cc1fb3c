"""Adam optimizer over a :class:`DetectorState` with step-decay learning rate."""

from __future__ import annotations

import logging
from typing import Iterable, Mapping

import numpy as np

from ..errors import ShapeError
from .detector import DetectorState

logger = logging.getLogger(__name__)


class AdamOptimizer:
    """Classic Adam updating a detector state's parameters in place.

    Args:
        state: State whose ``params`` are updated.
        lr: Base learning rate.
        beta1: Exponential decay for first moment.
        beta2: Exponential decay for second moment.
        eps: Numerical stability term.
        decay_epochs: Epochs at which the learning rate is multiplied by ``decay_factor``.
        decay_factor: Multiplier applied at each decay epoch.
    """

    def __init__(
        self,
        state: DetectorState,
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        decay_epochs: Iterable[int] = (),
        decay_factor: float = 0.1,
    ) -> None:
        self.state = state
        self.base_lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.decay_epochs = tuple(sorted(decay_epochs))
        self.decay_factor = decay_factor
        self.lr = lr
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in state.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in state.params.items()}

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for e in self.decay_epochs if epoch >= e)
        return self.base_lr * self.decay_factor**drops

    def set_epoch(self, epoch: int) -> float:
        new_lr = self.lr_at(epoch)
        if new_lr != self.lr:
            logger.info("Learning rate %.3g -> %.3g at epoch %d", self.lr, new_lr, epoch)
        self.lr = new_lr
        return new_lr

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        """Apply one Adam update.

        Raises:
            FrozenStateError: The state is frozen.
            ShapeError: A gradient does not match its parameter.
        """
        self.state.ensure_mutable()
        self.t += 1
        bc1 = 1 - self.beta1**self.t
        bc2 = 1 - self.beta2**self.t
        for name, param in self.state.params.items():
            g = grads[name]
            if g.shape != param.shape:
                raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {param.shape}")
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * (g**2)
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            param -= self.lr * (m_hat / (np.sqrt(v_hat) + self.eps))
