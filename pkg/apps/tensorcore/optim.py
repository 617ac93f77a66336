"""
Adam / AdamW with per-parameter (m, v, t) state.

Frozen parameters (trainable=False) are skipped entirely, so their data
stays bit-identical across any sequence of steps.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from apps.tensorcore.exceptions import ConfigError

logger = logging.getLogger(__name__)


@dataclass
class MomentState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


class Adam:
    """Adam; a nonzero weight_decay is applied as classic L2 on the gradient."""
    decoupled = False

    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: dict[str, MomentState] = {}

    @property
    def lr(self) -> float:
        return self._lr

    @lr.setter
    def lr(self, value: float):
        if not value > 0:
            raise ConfigError(f"learning rate must be > 0, got {value}")
        self._lr = float(value)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def _key(self, p) -> str:
        return p.name or str(id(p))

    def step(self):
        beta1, beta2 = self.betas
        for p in self.params:
            if not p.trainable or p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and not self.decoupled:
                g = g + self.weight_decay * p.data
            st = self.state.get(self._key(p))
            if st is None or st.m.shape != p.shape:
                st = self.state[self._key(p)] = MomentState(np.zeros_like(p.data), np.zeros_like(p.data))
            st.t += 1
            st.m = beta1 * st.m + (1 - beta1) * g
            st.v = beta2 * st.v + (1 - beta2) * g * g
            m_hat = st.m / (1 - beta1 ** st.t)
            v_hat = st.v / (1 - beta2 ** st.t)
            if self.weight_decay and self.decoupled:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    # Checkpoint support
    def state_dict(self) -> dict:
        return {name: (st.t, st.m.copy(), st.v.copy()) for name, st in self.state.items()}

    def load_state_dict(self, state: dict):
        self.state = {name: MomentState(np.array(m), np.array(v), int(t)) for name, (t, m, v) in state.items()}


class AdamW(Adam):
    """Adam with decoupled weight decay θ ← θ·(1 − lr·wd) before the moment update."""
    decoupled = True


@dataclass
class MultiStepSchedule:
    """lr(epoch) = base_lr · gamma^(number of milestones ≤ epoch)."""
    base_lr: float
    milestones: tuple = field(default_factory=tuple)
    gamma: float = 0.1

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for m in self.milestones if epoch >= m)
        return self.base_lr * self.gamma ** drops

    def apply(self, optimizer: Adam, epoch: int) -> float:
        lr = self.lr_at(epoch)
        if lr != optimizer.lr:
            logger.debug('lr %.3g -> %.3g at epoch %d', optimizer.lr, lr, epoch)
        optimizer.lr = lr
        return lr
