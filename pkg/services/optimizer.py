# services/optimizer.py

import logging
from dataclasses import dataclass

import numpy as np

from services.denoiser import ContextBagParams

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    m: ContextBagParams
    v: ContextBagParams
    step: int = 0

    @classmethod
    def for_params(cls, params: ContextBagParams) -> "AdamState":
        return cls(m=params.zeros_like(), v=params.zeros_like(), step=0)


def warmup_lr(step: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warmup from 0 to base_lr over warmup_steps, constant afterwards."""
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, step / warmup_steps)


def adam_step(params: ContextBagParams, grad: ContextBagParams, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999,
              eps_adam: float = 1e-8) -> tuple[ContextBagParams, AdamState]:
    step = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    grads = grad.arrays()
    m_prev, v_prev = state.m.arrays(), state.v.arrays()
    for name, value in params.arrays().items():
        g = grads[name]
        m = beta1 * m_prev[name] + (1.0 - beta1) * g
        v = beta2 * v_prev[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** step)
        v_hat = v / (1.0 - beta2 ** step)
        new_params[name] = value - lr * m_hat / (np.sqrt(v_hat) + eps_adam)
        new_m[name], new_v[name] = m, v
    return (ContextBagParams.from_arrays(new_params),
            AdamState(m=ContextBagParams.from_arrays(new_m),
                      v=ContextBagParams.from_arrays(new_v), step=step))
