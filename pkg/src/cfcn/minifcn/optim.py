"""SGD with momentum and Adam, updating parameter dicts in place."""

from typing import Dict

import numpy as np

Params = Dict[str, np.ndarray]


def sgd_step(params: Params, grads: Params, state: dict, lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0) -> None:
    """v <- momentum*v - lr*(g + wd*theta); theta <- theta + v."""
    vel = state.setdefault("velocity", {})
    for k, theta in params.items():
        v = vel.get(k)
        if v is None:
            v = vel[k] = np.zeros_like(theta)
        v *= momentum
        v -= lr * (grads[k] + weight_decay * theta)
        theta += v


def adam_step(params: Params, grads: Params, state: dict, lr: float, eps: float = 0.1,
              beta1: float = 0.9, beta2: float = 0.999, weight_decay: float = 0.0) -> None:
    """Adam with bias-corrected moments; ``state['t']`` counts completed steps."""
    t = state["t"] = state.get("t", 0) + 1
    m_all = state.setdefault("m", {})
    v_all = state.setdefault("v", {})
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for k, theta in params.items():
        g = grads[k] + weight_decay * theta if weight_decay else grads[k]
        m = m_all.get(k)
        if m is None:
            m = m_all[k] = np.zeros_like(theta)
            v_all[k] = np.zeros_like(theta)
        v = v_all[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        theta -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(theta.dtype)
