"""AdamW: adaptive moments with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor


@dataclass
class OptimState:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.05
    eps: float = 1e-8
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)


class AdamW:
    """Decoupled-weight-decay Adam over a name -> Tensor parameter dict.

    ``no_decay`` names are updated without weight decay (biases, norms and
    tokens by convention). The learning rate may be changed between steps by
    assigning ``state.lr``.
    """

    def __init__(self, params: dict, lr=1e-3, betas=(0.9, 0.95), weight_decay=0.05,
                 eps=1e-8, no_decay=()):
        if lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {lr}")
        self.params = dict(params)
        self.no_decay = set(no_decay)
        self.state = OptimState(lr=lr, betas=tuple(betas), weight_decay=weight_decay, eps=eps)
        for name, p in self.params.items():
            self.state.exp_avg[name] = np.zeros_like(p.data)
            self.state.exp_avg_sq[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, grads: dict | None = None) -> None:
        st = self.state
        if st.lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {st.lr}")
        st.step += 1
        b1, b2 = st.betas
        bc1 = 1.0 - b1 ** st.step
        bc2 = 1.0 - b2 ** st.step
        for name, p in self.params.items():
            g = p.grad if grads is None else grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.shape:
                raise ShapeError(f"grad for {name} has shape {g.shape}, param {p.shape}")
            adamw_update(p.data, g, st.exp_avg[name], st.exp_avg_sq[name], lr=st.lr,
                         beta1=b1, beta2=b2, eps=st.eps,
                         weight_decay=0.0 if name in self.no_decay else st.weight_decay,
                         bias_correction1=bc1, bias_correction2=bc2)

    def state_arrays(self) -> dict:
        out = {}
        for name in self.params:
            out[f"optim.exp_avg.{name}"] = self.state.exp_avg[name]
            out[f"optim.exp_avg_sq.{name}"] = self.state.exp_avg_sq[name]
        return out

    def load_state_arrays(self, arrays: dict, step: int) -> None:
        for name in self.params:
            self.state.exp_avg[name][...] = arrays[f"optim.exp_avg.{name}"]
            self.state.exp_avg_sq[name][...] = arrays[f"optim.exp_avg_sq.{name}"]
        self.state.step = int(step)


def adamw_update(param, grad, m, v, *, lr, beta1, beta2, eps, weight_decay,
                 bias_correction1, bias_correction2):
    """In-place single-tensor update; ``param``, ``m`` and ``v`` are modified."""
    if weight_decay:
        param -= (lr * weight_decay) * param
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    denom = np.sqrt(v / bias_correction2) + eps
    param -= (lr / bias_correction1) * (m / denom)
