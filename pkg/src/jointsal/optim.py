"""SGD with momentum, Adam, and the step-milestone learning-rate schedule."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, ContractError


class Optimizer:
    kind = ""

    def __init__(self, params: Sequence[Tensor], lr: float, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.step_count = 0

    def _grads(self, grads=None) -> list[np.ndarray]:
        if grads is None:
            grads = [p.grad for p in self.params]
        if len(grads) != len(self.params):
            raise ContractError(f"{len(grads)} gradients for {len(self.params)} parameters")
        out = []
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g is None:
                g = np.zeros_like(p.data)
            g = np.asarray(g, dtype=p.data.dtype)
            if g.shape != p.shape:
                raise ContractError(f"gradient {i} has shape {g.shape}, parameter is {p.shape}")
            out.append(g)
        return out

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, grads=None) -> None:
        gs = self._grads(grads)
        self.step_count += 1
        for i, (p, g) in enumerate(zip(self.params, gs)):
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self._update(i, p, g)

    def _update(self, i: int, p: Tensor, g: np.ndarray) -> None:
        raise NotImplementedError

    # checkpoint support
    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def scalars(self) -> dict:
        return {"kind": self.kind, "lr": self.lr, "weight_decay": self.weight_decay, "step_count": self.step_count}

    def load_state(self, scalars: dict, buffers: dict) -> None:
        if scalars.get("kind") != self.kind:
            raise ContractError(f"optimizer state is for {scalars.get('kind')!r}, not {self.kind!r}")
        self.lr = float(scalars["lr"])
        self.weight_decay = float(scalars["weight_decay"])
        self.step_count = int(scalars["step_count"])
        self._load_buffers(buffers)

    def _load_buffers(self, buffers: dict) -> None:
        pass

    def _restore(self, buffers: dict, prefix: str) -> list:
        out = []
        for i, p in enumerate(self.params):
            key = f"{prefix}.{i}"
            if key not in buffers:
                out.append(None)
                continue
            b = np.array(buffers[key], dtype=np.float64)
            if b.shape != p.shape:
                raise ContractError(f"optimizer buffer {key} has shape {b.shape}, parameter is {p.shape}")
            out.append(b)
        return out


class SGDMomentum(Optimizer):
    """``g' = g + wd*p; v = mu*v + g'; p -= lr*v``."""

    kind = "sgd_momentum"

    def __init__(self, params, lr=0.01, momentum=0.9, weight_decay=1e-4):
        super().__init__(params, lr, weight_decay)
        self.momentum = float(momentum)
        self.velocity: list = [None] * len(self.params)

    def _update(self, i, p, g):
        v = self.velocity[i]
        v = g.copy() if v is None else self.momentum * v + g
        self.velocity[i] = v
        p.data -= self.lr * v

    def buffers(self):
        return {f"velocity.{i}": v for i, v in enumerate(self.velocity) if v is not None}

    def scalars(self):
        return {**super().scalars(), "momentum": self.momentum}

    def _load_buffers(self, buffers):
        self.velocity = self._restore(buffers, "velocity")


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, params, lr=1e-5, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-4):
        super().__init__(params, lr, weight_decay)
        self.beta1, self.beta2, self.eps = float(beta1), float(beta2), float(eps)
        self.m: list = [None] * len(self.params)
        self.v: list = [None] * len(self.params)

    def _update(self, i, p, g):
        m = np.zeros_like(g) if self.m[i] is None else self.m[i]
        v = np.zeros_like(g) if self.v[i] is None else self.v[i]
        m = self.beta1 * m + (1.0 - self.beta1) * g
        v = self.beta2 * v + (1.0 - self.beta2) * g * g
        self.m[i], self.v[i] = m, v
        t = self.step_count
        m_hat = m / (1.0 - self.beta1**t)
        v_hat = v / (1.0 - self.beta2**t)
        p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def buffers(self):
        out = {f"adam_m.{i}": m for i, m in enumerate(self.m) if m is not None}
        out.update({f"adam_v.{i}": v for i, v in enumerate(self.v) if v is not None})
        return out

    def scalars(self):
        return {**super().scalars(), "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}

    def _load_buffers(self, buffers):
        self.m = self._restore(buffers, "adam_m")
        self.v = self._restore(buffers, "adam_v")


def build_optimizer(params, train_cfg) -> Optimizer:
    if train_cfg.optimizer == "sgd_momentum":
        return SGDMomentum(params, train_cfg.lr, train_cfg.momentum, train_cfg.weight_decay)
    if train_cfg.optimizer == "adam":
        return Adam(params, train_cfg.lr, train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps, train_cfg.weight_decay)
    raise ConfigError(f"unknown optimizer {train_cfg.optimizer!r}")


def lr_at(step: int, base_lr: float, milestones: Sequence[int], decay: float = 0.1) -> float:
    """Learning rate for a 0-based step: ``base_lr * decay**(milestones passed)``."""
    passed = sum(1 for m in milestones if step >= m)
    return base_lr * decay**passed
