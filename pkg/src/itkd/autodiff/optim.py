"""Parameters, Adam and the cosine learning-rate schedule."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor with a stable string id.

    Two network paths share a parameter iff they hold the same object
    (and therefore the same id and storage).
    """

    __slots__ = ("id", "_frozen")

    def __init__(self, data, id: str, frozen: bool = False):
        super().__init__(data, requires_grad=not frozen)
        self.id = id
        self._frozen = bool(frozen)

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self._frozen = bool(value)
        self.requires_grad = not self._frozen

    def __repr__(self) -> str:
        return f"Parameter({self.id!r}, shape={self.shape}, frozen={self.frozen})"


def unique_parameters(params: Iterable[Parameter]) -> list[Parameter]:
    """Deduplicate by identity, keeping first-seen order."""
    seen: set[int] = set()
    out = []
    for p in params:
        if id(p) not in seen:
            seen.add(id(p))
            out.append(p)
    return out


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


def finalize_grads(params: Iterable[Parameter]) -> None:
    """Frozen parameters and parameters the loss never reached end up with zero grad."""
    for p in params:
        if p.frozen or p.grad is None:
            p.grad = np.zeros_like(p.data)


def parameter_hash(params: Iterable[Parameter]) -> str:
    h = hashlib.sha256()
    for p in sorted(params, key=lambda q: q.id):
        h.update(p.id.encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    t = min(max(step, 0), total_steps)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total_steps))


@dataclass
class OptimizerState:
    total_steps: int
    lr_max: float = 0.003
    lr_min: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")

    @property
    def lr(self) -> float:
        return cosine_lr(self.step_count, self.total_steps, self.lr_max, self.lr_min)


def adam_step(state: OptimizerState, params: Sequence[Parameter]) -> OptimizerState:
    """One bias-corrected Adam update at the current cosine-scheduled lr.

    ``weight_decay`` (default 0) is applied decoupled, AdamW style.
    Frozen parameters are skipped entirely.
    """
    lr = state.lr
    t = state.step_count + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p in params:
        if p.frozen:
            continue
        if p.grad is None:
            raise ValueError(f"parameter {p.id!r} has no gradient buffer; run backward first")
        m = state.first_moment.get(p.id)
        v = state.second_moment.get(p.id)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        g = p.grad
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.first_moment[p.id] = m
        state.second_moment[p.id] = v
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        new = p.data - lr * update
        if state.weight_decay:
            new = new - lr * state.weight_decay * p.data
        p.data = new
    state.step_count = t
    return state
