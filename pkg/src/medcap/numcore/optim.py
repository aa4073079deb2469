"""Adam, warmup-then-cosine learning rates, and global-norm gradient clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import ContractError, ShapeError, Tensor


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor], **hyper) -> "AdamState":
        return cls(
            first_moment=[np.zeros_like(p.data) for p in params],
            second_moment=[np.zeros_like(p.data) for p in params],
            **hyper,
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, lr: float) -> None:
    """Apply one bias-corrected Adam update in place and advance ``state``.

    Parameter arrays are replaced rather than written into, so arrays captured
    by earlier graphs stay valid.
    """
    if lr < 0:
        raise ContractError(f"learning rate must be non-negative, got {lr}")
    if not (len(params) == len(grads) == len(state.first_moment)):
        raise ShapeError("params, grads and Adam moments must have the same length")
    for p, g, m in zip(params, grads, state.first_moment):
        if p.shape != np.shape(g) or p.shape != m.shape:
            raise ShapeError(f"shape mismatch in adam_step: param {p.shape}, grad {np.shape(g)}")

    state.step_count += 1
    t = state.step_count
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=p.dtype)
        m = b1 * state.first_moment[i] + (1.0 - b1) * g
        v = b2 * state.second_moment[i] + (1.0 - b2) * (g * g)
        state.first_moment[i] = m.astype(p.dtype, copy=False)
        state.second_moment[i] = v.astype(p.dtype, copy=False)
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ContractError("base_lr must be positive")
        if self.total_steps <= 0:
            raise ContractError("total_steps must be positive")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ContractError("warmup_steps must lie in [0, total_steps]")

    @classmethod
    def with_warmup_fraction(cls, base_lr: float, total_steps: int, fraction: float = 0.05) -> "LrSchedule":
        return cls(base_lr, int(round(fraction * total_steps)), total_steps)


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Linear ramp from 0 over the warmup, then half-cosine decay to 0."""
    if not 0 <= step <= schedule.total_steps:
        raise ContractError(f"step {step} outside [0, {schedule.total_steps}]")
    warmup, total, base = schedule.warmup_steps, schedule.total_steps, schedule.base_lr
    if step < warmup:
        return base * step / warmup
    if total == warmup:
        return base
    progress = (step - warmup) / (total - warmup)
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float = 1.0) -> tuple[list[np.ndarray], float]:
    """Rescale ``grads`` jointly so their global L2 norm is at most ``max_norm``.

    Returns the (possibly) scaled gradients and the norm measured before clipping.
    """
    if max_norm <= 0:
        raise ContractError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return list(grads), norm
    scale = max_norm / norm
    clipped = [(np.asarray(g, dtype=np.float64) * scale).astype(np.asarray(g).dtype) for g in grads]
    # float32 rounding can leave the result a hair above max_norm
    if global_norm(clipped) > max_norm:
        shrink = max_norm / global_norm(clipped) * (1.0 - 1e-7)
        clipped = [(g * shrink).astype(g.dtype) for g in clipped]
    return clipped, norm


class Adam:
    """Adam over named parameter groups, each driven by its own learning rate.

    Every parameter carries its own :class:`AdamState` keyed by its dotted
    name, so parameters unfrozen late start bias correction from step one.
    Parameters with ``requires_grad`` false or no gradient are left alone.
    """

    def __init__(self, groups: dict[str, dict[str, Tensor]], beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        self.groups = groups
        self.beta1, self.beta2, self.epsilon = beta1, beta2, epsilon
        self.states: dict[str, AdamState] = {}

    def named_active(self) -> list[tuple[str, str, Tensor]]:
        return [
            (group, name, p)
            for group, params in self.groups.items()
            for name, p in params.items()
            if p.requires_grad and p.grad is not None
        ]

    def step(self, lrs: dict[str, float]) -> None:
        for group, name, p in self.named_active():
            state = self.states.get(name)
            if state is None:
                state = AdamState.zeros_like([p], beta1=self.beta1, beta2=self.beta2, epsilon=self.epsilon)
                self.states[name] = state
            adam_step([p], [p.grad], state, lrs[group])
