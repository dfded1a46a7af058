"""Plain SGD and AdamW updates over lists of tensors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from widin.autodiff.tensor import Tensor
from widin.errors import ShapeError


@dataclass
class OptimState:
    algorithm: Literal["sgd", "adamw"]
    lr: float
    momentum: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def sgd(cls, lr: float, momentum: float = 0.0) -> OptimState:
        return cls("sgd", lr, momentum=momentum, weight_decay=0.0)

    @classmethod
    def adamw(cls, lr: float, weight_decay: float = 0.01, betas=(0.9, 0.999), eps=1e-8) -> OptimState:
        return cls("adamw", lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)


def _check(params: Sequence[Tensor], grads: Sequence[np.ndarray | None]) -> list[np.ndarray]:
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    out = []
    for p, g in zip(params, grads):
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"grad shape {g.shape} does not match param {p.shape}")
        out.append(g)
    return out


def sgd_step(params: Sequence[Tensor], grads, state: OptimState) -> Sequence[Tensor]:
    """``p <- p - lr * g``, with optional heavy-ball momentum kept in ``state.m``."""
    grads = _check(params, grads)
    if state.momentum and not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
    for i, (p, g) in enumerate(zip(params, grads)):
        if state.momentum:
            state.m[i] = state.momentum * state.m[i] + g
            g = state.m[i]
        p.data = p.data - state.lr * g
    state.step += 1
    return params


def adamw_step(params: Sequence[Tensor], grads, state: OptimState) -> Sequence[Tensor]:
    """Adam with bias correction and decoupled weight decay.

    The decay is applied multiplicatively before the moment update, the same
    ordering PyTorch uses.
    """
    grads = _check(params, grads)
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    elif any(m.shape != p.shape for m, p in zip(state.m, params)):
        raise ShapeError("optimizer moments do not match parameter shapes")
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        update = (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        p.data = p.data * (1.0 - state.lr * state.weight_decay) - state.lr * update
    return params


def step(params: Sequence[Tensor], state: OptimState) -> None:
    """Apply one update using the gradients stored on ``params``, then clear them."""
    grads = [p.grad for p in params]
    if state.algorithm == "sgd":
        sgd_step(params, grads, state)
    else:
        adamw_step(params, grads, state)
    for p in params:
        p.grad = None
