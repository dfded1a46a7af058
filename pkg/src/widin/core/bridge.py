"""Uni-modal bridge: a linear map from a foreign vision space into the joint space."""

from __future__ import annotations

import numpy as np

from widin.autodiff import OptimState, Tensor, l2_normalize, step
from widin.core.config import TrainConfig
from widin.core.losses import class_contrastive_loss
from widin.core.params import Linear
from widin.core.training import Trace, batches
from widin.errors import ShapeError

_BRIDGE = 0xB7


def bridge_embed(bridge: Linear, v) -> Tensor:
    """``x~ = l2_normalize(W_B v)``."""
    return l2_normalize(bridge(v))


def init_bridge(d_v: int, d: int, rng: np.random.Generator) -> Linear:
    """Gaussian init with variance ``1/d_v`` so ``W_B v`` starts at unit scale."""
    return Linear(
        Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_v), size=(d_v, d)), requires_grad=True),
        Tensor(np.zeros((1, d)), requires_grad=True),
    )


def train_unimodal_bridge(
    v: np.ndarray,
    y: np.ndarray,
    class_text: np.ndarray,
    cfg: TrainConfig,
    bridge: Linear | None = None,
) -> tuple[Linear, Trace]:
    """Fit ``W_B`` contrastively against the frozen class-text table; nothing else trains."""
    v = np.asarray(v, dtype=np.float64)
    d = class_text.shape[1]
    if bridge is None:
        bridge = init_bridge(v.shape[1], d, np.random.default_rng([cfg.seed, _BRIDGE]))
    if bridge.weight.shape != (v.shape[1], d):
        raise ShapeError(f"bridge maps {bridge.weight.shape}, data is {v.shape[1]} -> {d}")
    opt = OptimState.adamw(cfg.lr_bridge, cfg.weight_decay)
    trace = Trace()
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, _BRIDGE, epoch])
        total, count = 0.0, 0
        for idx in batches(len(y), cfg.batch, rng, min_size=2):
            loss = class_contrastive_loss(bridge_embed(bridge, v[idx]), y[idx], class_text, cfg.tau)
            loss.backward()
            step(bridge.parameters(), opt)
            total += loss.item()
            count += 1
        trace.add({"bridge": total}, count)
    return bridge, trace


def apply_bridge(bridge: Linear, v: np.ndarray) -> np.ndarray:
    return bridge_embed(bridge, np.asarray(v, dtype=np.float64)).data
