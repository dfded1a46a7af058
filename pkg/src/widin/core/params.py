"""Trainable layers: projector, disentangler, classifier and bridge."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from widin.autodiff import Tensor, add, gelu, matmul, mul, sub
from widin.errors import ShapeError


@dataclass
class Linear:
    weight: Tensor  # (in, out)
    bias: Tensor  # (1, out)

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator | None, std: float = 0.02) -> Linear:
        w = np.zeros((d_in, d_out)) if rng is None else rng.normal(0.0, std, size=(d_in, d_out))
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros((1, d_out)), requires_grad=True))

    def __call__(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[1] != self.weight.shape[0]:
            raise ShapeError(f"input width {x.shape[1]} != layer input {self.weight.shape[0]}")
        return add(matmul(x, self.weight), self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


@dataclass
class MLP:
    """Two linear layers with GELU in between."""

    first: Linear
    second: Linear

    @classmethod
    def init(cls, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator, std: float = 0.02) -> MLP:
        return cls(Linear.init(d_in, d_hidden, rng, std), Linear.init(d_hidden, d_out, rng, std))

    def __call__(self, x) -> Tensor:
        return self.second(gelu(self.first(x)))

    def parameters(self) -> list[Tensor]:
        return self.first.parameters() + self.second.parameters()


def n_params(module) -> int:
    return sum(p.data.size for p in module.parameters())


def checksum(*modules) -> str:
    h = hashlib.sha256()
    for m in modules:
        if m is None:
            h.update(b"none")
            continue
        for p in m.parameters():
            h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


@dataclass
class WidinModel:
    projector: MLP  # F_P, worded-image token
    disentangler: Linear  # F_D, zero-initialized residual
    classifier: Linear  # F_C
    bridge: Linear | None = None  # W_B, foreign view -> joint space
    # fixed standardization in front of F_C, from the training features (not learned)
    feature_mean: np.ndarray | None = None
    feature_std: np.ndarray | None = None
    history: dict = field(default_factory=dict)
    stage_a_done: bool = False
    stage_b_done: bool = False

    @classmethod
    def init(cls, d: int, num_classes: int, rng: np.random.Generator) -> WidinModel:
        return cls(
            projector=MLP.init(d, d, d, rng),
            disentangler=Linear.init(d, d, None),
            classifier=Linear.init(d, num_classes, rng),
        )

    def set_feature_stats(self, x: np.ndarray) -> None:
        """Record per-feature mean and std of ``x`` for the classifier input (same rule as the probes)."""
        std = x.std(axis=0, keepdims=True)
        self.feature_mean = x.mean(axis=0, keepdims=True)
        self.feature_std = np.where(std > 1e-12, std, 1.0)

    def head(self, features) -> Tensor:
        """``F_C`` applied to standardized features; identity standardization until stats are set."""
        features = features if isinstance(features, Tensor) else Tensor(features)
        if self.feature_mean is not None:
            features = mul(sub(features, Tensor(self.feature_mean)), Tensor(1.0 / self.feature_std))
        return self.classifier(features)

    def modules(self) -> dict:
        out = {"projector": self.projector, "disentangler": self.disentangler, "classifier": self.classifier}
        if self.bridge is not None:
            out["bridge"] = self.bridge
        return out
