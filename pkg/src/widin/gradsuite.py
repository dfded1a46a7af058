"""The finite-difference suite: every differentiable path the pipeline uses."""

from __future__ import annotations

from typing import Callable

import numpy as np

from widin import autodiff as ad
from widin.autodiff import Tensor, gradcheck
from widin.core.config import TrainConfig
from widin.core.params import MLP
from widin.core.training import alignment_loss
from widin.core.wording import fine_grained_embedding
from widin.encoders import TEMPLATES, Vocabulary, build_encoder, encode_tokens, tokenize

TOLERANCE = 1e-6


def _p(rng: np.random.Generator, *shape: int, scale: float = 1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _w(rng: np.random.Generator, *shape: int) -> Tensor:
    # fixed random projection: turns any matrix output into a generic scalar
    return Tensor(rng.normal(size=shape))


def _scalar(out: Tensor, w: Tensor) -> Tensor:
    return ad.sum_all(ad.mul(out, w))


def primitive_checks(seed: int) -> dict[str, Callable[[], float]]:
    """One check per primitive, each on fresh random inputs drawn from ``seed``."""
    rng = np.random.default_rng([seed, 0x6C])
    a, b = _p(rng, 3, 4), _p(rng, 3, 4)
    row, one = _p(rng, 1, 4), _p(rng, 1, 1)
    m1, m2 = _p(rng, 3, 5), _p(rng, 5, 2)
    pos = Tensor(np.abs(rng.normal(size=(3, 4))) + 0.5, requires_grad=True)
    g, beta = _p(rng, 1, 4), _p(rng, 1, 4)
    L, H, D = 3, 2, 4
    q, k, v = _p(rng, 2 * L, D), _p(rng, 2 * L, D), _p(rng, 2 * L, D)
    logits = _p(rng, 4, 3)
    targets = rng.integers(0, 3, size=4)
    mse_target = rng.normal(size=(3, 4))
    w34, w43, w32 = _w(rng, 3, 4), _w(rng, 4, 3), _w(rng, 3, 2)
    w14, w31, w64 = _w(rng, 1, 4), _w(rng, 3, 1), _w(rng, 2 * L, D)
    w_cat = _w(rng, 4, 4)
    idx = np.array([2, 0, 2, 1])
    return {
        "add": lambda: gradcheck(lambda: _scalar(ad.add(a, b), w34), [a, b]),
        "add_row": lambda: gradcheck(lambda: _scalar(ad.add(a, row), w34), [a, row]),
        "sub": lambda: gradcheck(lambda: _scalar(ad.sub(a, row), w34), [a, row]),
        "mul": lambda: gradcheck(lambda: _scalar(ad.mul(a, b), w34), [a, b]),
        "mul_scalar": lambda: gradcheck(lambda: _scalar(ad.mul(a, one), w34), [a, one]),
        "scale": lambda: gradcheck(lambda: _scalar(ad.scale(a, -1.7), w34), [a]),
        "matmul": lambda: gradcheck(lambda: _scalar(ad.matmul(m1, m2), w32), [m1, m2]),
        "transpose": lambda: gradcheck(lambda: _scalar(ad.transpose(a), w43), [a]),
        "concat_rows": lambda: gradcheck(lambda: _scalar(ad.concat_rows([a, row]), w_cat), [a, row]),
        "take_rows": lambda: gradcheck(lambda: _scalar(ad.take_rows(a, idx), w_cat), [a]),
        "mean_rows": lambda: gradcheck(lambda: _scalar(ad.mean_rows(a), w14), [a]),
        "sum_cols": lambda: gradcheck(lambda: _scalar(ad.sum_cols(a), w31), [a]),
        "mean_all": lambda: gradcheck(lambda: ad.mean_all(ad.mul(a, b)), [a, b]),
        "tanh": lambda: gradcheck(lambda: _scalar(ad.tanh(a), w34), [a]),
        "gelu": lambda: gradcheck(lambda: _scalar(ad.gelu(a), w34), [a]),
        "layer_norm": lambda: gradcheck(lambda: _scalar(ad.layer_norm(a, g, beta), w34), [a, g, beta]),
        "l2_normalize": lambda: gradcheck(lambda: _scalar(ad.l2_normalize(pos), w34), [pos]),
        "l2_normalize_dot": lambda: gradcheck(lambda: ad.sum_all(ad.mul(ad.l2_normalize(row), Tensor(w14.data))), [row]),
        "log_softmax": lambda: gradcheck(lambda: _scalar(ad.log_softmax(a), w34), [a]),
        "attention": lambda: gradcheck(lambda: _scalar(ad.attention(q, k, v, L, H), w64), [q, k, v]),
        "mse_loss": lambda: gradcheck(lambda: ad.mse_loss(a, mse_target), [a]),
        "cross_entropy": lambda: gradcheck(lambda: ad.cross_entropy(logits, targets), [logits]),
        "cross_entropy_tau": lambda: gradcheck(
            lambda: ad.cross_entropy(ad.scale(logits, 0.07), targets, tau=0.07), [logits]
        ),
        "softmax_xent_temp": lambda: gradcheck(
            lambda: ad.softmax_xent_temp(ad.take_rows(ad.scale(logits, 0.07), [0]), 1, 0.07), [logits]
        ),
        "fan_out": lambda: gradcheck(lambda: ad.sum_all(ad.add(ad.tanh(a), ad.mul(ad.tanh(a), a))), [a]),
    }


def pipeline_checks(seed: int, d: int = 16) -> dict[str, Callable[[], float]]:
    """Gradients through the frozen encoder, the projector and the full alignment loss."""
    rng = np.random.default_rng([seed, 0x6D])
    C = 4
    vocab = Vocabulary.build(C, 2)
    enc = build_encoder(d, seed, vocab)
    seq = tokenize(vocab, TEMPLATES["image"].slot_text())
    slot = _p(rng, 1, d, scale=0.5)
    proj = MLP.init(d, d, d, rng, std=0.3)
    x = rng.normal(size=(6, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    y = np.array([0, 1, 2, 3, 0, 1])
    w = _w(rng, 1, d)
    cfg = TrainConfig()
    return {
        "encode_tokens_slot": lambda: gradcheck(lambda: _scalar(encode_tokens(enc, seq, slot), w), [slot]),
        "word_image_encode": lambda: gradcheck(
            lambda: _scalar(ad.take_rows(fine_grained_embedding(enc, proj, x[:2], TEMPLATES["image"]), [1]), w),
            proj.parameters(),
        ),
        "stage_a_loss": lambda: gradcheck(lambda: alignment_loss(enc, proj, x, y, C, cfg)[0], proj.parameters()),
    }


def run_suite(seed: int = 0, include_pipeline: bool = True) -> dict[str, float]:
    """Maximum relative error of every check, keyed by name."""
    checks = primitive_checks(seed)
    if include_pipeline:
        checks.update(pipeline_checks(seed))
    return {name: float(fn()) for name, fn in checks.items()}
