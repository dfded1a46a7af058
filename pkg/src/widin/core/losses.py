"""Alignment, disentanglement and classification losses."""

from __future__ import annotations

import numpy as np

from widin.autodiff import (
    Tensor,
    cross_entropy,
    l2_normalize,
    log_softmax,
    matmul,
    mean_all,
    mse_loss,
    mul,
    scale,
    sum_all,
    sum_cols,
    transpose,
)
from widin.errors import ShapeError

FEAT_WEIGHT = 2.0


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def instance_alignment_loss(X, T, tau: float = 0.07, mode: str = "CT", labels=None) -> Tensor:
    """Symmetric InfoNCE between visual rows ``X`` and worded rows ``T``.

    Row ``i`` of ``X`` and ``T`` form the positive pair; both directions are
    averaged over the batch and summed.  Denominators include the positive.
    ``SupCT`` treats every same-label pair as positive (mean over positives);
    ``None`` returns zero.
    """
    X, T = _t(X), _t(T)
    if X.shape != T.shape:
        raise ShapeError(f"X {X.shape} and T {T.shape} differ")
    if mode == "None":
        return Tensor(0.0)
    n = X.shape[0]
    if mode == "CT":
        if n < 2:
            raise ValueError("contrastive alignment needs a batch of at least 2")
        pos = np.eye(n)
    elif mode == "SupCT":
        if labels is None:
            raise ValueError("SupCT needs labels")
        y = np.asarray(labels).reshape(-1)
        same = (y[:, None] == y[None, :]).astype(np.float64)
        pos = same / same.sum(axis=1, keepdims=True)
    else:
        raise ValueError(f"unknown alignment mode {mode!r}")
    # S[i, j] = x_i . t_j / tau
    S = scale(matmul(X, transpose(T)), 1.0 / tau)
    text_anchor = log_softmax(transpose(S))  # row i: t_i against every x_j
    image_anchor = log_softmax(S)  # row i: x_i against every t_j
    total = sum_all(mul(text_anchor, Tensor(pos.T))) + sum_all(mul(image_anchor, Tensor(pos)))
    return scale(total, -1.0 / n)


def class_alignment_loss(Tx, class_text, labels, tau: float = 0.07) -> Tensor:
    """Cross-entropy of worded rows against the class-text table."""
    Tx = _t(Tx)
    table = np.asarray(class_text.data if isinstance(class_text, Tensor) else class_text)
    return cross_entropy(matmul(Tx, Tensor(table.T)), labels, tau)


def class_contrastive_loss(emb, labels, class_text, tau: float = 0.07) -> Tensor:
    """Symmetric image/class-name InfoNCE used to train the uni-modal bridge.

    Image side: each row against every class embedding.  Text side: the row's
    own class embedding against the batch, with only other-class rows as
    negatives.
    """
    emb = _t(emb)
    y = np.asarray(labels).reshape(-1)
    table = np.asarray(class_text)
    image_side = cross_entropy(matmul(emb, Tensor(table.T)), y, tau)
    # R[i, j] = t_{y_i} . e_j / tau
    R = scale(matmul(Tensor(table[y]), transpose(emb)), 1.0 / tau)
    keep = (y[:, None] != y[None, :]) | np.eye(len(y), dtype=bool)
    # masked log-softmax: exclude same-class non-diagonal entries with a large negative offset
    offset = np.where(keep, 0.0, -1e4)
    lsm = log_softmax(R + Tensor(offset))
    text_side = scale(sum_all(mul(lsm, Tensor(np.eye(len(y))))), -1.0 / len(y))
    return image_side + text_side


def disentangle_target(x, t_x, t_c, k: float = 1.0) -> np.ndarray:
    """``x - k (t_x - t_c)``, returned as a plain array (a constant target)."""
    x, t_x, t_c = (np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64) for a in (x, t_x, t_c))
    if not (x.shape == t_x.shape == t_c.shape):
        raise ShapeError(f"shapes {x.shape}, {t_x.shape}, {t_c.shape} differ")
    if k < 0:
        raise ValueError("k must be non-negative")
    return x - k * (t_x - t_c)


def feature_loss(pred: Tensor, target, mode: str = "MSE") -> Tensor:
    """Disentangler loss: weighted MSE, or ``1 - cosine`` (scale-blind)."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    if mode == "MSE":
        return scale(mse_loss(pred, target), FEAT_WEIGHT)
    if mode == "direction":
        if pred.shape != target.shape:
            raise ShapeError(f"shapes {pred.shape} vs {target.shape}")
        unit_target = l2_normalize(Tensor(target))
        cos = sum_cols(mul(l2_normalize(pred), unit_target))
        return scale(mean_all(cos), -1.0) + 1.0
    raise ValueError(f"unknown feature-loss mode {mode!r}")


def logit_adjusted_loss(logits: Tensor, labels, priors, margin_scale: float = 1.0) -> Tensor:
    """Cross-entropy on ``z_c + margin_scale * ln(prior_c)``."""
    priors = np.asarray(priors, dtype=np.float64).reshape(-1)
    if np.any(priors <= 0):
        raise ValueError("class priors must be strictly positive")
    if not np.isclose(priors.sum(), 1.0):
        raise ValueError("class priors must sum to 1")
    if priors.size != logits.shape[1]:
        raise ShapeError(f"{priors.size} priors for {logits.shape[1]} classes")
    margins = Tensor((margin_scale * np.log(priors))[None, :])
    return cross_entropy(logits + margins, labels)
