"""Staged training: projector alignment, then disentangler + classifier."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from widin.autodiff import OptimState, Tensor, add, cross_entropy, l2_normalize, step, take_rows
from widin.core.config import TrainConfig
from widin.core.losses import (
    class_alignment_loss,
    disentangle_target,
    feature_loss,
    instance_alignment_loss,
    logit_adjusted_loss,
)
from widin.core.params import Linear, WidinModel
from widin.core.wording import class_rows, pick_templates, text_view
from widin.encoders import FrozenLanguageEncoder
from widin.errors import StageError

log = logging.getLogger(__name__)

# rng stream ids
_INIT, _STAGE_A, _STAGE_B, _TARGETS = 0xF0, 0xA1, 0xB2, 0xC3


@dataclass
class Trace:
    """Per-epoch mean of each loss component."""

    epochs: list[dict[str, float]] = field(default_factory=list)

    def add(self, sums: dict[str, float], batches: int) -> None:
        self.epochs.append({k: v / batches for k, v in sums.items()})

    def series(self, key: str) -> list[float]:
        return [e[key] for e in self.epochs]


def batches(n: int, batch: int, rng: np.random.Generator, min_size: int = 1):
    perm = rng.permutation(n)
    for start in range(0, n, batch):
        idx = perm[start : start + batch]
        if len(idx) >= min_size:
            yield idx


def _renorm(view_tx: Tensor, strategy: str) -> Tensor:
    return l2_normalize(view_tx) if strategy == "aggregated" else view_tx


def alignment_loss(
    enc: FrozenLanguageEncoder,
    projector,
    x: np.ndarray,
    y: np.ndarray,
    num_classes: int,
    cfg: TrainConfig,
    choice: np.ndarray | None = None,
    direct: bool = False,
):
    """``L_ia + L_ca`` for one batch; returns ``(total, parts, view)``."""
    view = text_view(enc, projector, x, num_classes, cfg.template, choice, direct)
    tx = _renorm(view.t_x, cfg.template)
    l_ia = instance_alignment_loss(Tensor(x), tx, cfg.tau, cfg.align, y)
    n = len(y)
    l_ca = None
    for idx, table in view.row_tables:
        if cfg.template == "aggregated":
            table = table / np.linalg.norm(table, axis=1, keepdims=True)
        part = class_alignment_loss(take_rows(tx, idx) if len(idx) != n else tx, table, y[idx], cfg.tau)
        part = part * (len(idx) / n)
        l_ca = part if l_ca is None else l_ca + part
    parts = {"ia": l_ia.item(), "ca": l_ca.item()}
    return l_ia + l_ca, parts, view


def _x_e(view, x: np.ndarray, y: np.ndarray, k: float) -> Tensor:
    # tracked version of x - k (t_x - t_c), used only by joint schedules
    return add(Tensor(x), (view.t_x - Tensor(class_rows(view, y))) * (-k))


def train_stage_alignment(
    enc: FrozenLanguageEncoder,
    x: np.ndarray,
    y: np.ndarray,
    num_classes: int,
    cfg: TrainConfig,
    model: WidinModel,
    direct: bool = False,
) -> Trace:
    """Train the projector under ``L_ia + L_ca`` with plain SGD.

    Under the joint schedules ``PC,D`` / ``PD,C`` the classifier or the
    disentangler is trained in the same loop (AdamW), the other head later.
    """
    if len(y) == 0:
        raise ValueError("empty training split")
    proj_opt = OptimState.sgd(cfg.lr_align)
    joint = {"PC,D": model.classifier, "PD,C": model.disentangler}.get(cfg.schedule)
    head_opt = OptimState.adamw(cfg.lr_disentangle, cfg.weight_decay) if joint is not None else None
    trace = Trace()
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, _STAGE_A, epoch])
        sums: dict[str, float] = {}
        count = 0
        for idx in batches(len(y), cfg.batch, rng, min_size=2):
            xb, yb = x[idx], y[idx]
            choice = pick_templates(cfg.template, len(idx), rng)
            loss, parts, view = alignment_loss(enc, model.projector, xb, yb, num_classes, cfg, choice, direct)
            if cfg.schedule == "PC,D":
                ce = cross_entropy(model.head(_x_e(view, xb, yb, cfg.k)), yb)
                loss = loss + ce
                parts["cls"] = ce.item()
            elif cfg.schedule == "PD,C":
                target = disentangle_target(xb, view.t_x.data, class_rows(view, yb), cfg.k)
                pred = add(Tensor(xb), model.disentangler(xb))
                feat = feature_loss(pred, target, cfg.feat) * (cfg.feat_weight / 2.0)
                loss = loss + feat
                parts["feat"] = feat.item()
            loss.backward()
            step(model.projector.parameters(), proj_opt)
            if joint is not None:
                step(joint.parameters(), head_opt)
            for key, val in parts.items():
                sums[key] = sums.get(key, 0.0) + val
            sums["total"] = sums.get("total", 0.0) + loss.item()
            count += 1
        trace.add(sums, count)
    model.stage_a_done = True
    model.history["align"] = trace.epochs
    return trace


def disentangle_targets(
    enc: FrozenLanguageEncoder,
    x: np.ndarray,
    y: np.ndarray,
    num_classes: int,
    cfg: TrainConfig,
    projector,
    direct: bool = False,
) -> np.ndarray:
    """Cached stage-B regression targets, computed once from the frozen projector."""
    rng = np.random.default_rng([cfg.seed, _TARGETS])
    choice = pick_templates(cfg.template, len(y), rng)
    out = np.empty_like(x)
    for start in range(0, len(y), 256):
        sl = slice(start, start + 256)
        view = text_view(enc, projector, x[sl], num_classes, cfg.template, choice[sl], direct)
        out[sl] = disentangle_target(x[sl], view.t_x.data, class_rows(view, y[sl]), cfg.k)
    return out


def _priors(y: np.ndarray, num_classes: int) -> np.ndarray:
    counts = np.bincount(y, minlength=num_classes).astype(np.float64)
    counts = np.maximum(counts, 1.0)
    return counts / counts.sum()


def train_stage_disentangle(
    x: np.ndarray,
    y: np.ndarray,
    x_e: np.ndarray,
    num_classes: int,
    cfg: TrainConfig,
    model: WidinModel,
    train_disentangler: bool = True,
    train_classifier: bool = True,
) -> Trace:
    """Fit ``F_D`` on ``L_feat`` and ``F_C`` on the targets ``x_e``, decoupled.

    ``F_C`` never sees ``x + F_D(x)`` during training.  With
    ``cfg.margin_scale > 0`` the classifier loss adds log-prior margins.
    """
    if not model.stage_a_done:
        raise StageError("stage B needs a trained projector (run stage A first)")
    params: list[Tensor] = []
    if train_disentangler:
        params += model.disentangler.parameters()
    if train_classifier:
        params += model.classifier.parameters()
    opt = OptimState.adamw(cfg.lr_disentangle, cfg.weight_decay)
    priors = _priors(y, num_classes)
    trace = Trace()
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, _STAGE_B, epoch])
        sums: dict[str, float] = {}
        count = 0
        for idx in batches(len(y), cfg.batch, rng):
            xb, yb, tb = x[idx], y[idx], x_e[idx]
            loss = None
            if train_disentangler:
                pred = add(Tensor(xb), model.disentangler(xb))
                feat = feature_loss(pred, tb, cfg.feat) * (cfg.feat_weight / 2.0)
                sums["feat"] = sums.get("feat", 0.0) + feat.item()
                loss = feat
            if train_classifier:
                logits = model.head(tb)
                if cfg.margin_scale > 0:
                    cls = logit_adjusted_loss(logits, yb, priors, cfg.margin_scale)
                else:
                    cls = cross_entropy(logits, yb)
                sums["cls"] = sums.get("cls", 0.0) + cls.item()
                loss = cls if loss is None else loss + cls
            loss.backward()
            step(params, opt)
            count += 1
        trace.add(sums, count)
    model.stage_b_done = True
    model.history["disentangle"] = trace.epochs
    return trace


def fit_widin(
    enc: FrozenLanguageEncoder,
    x: np.ndarray,
    y: np.ndarray,
    num_classes: int,
    cfg: TrainConfig,
    direct: bool = False,
    model: WidinModel | None = None,
) -> WidinModel:
    """Run the configured schedule end to end on joint-space embeddings ``x``."""
    cfg.validate()
    if model is None:
        model = WidinModel.init(x.shape[1], num_classes, np.random.default_rng([cfg.seed, _INIT]))
    if model.feature_mean is None:
        model.set_feature_stats(x)
    train_stage_alignment(enc, x, y, num_classes, cfg, model, direct)
    x_e = disentangle_targets(enc, x, y, num_classes, cfg, model.projector, direct)
    model.history["x_e"] = x_e
    if cfg.schedule == "P,DC":
        train_stage_disentangle(x, y, x_e, num_classes, cfg, model)
    elif cfg.schedule == "PC,D":
        train_stage_disentangle(x, y, x_e, num_classes, cfg, model, train_classifier=False)
    else:
        train_stage_disentangle(x, y, x_e, num_classes, cfg, model, train_disentangler=False)
    return model


def predict_invariant(disentangler: Linear, x) -> Tensor:
    """Residual disentangler output ``x + F_D(x)``."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    return add(x, disentangler(x))


def classify(model: WidinModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Labels and logits from ``F_C(S(x + F_D(x)))``; no language encoder involved.

    ``S`` is the model's fixed feature standardization.
    """
    logits = model.head(predict_invariant(model.disentangler, x)).data
    return logits.argmax(axis=1), logits


def mlp_direct_baseline(
    enc: FrozenLanguageEncoder, x: np.ndarray, y: np.ndarray, num_classes: int, cfg: TrainConfig
) -> WidinModel:
    """Same schedule, but ``t_x`` is predicted by the projector MLP directly."""
    return fit_widin(enc, x, y, num_classes, cfg, direct=True)

