"""Image wording: visual embedding -> slot token -> frozen language encoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from widin.autodiff import Tensor, add, concat_rows, l2_normalize, scale, take_rows
from widin.core.params import MLP
from widin.encoders import (
    BARE,
    TEMPLATES,
    FrozenLanguageEncoder,
    PromptTemplate,
    class_table,
    encode_batch,
    tokenize,
)
from widin.errors import ShapeError

TEMPLATE_ORDER = ("image", "photo", "scene")


def word_image(projector: MLP, x) -> Tensor:
    """Project visual rows to slot token embeddings (left unnormalized)."""
    return projector(x)


def fine_grained_embedding(enc: FrozenLanguageEncoder, projector: MLP, x, template: PromptTemplate) -> Tensor:
    """``t_x`` for every row of ``x``: encode the template with the worded image in its slot."""
    seq = tokenize(enc.vocab, template.slot_text())
    if seq.slot_position is None:
        raise ShapeError(f"template {template.name!r} has no slot")
    return encode_batch(enc, seq, word_image(projector, x))


@dataclass
class TextView:
    """Worded and class-text embeddings for one batch under a prompt strategy.

    ``t_x`` is tracked (one row per sample, unit norm); ``row_tables`` pairs row
    indices with the class table their template uses, so the class-level loss
    can mix templates within a batch.
    """

    t_x: Tensor
    row_tables: list[tuple[np.ndarray, np.ndarray]]  # (row indices, (C, d) table)


def _tables(enc: FrozenLanguageEncoder, num_classes: int) -> dict[str, np.ndarray]:
    key = ("__tables__", num_classes)
    if key not in enc._cache:
        tabs = {name: class_table(enc, TEMPLATES[name], num_classes) for name in TEMPLATE_ORDER}
        tabs["none"] = class_table(enc, BARE, num_classes)
        tabs["aggregated"] = np.mean([tabs[n] for n in TEMPLATE_ORDER], axis=0)
        enc._cache[key] = tabs
    return enc._cache[key]


def pick_templates(strategy: str, n: int, rng: np.random.Generator | None) -> np.ndarray:
    """Per-row template index into ``TEMPLATE_ORDER`` (only meaningful for ``random``)."""
    if strategy == "random":
        if rng is None:
            raise ValueError("random prompt strategy needs an rng")
        return rng.integers(0, len(TEMPLATE_ORDER), size=n)
    return np.zeros(n, dtype=np.int64)


def text_view(
    enc: FrozenLanguageEncoder,
    projector,
    x,
    num_classes: int,
    strategy: str = "fixed",
    choice: np.ndarray | None = None,
    direct: bool = False,
) -> TextView:
    """Compute ``t_x`` and matching class tables for a batch.

    ``direct`` swaps the language encoder for the projector itself (the MLP
    direct-prediction baseline): ``t_x = l2_normalize(projector(x))``.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    n = x.shape[0]
    tabs = _tables(enc, num_classes)
    rows = np.arange(n)
    if direct:
        return TextView(l2_normalize(projector(x)), [(rows, tabs["image"])])
    if strategy == "fixed":
        return TextView(fine_grained_embedding(enc, projector, x, TEMPLATES["image"]), [(rows, tabs["image"])])
    if strategy == "misaligned":
        return TextView(fine_grained_embedding(enc, projector, x, TEMPLATES["photo"]), [(rows, tabs["image"])])
    if strategy == "none":
        return TextView(fine_grained_embedding(enc, projector, x, BARE), [(rows, tabs["none"])])
    if strategy == "aggregated":
        parts = [fine_grained_embedding(enc, projector, x, TEMPLATES[name]) for name in TEMPLATE_ORDER]
        mean = scale(add(add(parts[0], parts[1]), parts[2]), 1.0 / 3.0)
        return TextView(mean, [(rows, tabs["aggregated"])])
    if strategy == "random":
        if choice is None or len(choice) != n:
            raise ValueError("random strategy needs a per-row template choice")
        pieces, order, groups = [], [], []
        for ti, name in enumerate(TEMPLATE_ORDER):
            idx = np.flatnonzero(choice == ti)
            if idx.size == 0:
                continue
            pieces.append(fine_grained_embedding(enc, projector, take_rows(x, idx), TEMPLATES[name]))
            order.append(idx)
            groups.append((idx, tabs[name]))
        stacked = concat_rows(pieces)
        inverse = np.empty(n, dtype=np.int64)
        inverse[np.concatenate(order)] = np.arange(n)
        return TextView(take_rows(stacked, inverse), groups)
    raise ValueError(f"unknown prompt strategy {strategy!r}")


def class_rows(view: TextView, labels: np.ndarray) -> np.ndarray:
    """``t_c`` of each row's label under that row's template (the partner of ``t_x`` when forming the disentanglement target)."""
    d = view.t_x.shape[1]
    out = np.empty((len(labels), d))
    for idx, table in view.row_tables:
        out[idx] = table[labels[idx]]
    return out
