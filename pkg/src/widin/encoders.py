"""Frozen toy language encoder and the prompt machinery around it.

The encoder is a two-block pre-LN transformer with random, seeded, frozen
weights.  One token position may be a *slot*: instead of a table lookup, an
external embedding (possibly gradient-tracked) is placed there, which is how an
image gets "worded" into a prompt.
"""

from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from widin.autodiff import (
    Tensor,
    add,
    attention,
    concat_rows,
    gelu,
    l2_normalize,
    layer_norm,
    matmul,
    take_rows,
)
from widin.errors import ShapeError, UnknownToken

CLS = "<cls>"
SLOT = "<slot>"
CLASSNAME = "<classname>"
PROMPT_WORDS = ("the", "image", "photo", "of", "a", "an", "in", "scene")
MAX_LEN = 16
N_BLOCKS = 2
N_HEADS = 2


def class_word(c: int) -> str:
    return f"cname{c:02d}"


def domain_word(g: int) -> str:
    return f"dname{g:02d}"


class Vocabulary:
    """Dense word -> id map.  Unknown words fail loudly."""

    def __init__(self, words: Iterable[str]):
        self.words: tuple[str, ...] = tuple(dict.fromkeys(words))
        self._ids = {w: i for i, w in enumerate(self.words)}
        if CLS not in self._ids or SLOT not in self._ids:
            raise ValueError("vocabulary needs the CLS and SLOT specials")

    @classmethod
    def build(cls, num_classes: int, num_domains: int = 0) -> Vocabulary:
        words = [CLS, SLOT, *PROMPT_WORDS]
        words += [class_word(c) for c in range(num_classes)]
        words += [domain_word(g) for g in range(num_domains)]
        return cls(words)

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self._ids

    def id(self, word: str) -> int:
        try:
            return self._ids[word]
        except KeyError:
            raise UnknownToken(word) from None

    @property
    def slot_id(self) -> int:
        return self._ids[SLOT]


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    slot_position: int | None = None

    def __len__(self) -> int:
        return len(self.ids)


def tokenize(vocab: Vocabulary, text: str) -> TokenSequence:
    """Whitespace tokenization with CLS prepended.

    The literal word ``<slot>`` marks the injected-embedding position.
    """
    ids = [vocab.id(CLS)]
    slot = None
    for word in text.split():
        if word == SLOT:
            if slot is not None:
                raise ShapeError("a token sequence holds at most one slot")
            slot = len(ids)
        ids.append(vocab.id(word))
    if len(ids) > MAX_LEN:
        raise ShapeError(f"sequence length {len(ids)} exceeds {MAX_LEN}")
    return TokenSequence(tuple(ids), slot)


@dataclass(frozen=True)
class PromptTemplate:
    """A word pattern holding exactly one placeholder (filled by a slot or a class word)."""

    name: str
    words: tuple[str, ...]

    def __post_init__(self):
        if self.words.count(CLASSNAME) != 1:
            raise ValueError(f"template {self.name!r} needs exactly one placeholder")

    def fill(self, word: str) -> str:
        return " ".join(word if w == CLASSNAME else w for w in self.words)

    def slot_text(self) -> str:
        return self.fill(SLOT)

    def with_prefix(self, word: str) -> PromptTemplate:
        return PromptTemplate(f"{word}+{self.name}", (word, *self.words))


TEMPLATES: dict[str, PromptTemplate] = {
    "image": PromptTemplate("image", ("the", "image", "of", "a", CLASSNAME)),
    "photo": PromptTemplate("photo", ("the", "photo", "of", "a", CLASSNAME)),
    "scene": PromptTemplate("scene", (CLASSNAME, "in", "the", "scene")),
}
# bare placeholder, used by the "none" prompt strategy: [CLS, <V>]
BARE = PromptTemplate("none", (CLASSNAME,))
DEFAULT_TEMPLATE = TEMPLATES["image"]


def _word_row(seed: int, word: str, d: int) -> np.ndarray:
    # keyed by the word itself so a token's embedding does not depend on vocabulary size
    rng = np.random.default_rng([seed, 0x70C, zlib.crc32(word.encode())])
    return rng.normal(0.0, 1.0 / np.sqrt(d), size=d)


@dataclass
class FrozenLanguageEncoder:
    d: int
    seed: int
    vocab: Vocabulary
    weights: dict[str, np.ndarray]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.d}:{self.seed}:{','.join(self.vocab.words)}".encode())
        for name in sorted(self.weights):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.weights[name]).tobytes())
        return h.hexdigest()

    def token_rows(self, ids: Sequence[int]) -> np.ndarray:
        return self.weights["tok"][list(ids)]


def build_encoder(d: int, seed: int, vocab: Vocabulary | None = None) -> FrozenLanguageEncoder:
    """Draw a frozen encoder; bitwise deterministic in ``(d, seed, vocab)``."""
    if not isinstance(d, (int, np.integer)) or d < 8 or d % N_HEADS:
        raise ValueError(f"encoder width must be even and >= 8, got {d}")
    if vocab is None:
        vocab = Vocabulary.build(num_classes=16, num_domains=8)
    std = 1.0 / np.sqrt(d)
    rng = np.random.default_rng([seed, 0xE7C])
    w: dict[str, np.ndarray] = {
        "tok": np.stack([_word_row(seed, word, d) for word in vocab.words]),
        "pos": rng.normal(0.0, std, size=(MAX_LEN, d)),
    }
    for b in range(N_BLOCKS):
        w[f"b{b}.ln1_g"] = np.ones((1, d))
        w[f"b{b}.ln1_b"] = np.zeros((1, d))
        for name in ("wq", "wk", "wv", "wo"):
            w[f"b{b}.{name}"] = rng.normal(0.0, std, size=(d, d))
        w[f"b{b}.ln2_g"] = np.ones((1, d))
        w[f"b{b}.ln2_b"] = np.zeros((1, d))
        w[f"b{b}.w1"] = rng.normal(0.0, std, size=(d, 2 * d))
        w[f"b{b}.b1"] = np.zeros((1, 2 * d))
        w[f"b{b}.w2"] = rng.normal(0.0, std, size=(2 * d, d))
        w[f"b{b}.b2"] = np.zeros((1, d))
    w["lnf_g"] = np.ones((1, d))
    w["lnf_b"] = np.zeros((1, d))
    w["w_out"] = rng.normal(0.0, std, size=(d, d))
    for arr in w.values():
        arr.setflags(write=False)
    return FrozenLanguageEncoder(d=d, seed=seed, vocab=vocab, weights=w)


def encode_batch(enc: FrozenLanguageEncoder, seq: TokenSequence, slots: Tensor | None = None) -> Tensor:
    """Encode ``n`` copies of ``seq`` that differ only in their slot embedding.

    ``slots`` is ``(n, d)``; without a slot the result is a single row.  Returns
    the l2-normalized, projected CLS outputs, one row per copy.
    """
    w = enc.weights
    L = len(seq)
    if L > MAX_LEN:
        raise ShapeError(f"sequence length {L} exceeds {MAX_LEN}")
    base = enc.token_rows(seq.ids) + w["pos"][:L]
    if seq.slot_position is None:
        if slots is not None:
            raise ShapeError("slot embedding given for a sequence without a slot")
        x = Tensor(base)
        n = 1
    else:
        if slots is None:
            raise ShapeError("sequence has a slot but no slot embedding was given")
        if slots.shape[1] != enc.d:
            raise ShapeError(f"slot width {slots.shape[1]} != encoder width {enc.d}")
        n = slots.shape[0]
        s = seq.slot_position
        slot_rows = add(slots, Tensor(w["pos"][s : s + 1]))
        index = np.tile(np.arange(L), n)
        index[s::L] = L + np.arange(n)
        x = take_rows(concat_rows([Tensor(base), slot_rows]), index)
    for b in range(N_BLOCKS):
        h = layer_norm(x, Tensor(w[f"b{b}.ln1_g"]), Tensor(w[f"b{b}.ln1_b"]))
        q = matmul(h, Tensor(w[f"b{b}.wq"]))
        k = matmul(h, Tensor(w[f"b{b}.wk"]))
        v = matmul(h, Tensor(w[f"b{b}.wv"]))
        x = add(x, matmul(attention(q, k, v, L, N_HEADS), Tensor(w[f"b{b}.wo"])))
        h = layer_norm(x, Tensor(w[f"b{b}.ln2_g"]), Tensor(w[f"b{b}.ln2_b"]))
        h = gelu(add(matmul(h, Tensor(w[f"b{b}.w1"])), Tensor(w[f"b{b}.b1"])))
        x = add(x, add(matmul(h, Tensor(w[f"b{b}.w2"])), Tensor(w[f"b{b}.b2"])))
    x = layer_norm(x, Tensor(w["lnf_g"]), Tensor(w["lnf_b"]))
    cls_rows = take_rows(x, np.arange(n) * L)
    return l2_normalize(matmul(cls_rows, Tensor(w["w_out"])))


def encode_tokens(enc: FrozenLanguageEncoder, seq: TokenSequence, slot_embedding: Tensor | None = None) -> Tensor:
    if slot_embedding is not None and slot_embedding.shape[0] != 1:
        raise ShapeError("encode_tokens takes a single slot row; use encode_batch for more")
    return encode_batch(enc, seq, slot_embedding)


def class_text_embedding(
    enc: FrozenLanguageEncoder, vocab: Vocabulary, template: PromptTemplate, class_name: str
) -> np.ndarray:
    """The class-text embedding ``t_c`` of ``class_name`` under ``template`` (cached)."""
    key = (template.words, class_name)
    if key not in enc._cache:
        if class_name not in vocab:
            raise UnknownToken(class_name)
        out = encode_tokens(enc, tokenize(vocab, template.fill(class_name))).data[0]
        out.setflags(write=False)
        enc._cache[key] = out
    return enc._cache[key]


def class_table(enc: FrozenLanguageEncoder, template: PromptTemplate, num_classes: int) -> np.ndarray:
    """Stack ``t_c`` for every class into a ``(C, d)`` array."""
    return np.stack([class_text_embedding(enc, enc.vocab, template, class_word(c)) for c in range(num_classes)])
