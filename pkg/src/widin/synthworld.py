"""Synthetic joint vision-language world with known class and domain factors.

Each visual embedding is built additively and then projected to the sphere::

    x = l2_normalize(A t_c(y) + lambda_dom * r * B f_g + eps)

``t_c`` comes from the frozen language encoder, ``A`` is a near-identity map,
``B f_g`` is an offset shared by every class of domain ``g``, and ``r`` is the
RMS spread of the class prototypes around their mean.  Expressing the domain
offset and the noise in units of ``r`` keeps ``lambda_dom`` and ``sigma_eps``
comparable across encoder seeds, whose class embeddings can be clustered very
differently.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from widin.encoders import (
    DEFAULT_TEMPLATE,
    FrozenLanguageEncoder,
    Vocabulary,
    build_encoder,
    class_table,
)
from widin.errors import ConfigError, ShapeError

_SPLIT_TAGS = {"train": 0, "test": 1}


@dataclass(frozen=True)
class WorldSpec:
    num_classes: int = 8
    num_targets: int = 3
    d: int = 32
    sigma_A: float = 0.1
    d_dom: int = 4
    lambda_dom: float = 0.6
    sigma_eps: float = 0.05
    d_v: int = 48
    rho: float = 0.0
    seed: int = 1

    @property
    def num_domains(self) -> int:
        return self.num_targets + 1

    def validate(self) -> None:
        """Raise :class:`ConfigError` naming the first offending field."""
        if self.num_classes < 2:
            raise ConfigError("num_classes", "num_classes must be >= 2")
        if self.num_targets < 1:
            raise ConfigError("num_targets", "num_targets must be >= 1")
        if self.d < 8 or self.d % 2:
            raise ConfigError("d", "d must be even and >= 8")
        if self.d_v < self.d:
            raise ConfigError("d_v", "d_v must be >= d so the foreign map has full column rank")
        for name in ("lambda_dom", "sigma_eps", "sigma_A", "rho"):
            if getattr(self, name) < 0:
                raise ConfigError(name, f"{name} must be non-negative")
        if self.d_dom < 1:
            raise ConfigError("d_dom", "d_dom must be >= 1")

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class World:
    spec: WorldSpec
    encoder: FrozenLanguageEncoder
    class_text: np.ndarray  # (C, d) t_c under the default template
    A: np.ndarray
    B: np.ndarray
    domain_factors: np.ndarray  # (num_domains, d_dom)
    M: np.ndarray  # (d_v, d)
    spread: float
    world_id: str = field(default="")

    @property
    def vocab(self) -> Vocabulary:
        return self.encoder.vocab

    def class_part(self, y: int) -> np.ndarray:
        return self.A @ self.class_text[y]

    def domain_part(self, g: int) -> np.ndarray:
        return self.spec.lambda_dom * self.spread * (self.B @ self.domain_factors[g])


@dataclass
class DatasetSplit:
    """Samples of one split.  Oracle parts are kept for tests, never fed to a model."""

    role: str
    x: np.ndarray
    y: np.ndarray
    domain: np.ndarray
    uid: np.ndarray  # (n, 4): split tag, domain, class, index
    class_part: np.ndarray
    domain_part: np.ndarray
    world_id: str

    def __len__(self) -> int:
        return len(self.y)

    def class_counts(self, num_classes: int) -> np.ndarray:
        return np.bincount(self.y, minlength=num_classes)

    def subset(self, mask) -> DatasetSplit:
        return DatasetSplit(
            self.role,
            self.x[mask],
            self.y[mask],
            self.domain[mask],
            self.uid[mask],
            self.class_part[mask],
            self.domain_part[mask],
            self.world_id,
        )


def generate_world(spec: WorldSpec) -> World:
    spec.validate()
    d, C = spec.d, spec.num_classes
    vocab = Vocabulary.build(C, spec.num_domains)
    enc = build_encoder(d, spec.seed, vocab)
    T = class_table(enc, DEFAULT_TEMPLATE, C)
    spread = float(np.sqrt(((T - T.mean(axis=0)) ** 2).sum(axis=1).mean()))
    rng = np.random.default_rng([spec.seed, 0x3091D])
    A = np.eye(d) + spec.sigma_A * rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d))
    B = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, spec.d_dom))
    F = rng.normal(0.0, 1.0 / math.sqrt(spec.d_dom), size=(spec.num_domains, spec.d_dom))
    M = rng.normal(0.0, 1.0 / math.sqrt(d), size=(spec.d_v, d))
    if np.linalg.matrix_rank(M) < d:
        raise ValueError("foreign mixing map is rank deficient")
    world = World(spec, enc, T, A, B, F, M, spread)
    world.world_id = spec.fingerprint() + enc.checksum()[:16]
    return world


def profile_counts(num_classes: int, n_max: int, rho: float) -> np.ndarray:
    """Per-class counts ``round(n_max * exp(-rho * c / (C - 1)))``; ``rho = 0`` is balanced."""
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    if rho < 0:
        raise ValueError("rho must be non-negative")
    frac = np.arange(num_classes) / max(num_classes - 1, 1)
    counts = np.maximum(np.round(n_max * np.exp(-rho * frac)).astype(int), 1)
    # rounding can never break monotonicity, but make the contract explicit
    return np.minimum.accumulate(counts)


def longtail_counts(num_classes: int, n_max: int, n_min: int) -> np.ndarray:
    """Geometric per-class counts from ``n_max`` (class 0) down to ``n_min``."""
    if n_min < 1 or n_max < n_min:
        raise ValueError("need 1 <= n_min <= n_max")
    return profile_counts(num_classes, n_max, math.log(n_max / n_min))


def _sample_noise(spec: WorldSpec, tag: int, g: int, c: int, i: int, scale: float) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 0x5A3, tag, g, c, i])
    return rng.normal(0.0, scale, size=spec.d)


def sample_split(world: World, domain_id: int, n_per_class=50, role: str = "train") -> DatasetSplit:
    """Draw a split for one domain.

    ``n_per_class`` is an int (balanced) or a per-class sequence of counts.
    Every sample's noise is keyed by (seed, split tag, domain, class, index),
    so train and test never share a draw and call order does not matter.
    """
    spec = world.spec
    if not 0 <= domain_id < spec.num_domains:
        raise ValueError(f"domain {domain_id} outside [0, {spec.num_domains})")
    if role not in _SPLIT_TAGS:
        raise ValueError(f"role must be one of {sorted(_SPLIT_TAGS)}")
    counts = np.broadcast_to(np.asarray(n_per_class, dtype=int), (spec.num_classes,))
    if np.any(counts < 1):
        raise ValueError("n_per_class must be >= 1")
    tag = _SPLIT_TAGS[role]
    dom = world.domain_part(domain_id)
    noise_scale = spec.sigma_eps * world.spread
    xs, ys, uids, cps = [], [], [], []
    for c in range(spec.num_classes):
        cp = world.class_part(c)
        for i in range(int(counts[c])):
            raw = cp + dom + _sample_noise(spec, tag, domain_id, c, i, noise_scale)
            xs.append(raw / np.linalg.norm(raw))
            ys.append(c)
            uids.append((tag, domain_id, c, i))
            cps.append(cp)
    n = len(ys)
    return DatasetSplit(
        role=f"{role}-domain-{domain_id}",
        x=np.array(xs),
        y=np.array(ys, dtype=np.int64),
        domain=np.full(n, domain_id, dtype=np.int64),
        uid=np.array(uids, dtype=np.int64),
        class_part=np.array(cps),
        domain_part=np.tile(dom, (n, 1)),
        world_id=world.world_id,
    )


def source_train(world: World, n_per_class=50) -> DatasetSplit:
    """Source-domain training split; ``spec.rho > 0`` turns ``n_per_class`` into the head count."""
    if world.spec.rho > 0 and np.ndim(n_per_class) == 0:
        n_per_class = profile_counts(world.spec.num_classes, int(n_per_class), world.spec.rho)
    return sample_split(world, 0, n_per_class, "train")


def test_splits(world: World, n_per_class=50) -> list[DatasetSplit]:
    return [sample_split(world, g, n_per_class, "test") for g in range(world.spec.num_domains)]


def oracle_decompose(world: World, split: DatasetSplit, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Pre-normalization ``(class_part, domain_part)`` of one sample."""
    if split.world_id != world.world_id:
        raise ValueError("sample was not produced by this world")
    return split.class_part[index].copy(), split.domain_part[index].copy()


def foreign_view(world: World, x: np.ndarray) -> np.ndarray:
    """Map joint-space embeddings (rows) into the foreign vision space, ``v = M x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != world.spec.d:
        raise ShapeError(f"expected width {world.spec.d}, got {x.shape[-1]}")
    return x @ world.M.T
