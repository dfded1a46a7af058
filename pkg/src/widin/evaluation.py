"""Measurement harness: per-domain accuracy, baselines, probes, ablations, long-tail groups."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterable, Sequence

import numpy as np

from widin.autodiff import OptimState, cross_entropy, step
from widin.core.config import ALIGN_MODES, SCHEDULES, STRATEGIES, TrainConfig
from widin.core.params import MLP, Linear, WidinModel, n_params
from widin.core.training import batches, classify, fit_widin, predict_invariant
from widin.core.wording import class_rows, pick_templates, text_view
from widin.encoders import (
    TEMPLATES,
    FrozenLanguageEncoder,
    PromptTemplate,
    class_table,
    domain_word,
)
from widin.errors import DegenerateInput, NumericalError
from widin.synthworld import DatasetSplit, World, source_train, test_splits

log = logging.getLogger(__name__)

_PROBE, _EXTRACT = 0x9B, 0x9C


class EmbeddingKind(str, Enum):
    RAW = "RAW"  # x
    INVARIANT = "INVARIANT"  # x + F_D(x)
    AGNOSTIC = "AGNOSTIC"  # t_x - t_c
    WORDED = "WORDED"  # t_x


def accuracy(pred, y) -> float:
    y = np.asarray(y)
    if y.size == 0:
        raise ValueError("cannot score an empty split")
    return float(np.mean(np.asarray(pred) == y) * 100.0)


def aggregate(per_domain: Sequence[float]) -> tuple[float, float, float]:
    """``(src, tar, avg)``: domain 0, unweighted target mean, and their midpoint."""
    if len(per_domain) < 2:
        raise ValueError("need the source and at least one target domain")
    src = float(per_domain[0])
    tar = float(np.mean(per_domain[1:]))
    return src, tar, (src + tar) / 2.0


# ---------------------------------------------------------------- reports


def _emit(obj) -> str:
    if isinstance(obj, dict):
        items = sorted((str(k), v) for k, v in obj.items())
        return "{" + ", ".join(f"{json.dumps(k)}: {_emit(v)}" for k, v in items) + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_emit(v) for v in (obj.tolist() if isinstance(obj, np.ndarray) else obj)) + "]"
    if isinstance(obj, Enum):
        return json.dumps(obj.value)
    if obj is None or isinstance(obj, (bool, np.bool_, str)):
        return json.dumps(obj if not isinstance(obj, np.bool_) else bool(obj))
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        if not math.isfinite(obj):
            raise NumericalError(f"non-finite value {obj!r} in report")
        return format(float(obj), ".17g")
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def canonical_json(obj) -> str:
    """Sorted keys, 17-significant-digit floats, no NaN/Inf."""
    return _emit(obj) + "\n"


def fingerprint(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


@dataclass
class MetricsReport:
    """Everything one run measured.  ``timestamp`` is excluded from the canonical form."""

    name: str = ""
    per_domain: list[float] = field(default_factory=list)
    src: float | None = None
    tar: float | None = None
    avg: float | None = None
    probes: dict = field(default_factory=dict)
    longtail: dict = field(default_factory=dict)
    arms: list[dict] = field(default_factory=list)
    traces: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    timestamp: str = ""

    def set_domains(self, per_domain: Sequence[float]) -> MetricsReport:
        for a in per_domain:
            if not 0.0 <= a <= 100.0:
                raise ValueError(f"accuracy {a} outside [0, 100]")
        self.per_domain = [float(a) for a in per_domain]
        self.src, self.tar, self.avg = aggregate(self.per_domain)
        return self

    def to_dict(self, canonical: bool = True) -> dict:
        out = {
            "name": self.name,
            "per_domain": self.per_domain,
            "src": self.src,
            "tar": self.tar,
            "avg": self.avg,
            "probes": self.probes,
            "longtail": self.longtail,
            "arms": self.arms,
            "traces": self.traces,
            "extra": self.extra,
            "config": self.config,
            "fingerprint": fingerprint(self.config),
        }
        if not canonical:
            out["timestamp"] = self.timestamp
        return out

    def to_json(self, canonical: bool = True) -> str:
        return canonical_json(self.to_dict(canonical))

    def table(self) -> str:
        """Aligned plain-text summary."""
        lines = []
        if self.per_domain:
            head = ["domain"] + [f"D{g}" for g in range(len(self.per_domain))] + ["Src", "Tar", "Avg"]
            vals = [self.name or "model"] + [f"{a:.2f}" for a in self.per_domain]
            vals += [f"{self.src:.2f}", f"{self.tar:.2f}", f"{self.avg:.2f}"]
            lines += _align([head, vals])
        if self.arms:
            rows = [["arm", "Src", "Tar", "Avg"]]
            rows += [[str(a["arm"]), f"{a['src']:.2f}", f"{a['tar']:.2f}", f"{a['avg']:.2f}"] for a in self.arms]
            lines += [""] + _align(rows)
        if self.probes:
            rows = [["probe", "value"]] + [[k, _fmt(v)] for k, v in sorted(self.probes.items())]
            lines += [""] + _align(rows)
        if self.longtail:
            rows = [["longtail", "value"]] + [[k, _fmt(v)] for k, v in sorted(self.longtail.items())]
            lines += [""] + _align(rows)
        return "\n".join(lines)

    def csv(self) -> str:
        """One row per (arm, domain) for external plotting."""
        buf = io.StringIO()
        buf.write("arm,domain,accuracy\n")
        for g, a in enumerate(self.per_domain):
            buf.write(f"{self.name or 'model'},{g},{a!r}\n")
        for arm in self.arms:
            for g, a in enumerate(arm["per_domain"]):
                buf.write(f"{arm['arm']},{g},{float(a)!r}\n")
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.2f}"
    if isinstance(v, dict):
        return " ".join(f"{k}={_fmt(x)}" for k, x in sorted(v.items()))
    return str(v)


def _align(rows: list[list[str]]) -> list[str]:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in rows]


# ---------------------------------------------------------------- evaluation


def widin_predictor(model: WidinModel) -> Callable[[np.ndarray], np.ndarray]:
    return lambda x: classify(model, x)[0]


def evaluate_per_domain(predict: Callable[[np.ndarray], np.ndarray], splits: Sequence[DatasetSplit]) -> MetricsReport:
    """Score ``predict`` on every test split (ordered by domain; the model never sees domain ids)."""
    per = []
    for split in splits:
        if len(split) == 0:
            raise ValueError(f"split {split.role!r} is empty")
        per.append(accuracy(predict(split.x), split.y))
    return MetricsReport().set_domains(per)


def zero_shot_table(enc: FrozenLanguageEncoder, num_classes: int, template="image", domain: int | None = None):
    """Class-text table for zero-shot scoring; ``domain`` prepends that domain's word."""
    if isinstance(template, str) and template == "aggregated":
        tabs = [zero_shot_table(enc, num_classes, name, domain) for name in ("image", "photo", "scene")]
        return np.mean(tabs, axis=0)
    tpl = template if isinstance(template, PromptTemplate) else TEMPLATES[template]
    if domain is not None:
        tpl = tpl.with_prefix(domain_word(domain))
    return class_table(enc, tpl, num_classes)


def zero_shot_eval(
    splits: Sequence[DatasetSplit],
    enc: FrozenLanguageEncoder,
    num_classes: int,
    template="image",
    star: bool = False,
    embed: Callable[[np.ndarray], np.ndarray] | None = None,
) -> MetricsReport:
    """``argmax_c x . t_c`` per domain.  ``star`` uses a domain-worded prompt per split."""
    per = []
    for split in splits:
        g = int(split.domain[0]) if star else None
        table = zero_shot_table(enc, num_classes, template, g)
        x = split.x if embed is None else embed(split.x)
        per.append(accuracy((x @ table.T).argmax(axis=1), split.y))
    return MetricsReport(name="zero-shot*" if star else "zero-shot").set_domains(per)


@dataclass
class Probe:
    """A trained probe on standardized features."""

    net: Linear | MLP
    mean: np.ndarray
    std: np.ndarray

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.net((np.asarray(x) - self.mean) / self.std).data

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.logits(x).argmax(axis=1)


def train_probe(x: np.ndarray, y: np.ndarray, num_labels: int, cfg: TrainConfig, hidden: bool = False, tag: int = 0) -> Probe:
    """Linear (or two-layer) probe with AdamW at ``cfg.lr_probe`` for ``cfg.probe_epochs`` epochs.

    Features are z-scored with the training statistics so that embedding
    kinds of different scale are compared on equal footing.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("cannot train a probe on an empty set")
    mean = x.mean(axis=0, keepdims=True)
    std = x.std(axis=0, keepdims=True)
    std = np.where(std > 1e-12, std, 1.0)
    z = (x - mean) / std
    rng = np.random.default_rng([cfg.seed, _PROBE, tag])
    d = x.shape[1]
    net = MLP.init(d, d, num_labels, rng) if hidden else Linear.init(d, num_labels, rng)
    opt = OptimState.adamw(cfg.lr_probe, cfg.weight_decay)
    for epoch in range(cfg.probe_epochs):
        for idx in batches(len(y), cfg.batch, np.random.default_rng([cfg.seed, _PROBE, tag, epoch])):
            loss = cross_entropy(net(z[idx]), y[idx])
            loss.backward()
            step(net.parameters(), opt)
    return Probe(net, mean, std)


def probe_baseline(train: DatasetSplit, tests: Sequence[DatasetSplit], num_classes: int, cfg: TrainConfig, kind: str = "linear") -> MetricsReport:
    """``Linear Clf.`` or ``MLP Clf.``: cross-entropy only, trained on the source split."""
    if kind not in ("linear", "mlp"):
        raise ValueError("probe kind must be 'linear' or 'mlp'")
    probe = train_probe(train.x, train.y, num_classes, cfg, hidden=kind == "mlp", tag=1 if kind == "linear" else 2)
    report = evaluate_per_domain(probe.predict, tests)
    report.name = f"{kind}-probe"
    report.extra["params"] = n_params(probe.net)
    return report


def extract(
    kind: EmbeddingKind,
    model: WidinModel,
    enc: FrozenLanguageEncoder,
    x: np.ndarray,
    y: np.ndarray,
    num_classes: int,
    cfg: TrainConfig,
) -> np.ndarray:
    """Embeddings of one kind.  ``AGNOSTIC`` pairs ``t_x`` with the true label's ``t_c``."""
    kind = EmbeddingKind(kind)
    if kind is EmbeddingKind.RAW:
        return np.array(x, dtype=np.float64)
    if kind is EmbeddingKind.INVARIANT:
        return predict_invariant(model.disentangler, x).data
    choice = pick_templates(cfg.template, len(x), np.random.default_rng([cfg.seed, _EXTRACT]))
    view = text_view(enc, model.projector, x, num_classes, cfg.template, choice)
    if kind is EmbeddingKind.WORDED:
        return view.t_x.data.copy()
    return view.t_x.data - class_rows(view, np.asarray(y))


def worded_zero_shot(
    model: WidinModel, enc: FrozenLanguageEncoder, splits: Sequence[DatasetSplit], num_classes: int, cfg: TrainConfig
) -> MetricsReport:
    """Nearest class text for the worded embedding ``t_x`` (no probe, no temperature).

    Each row is scored against the class table of the template that worded it.
    """
    per = []
    for split in splits:
        choice = pick_templates(cfg.template, len(split), np.random.default_rng([cfg.seed, _EXTRACT]))
        view = text_view(enc, model.projector, split.x, num_classes, cfg.template, choice)
        pred = np.empty(len(split), dtype=np.int64)
        for idx, table in view.row_tables:
            pred[idx] = (view.t_x.data[idx] @ table.T).argmax(axis=1)
        per.append(accuracy(pred, split.y))
    return MetricsReport(name="worded-zero-shot").set_domains(per)


def domain_probe(
    kind: EmbeddingKind,
    model: WidinModel,
    enc: FrozenLanguageEncoder,
    splits: Sequence[DatasetSplit],
    num_classes: int,
    cfg: TrainConfig,
) -> float:
    """Predict the domain id from one embedding kind.

    Samples from every domain are pooled; even indices within each split train
    a fresh linear probe, odd indices score it.
    """
    domains = {int(s.domain[0]) for s in splits if len(s)}
    if len(domains) < 2:
        raise ValueError("a domain probe needs at least two domains")
    tr_x, tr_y, te_x, te_y = [], [], [], []
    for s in splits:
        e = extract(kind, model, enc, s.x, s.y, num_classes, cfg)
        tr_x.append(e[0::2])
        tr_y.append(s.domain[0::2])
        te_x.append(e[1::2])
        te_y.append(s.domain[1::2])
    probe = train_probe(np.concatenate(tr_x), np.concatenate(tr_y), max(domains) + 1, cfg, tag=10)
    return accuracy(probe.predict(np.concatenate(te_x)), np.concatenate(te_y))


def kind_generalization(
    kind: EmbeddingKind,
    model: WidinModel,
    enc: FrozenLanguageEncoder,
    train: DatasetSplit,
    tests: Sequence[DatasetSplit],
    num_classes: int,
    cfg: TrainConfig,
) -> MetricsReport:
    """Class probe trained on source embeddings of one kind, scored on every domain."""
    ex = lambda s: extract(kind, model, enc, s.x, s.y, num_classes, cfg)  # noqa: E731
    probe = train_probe(ex(train), train.y, num_classes, cfg, tag=20)
    report = MetricsReport(name=EmbeddingKind(kind).value)
    return report.set_domains([accuracy(probe.predict(ex(s)), s.y) for s in tests])


def embedding_table(
    model: WidinModel,
    enc: FrozenLanguageEncoder,
    train: DatasetSplit,
    tests: Sequence[DatasetSplit],
    num_classes: int,
    cfg: TrainConfig,
    kinds: Iterable[EmbeddingKind] = tuple(EmbeddingKind),
) -> dict:
    """Domain-prediction and generalization accuracy per embedding kind, from one trained model."""
    out = {}
    for kind in kinds:
        gen = kind_generalization(kind, model, enc, train, tests, num_classes, cfg)
        out[EmbeddingKind(kind).value] = {
            "domain_acc": domain_probe(kind, model, enc, tests, num_classes, cfg),
            "src": gen.src,
            "tar": gen.tar,
            "avg": gen.avg,
        }
    return out


def alignment_quality(
    enc: FrozenLanguageEncoder,
    model: WidinModel,
    x: np.ndarray,
    y: np.ndarray,
    num_classes: int,
    cfg: TrainConfig,
    direct: bool = False,
) -> dict:
    """Within-batch ``t_x <-> x`` retrieval and ``t_x`` vs class-table top-1, in percent.

    Batches are consecutive blocks of a seeded shuffle; retrieval counts both
    directions (image -> text and text -> image).
    """
    perm = np.random.default_rng([cfg.seed, _EXTRACT, 1]).permutation(len(y))
    x, y = x[perm], y[perm]
    choice = pick_templates(cfg.template, len(y), np.random.default_rng([cfg.seed, _EXTRACT]))
    view = text_view(enc, model.projector, x, num_classes, cfg.template, choice, direct)
    tx = view.t_x.data
    hits, total = 0, 0
    for start in range(0, len(y), cfg.batch):
        S = x[start : start + cfg.batch] @ tx[start : start + cfg.batch].T
        n = len(S)
        hits += int(np.sum(S.argmax(axis=1) == np.arange(n)) + np.sum(S.argmax(axis=0) == np.arange(n)))
        total += 2 * n
    top1 = 0
    for idx, table in view.row_tables:
        top1 += int(np.sum((tx[idx] @ table.T).argmax(axis=1) == y[idx]))
    return {"retrieval": 100.0 * hits / total, "class_top1": 100.0 * top1 / len(y)}


# ---------------------------------------------------------------- ablations


@dataclass
class Experiment:
    """One seeded world's data, shared by every arm of an ablation."""

    enc: FrozenLanguageEncoder
    train: DatasetSplit
    tests: list[DatasetSplit]
    num_classes: int

    @classmethod
    def from_world(cls, world: World, n_train=50, n_test: int = 50) -> Experiment:
        return cls(world.encoder, source_train(world, n_train), test_splits(world, n_test), world.spec.num_classes)


def run_widin(exp: Experiment, cfg: TrainConfig, direct: bool = False) -> tuple[WidinModel, MetricsReport]:
    model = fit_widin(exp.enc, exp.train.x, exp.train.y, exp.num_classes, cfg, direct=direct)
    report = evaluate_per_domain(widin_predictor(model), exp.tests)
    report.name = "widin-direct" if direct else "widin"
    report.config = cfg.as_dict()
    report.traces = {k: v for k, v in model.history.items() if k != "x_e"}
    return model, report


def _arm(name: str, report: MetricsReport, cfg: TrainConfig) -> dict:
    return {
        "arm": name,
        "per_domain": report.per_domain,
        "src": report.src,
        "tar": report.tar,
        "avg": report.avg,
        "config": cfg.as_dict(),
        "fingerprint": fingerprint(cfg.as_dict()),
    }


def run_arms(exp: Experiment, cfg: TrainConfig, key: str, values: Iterable, name: str) -> MetricsReport:
    """One full WIDIn run per value of ``key``; everything else is held fixed."""
    report = MetricsReport(name=name, config=cfg.as_dict())
    for value in values:
        arm_cfg = replace(cfg, **{key: value})
        arm_cfg.validate()
        _, r = run_widin(exp, arm_cfg)
        report.arms.append(_arm(str(value), r, arm_cfg))
        log.info("%s %s=%s src=%.2f tar=%.2f", name, key, value, r.src, r.tar)
    return report


def run_prompt_ablation(exp: Experiment, cfg: TrainConfig, strategies: Sequence[str] = STRATEGIES) -> MetricsReport:
    unknown = [s for s in strategies if s not in STRATEGIES]
    if unknown:
        raise ValueError(f"unknown prompt strategies {unknown}")
    return run_arms(exp, cfg, "template", strategies, "prompt-ablation")


def run_alignment_ablation(
    exp: Experiment, cfg: TrainConfig, modes: Sequence[str] = ALIGN_MODES, include_direct: bool = False
) -> MetricsReport:
    unknown = [m for m in modes if m not in ALIGN_MODES]
    if unknown:
        raise ValueError(f"unknown alignment modes {unknown}")
    report = run_arms(exp, cfg, "align", modes, "alignment-ablation")
    if include_direct:
        _, r = run_widin(exp, cfg, direct=True)
        report.arms.append(_arm("MLP-direct", r, cfg))
    return report


def run_schedule_ablation(exp: Experiment, cfg: TrainConfig, schedules: Sequence[str] = SCHEDULES) -> MetricsReport:
    return run_arms(exp, cfg, "schedule", schedules, "schedule-ablation")


def run_k_sweep(exp: Experiment, cfg: TrainConfig, ks: Sequence[float] = (0.5, 1.0, 2.0, 3.0, 20.0)) -> MetricsReport:
    return run_arms(exp, cfg, "k", [float(k) for k in ks], "k-sweep")


def config_diff(a: dict, b: dict) -> list[str]:
    return sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))


# ---------------------------------------------------------------- long tail


def longtail_report(
    predict: Callable[[np.ndarray], np.ndarray],
    test: DatasetSplit,
    train_counts: Sequence[int],
    many: int = 50,
    few: int = 10,
) -> dict:
    """Accuracy of the Many (>= ``many``), Med and Few (<= ``few``) train-count groups.

    Groups come from TRAIN counts and are scored on a balanced test split.
    ``std`` is the population standard deviation over the groups present;
    empty groups are dropped and listed under ``omitted``.
    """
    counts = np.asarray(train_counts)
    if few >= many:
        raise ValueError("need few < many")
    test_counts = np.bincount(test.y, minlength=len(counts))
    if len(set(test_counts[test_counts > 0].tolist())) > 1:
        raise DegenerateInput("long-tail evaluation needs a balanced test split")
    groups = {
        "Many": np.flatnonzero(counts >= many),
        "Med": np.flatnonzero((counts > few) & (counts < many)),
        "Few": np.flatnonzero(counts <= few),
    }
    pred = predict(test.x)
    out: dict = {"omitted": []}
    accs = []
    for name, classes in groups.items():
        mask = np.isin(test.y, classes)
        if not mask.any():
            out["omitted"].append(name)
            log.warning("long-tail group %s is empty", name)
            continue
        out[name] = accuracy(pred[mask], test.y[mask])
        accs.append(out[name])
    out["std"] = float(np.std(accs)) if accs else 0.0
    out["overall"] = accuracy(pred, test.y)
    return out
