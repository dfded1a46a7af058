"""Command-line experiment driver.

Every run is a pure function of its configuration.  The master ``seed`` (or
the ``WIDIN_SEED`` environment variable) is the world seed and the training
seed; every random stream below it is keyed by ``(seed, stream id, counter)``.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import os
import sys
from dataclasses import dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from widin.artifacts import (
    Kind,
    checkpoint_artifact,
    dataset_artifact,
    load_checkpoint,
    load_dataset,
    load_world,
    read_artifact,
    world_artifact,
    write_artifact,
)
from widin.core.bridge import apply_bridge, init_bridge, train_unimodal_bridge
from widin.core.config import TrainConfig
from widin.core.training import fit_widin
from widin.errors import ArtifactError, ConfigError, MissingArtifact, NumericalError, WidinError
from widin.evaluation import (
    EmbeddingKind,
    Experiment,
    MetricsReport,
    alignment_quality,
    embedding_table,
    evaluate_per_domain,
    longtail_report,
    probe_baseline,
    run_alignment_ablation,
    run_k_sweep,
    run_prompt_ablation,
    run_schedule_ablation,
    run_widin,
    train_probe,
    widin_predictor,
    worded_zero_shot,
    zero_shot_eval,
)
from widin.gradsuite import TOLERANCE, run_suite
from widin.synthworld import WorldSpec, foreign_view, generate_world, sample_split, source_train, test_splits

log = logging.getLogger("widin")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 50  # per class (head count under a long-tail profile)
    n_test: int = 50  # per class, every domain


@dataclass(frozen=True)
class LongtailConfig:
    num_classes: int = 10
    n_max: int = 100
    n_min: int = 2
    many: int = 50
    few: int = 10
    margin_scale: float = 1.0


@dataclass(frozen=True)
class AblationConfig:
    strategies: tuple[str, ...] = ("fixed", "random", "aggregated", "misaligned", "none")
    modes: tuple[str, ...] = ("CT", "SupCT", "None")
    schedules: tuple[str, ...] = ("P,DC", "PC,D", "PD,C")
    ks: tuple[float, ...] = (0.5, 1.0, 2.0, 3.0, 20.0)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 1
    out: str = "runs/default"
    world: WorldSpec = field(default_factory=WorldSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    longtail: LongtailConfig = field(default_factory=LongtailConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def world_spec(self) -> WorldSpec:
        return replace(self.world, seed=self.seed)

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed)

    def flat(self) -> dict:
        out = {"seed": self.seed}
        for section in _SECTIONS:
            for f in fields(getattr(self, section)):
                if f.name != "seed":
                    out[f"{section}.{f.name}"] = getattr(getattr(self, section), f.name)
        return out


_SECTIONS = ("world", "train", "data", "longtail", "ablation")


def _parse_value(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            value = float(raw)
            if not math.isfinite(value):
                raise ValueError(raw)
            return value
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(";" if "," in "".join(map(str, default)) else ",") if s.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(s) for s in items)
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_config(path=None, overrides=(), env=None) -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from a ``key=value`` file and ``--set`` overrides.

    Lines are ``section.key = value``; ``#`` starts a comment.  Unknown keys,
    unparsable values and out-of-range values raise :class:`ConfigError`.
    ``WIDIN_SEED`` in ``env`` (default: the process environment) wins over both.
    """
    env = os.environ if env is None else env
    pairs: list[tuple[str, str]] = []
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise MissingArtifact(f"missing config file {p}")
        for n, line in enumerate(p.read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}", f"expected key=value, got {line!r}")
            k, v = line.split("=", 1)
            pairs.append((k.strip(), v))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v))
    if env.get("WIDIN_SEED"):
        pairs.append(("seed", env["WIDIN_SEED"]))

    cfg = ExperimentConfig()
    defaults = cfg.flat()
    values = {}
    for key, raw in pairs:
        if key == "out":
            values[key] = raw.strip()
            continue
        if key not in defaults:
            raise ConfigError(key, "unknown configuration key")
        values[key] = _parse_value(key, raw, defaults[key])
    sections = {s: {} for s in _SECTIONS}
    top = {}
    for key, value in values.items():
        if "." in key:
            section, name = key.split(".", 1)
            sections[section][name] = value
        else:
            top[key] = value
    try:
        built = {s: replace(getattr(cfg, s), **kw) for s, kw in sections.items()}
    except TypeError as exc:  # pragma: no cover - keys were checked above
        raise ConfigError("config", str(exc)) from None
    cfg = replace(cfg, **top, **built)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.seed < 0:
        raise ConfigError("seed", "seed must be non-negative")
    try:
        cfg.train_config().validate()
    except ConfigError as exc:
        raise ConfigError(f"train.{exc.key}", str(exc).split(": ", 1)[-1]) from None
    try:
        cfg.world_spec().validate()
    except ConfigError as exc:
        raise ConfigError(f"world.{exc.key}", str(exc).split(": ", 1)[-1]) from None
    if cfg.data.n_train < 1 or cfg.data.n_test < 1:
        raise ConfigError("data.n_train", "per-class counts must be >= 1")
    lt = cfg.longtail
    if not 1 <= lt.n_min <= lt.n_max:
        raise ConfigError("longtail.n_min", "need 1 <= n_min <= n_max")
    if lt.few >= lt.many:
        raise ConfigError("longtail.few", "few threshold must be below many threshold")
    if lt.num_classes < 2:
        raise ConfigError("longtail.num_classes", "need at least two classes")
    if lt.margin_scale < 0:
        raise ConfigError("longtail.margin_scale", "margin_scale must be non-negative")


def format_defaults() -> str:
    lines = [f"{k} = {_show(v)}" for k, v in ExperimentConfig().flat().items()]
    return "\n".join(["out = runs/default", *lines]) + "\n"


def _show(v) -> str:
    if isinstance(v, tuple):
        sep = ";" if any("," in str(x) for x in v) else ","
        return sep.join(str(x) for x in v)
    return str(v)


# ---------------------------------------------------------------- run context


class Run:
    """Paths and loaders for one output directory."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = Path(cfg.out)

    def path(self, name: str) -> Path:
        return self.out / name

    def world(self):
        return load_world(read_artifact(self.path("world.widn"), Kind.WORLD))

    def splits(self, world):
        train = load_dataset(read_artifact(self.path("train.widn"), Kind.DATASET))
        tests = [
            load_dataset(read_artifact(self.path(f"test_{g}.widn"), Kind.DATASET))
            for g in range(world.spec.num_domains)
        ]
        for s in [train, *tests]:
            if s.world_id != world.world_id:
                raise ArtifactError(f"split {s.role} belongs to a different world")
        return train, tests

    def experiment(self):
        world = self.world()
        train, tests = self.splits(world)
        return world, Experiment(world.encoder, train, tests, world.spec.num_classes)

    def checkpoint(self, world, name: str = "checkpoint.widn"):
        return load_checkpoint(read_artifact(self.path(name), Kind.CHECKPOINT), world)

    def emit(self, command: str, report: MetricsReport) -> MetricsReport:
        report.name = report.name or command
        report.config = {**self.cfg.flat(), **report.config}
        report.timestamp = datetime.now(timezone.utc).isoformat()
        self.out.mkdir(parents=True, exist_ok=True)
        self.path(f"metrics_{command}.json").write_text(report.to_json(canonical=False))
        self.path(f"metrics_{command}.csv").write_text(report.csv())
        print(report.table())
        return report


# ---------------------------------------------------------------- subcommands


def cmd_defaults(run: Run) -> int:
    sys.stdout.write(format_defaults())
    return EXIT_OK


def cmd_gen_world(run: Run) -> int:
    cfg = run.cfg
    world = generate_world(cfg.world_spec())
    flat = cfg.flat()
    write_artifact(run.path("world.widn"), world_artifact(world, flat))
    train = source_train(world, cfg.data.n_train)
    tests = test_splits(world, cfg.data.n_test)
    write_artifact(run.path("train.widn"), dataset_artifact(train, flat))
    for g, split in enumerate(tests):
        write_artifact(run.path(f"test_{g}.widn"), dataset_artifact(split, flat))
    report = zero_shot_eval(tests, world.encoder, world.spec.num_classes)
    report.name = "gen-world"
    report.extra = {
        "world_id": world.world_id,
        "encoder": world.encoder.checksum(),
        "spread": world.spread,
        "train_counts": train.class_counts(world.spec.num_classes),
        "files": sorted(p.name for p in run.out.glob("*.widn")),
    }
    run.emit("gen-world", report)
    return EXIT_OK


def cmd_train(run: Run) -> int:
    world, exp = run.experiment()
    cfg = run.cfg.train_config()
    model = fit_widin(exp.enc, exp.train.x, exp.train.y, exp.num_classes, cfg)
    write_artifact(run.path("checkpoint.widn"), checkpoint_artifact(model, cfg, world, {"config": run.cfg.flat()}))
    report = evaluate_per_domain(widin_predictor(model), exp.tests)
    report.name = "train"
    report.traces = {k: v for k, v in model.history.items() if k != "x_e"}
    report.extra["alignment"] = alignment_quality(exp.enc, model, exp.tests[0].x, exp.tests[0].y, exp.num_classes, cfg)
    run.emit("train", report)
    return EXIT_OK


def cmd_eval(run: Run) -> int:
    world, exp = run.experiment()
    model, cfg = run.checkpoint(world)
    report = evaluate_per_domain(widin_predictor(model), exp.tests)
    report.name = "widin"
    for r in (
        probe_baseline(exp.train, exp.tests, exp.num_classes, cfg, "linear"),
        probe_baseline(exp.train, exp.tests, exp.num_classes, cfg, "mlp"),
        zero_shot_eval(exp.tests, exp.enc, exp.num_classes),
        zero_shot_eval(exp.tests, exp.enc, exp.num_classes, star=True),
        worded_zero_shot(model, exp.enc, exp.tests, exp.num_classes, cfg),
    ):
        report.arms.append({"arm": r.name, "per_domain": r.per_domain, "src": r.src, "tar": r.tar, "avg": r.avg})
    run.emit("eval", report)
    return EXIT_OK


def cmd_probe_domain(run: Run) -> int:
    world, exp = run.experiment()
    model, cfg = run.checkpoint(world)
    report = MetricsReport(name="probe-domain")
    report.probes = embedding_table(model, exp.enc, exp.train, exp.tests, exp.num_classes, cfg, tuple(EmbeddingKind))
    run.emit("probe-domain", report)
    return EXIT_OK


def _ablate(run: Run, command: str, runner, values, **kw) -> int:
    _, exp = run.experiment()
    report = runner(exp, run.cfg.train_config(), values, **kw)
    run.emit(command, report)
    return EXIT_OK


def cmd_ablate_prompts(run: Run) -> int:
    return _ablate(run, "ablate-prompts", run_prompt_ablation, run.cfg.ablation.strategies)


def cmd_ablate_alignment(run: Run) -> int:
    return _ablate(run, "ablate-alignment", run_alignment_ablation, run.cfg.ablation.modes, include_direct=True)


def cmd_ablate_schedule(run: Run) -> int:
    return _ablate(run, "ablate-schedule", run_schedule_ablation, run.cfg.ablation.schedules)


def cmd_sweep_k(run: Run) -> int:
    return _ablate(run, "sweep-k", run_k_sweep, run.cfg.ablation.ks)


def bridge_pipeline(world, exp: Experiment, cfg: TrainConfig):
    """Train ``W_B`` on the foreign view, then WIDIn on bridged embeddings."""
    v_train = foreign_view(world, exp.train.x)
    bridge, trace = train_unimodal_bridge(v_train, exp.train.y, world.class_text, cfg)
    bridged = Experiment(
        exp.enc,
        dataclasses.replace(exp.train, x=apply_bridge(bridge, v_train)),
        [dataclasses.replace(s, x=apply_bridge(bridge, foreign_view(world, s.x))) for s in exp.tests],
        exp.num_classes,
    )
    model, report = run_widin(bridged, cfg)
    model.bridge = bridge
    report.traces["bridge"] = trace.epochs
    return model, report, bridged


def cmd_bridge(run: Run) -> int:
    world, exp = run.experiment()
    cfg = run.cfg.train_config()
    model, report, bridged = bridge_pipeline(world, exp, cfg)
    write_artifact(run.path("checkpoint_bridge.widn"), checkpoint_artifact(model, cfg, world, {"config": run.cfg.flat()}))
    _, joint = run_widin(exp, cfg)
    random_bridge = init_bridge(world.spec.d_v, world.spec.d, np.random.default_rng([cfg.seed, 0xB7]))
    src = exp.tests[0]
    zs_trained = zero_shot_eval(bridged.tests, exp.enc, exp.num_classes)
    zs_random = zero_shot_eval(
        [dataclasses.replace(s, x=apply_bridge(random_bridge, foreign_view(world, s.x))) for s in exp.tests],
        exp.enc,
        exp.num_classes,
    )
    report.name = "bridge"
    report.arms.append({"arm": "joint-space", "per_domain": joint.per_domain, "src": joint.src, "tar": joint.tar, "avg": joint.avg})
    report.extra = {
        "avg_ratio": report.avg / joint.avg if joint.avg else 0.0,
        "zero_shot_source_trained": zs_trained.src,
        "zero_shot_source_random": zs_random.src,
        "source_test_size": len(src),
    }
    run.emit("bridge", report)
    return EXIT_OK


def longtail_experiment(cfg: ExperimentConfig) -> MetricsReport:
    lt = cfg.longtail
    spec = replace(cfg.world_spec(), num_classes=lt.num_classes, rho=math.log(lt.n_max / lt.n_min))
    world = generate_world(spec)
    train = source_train(world, lt.n_max)
    test = sample_split(world, 0, cfg.data.n_test, "test")
    counts = train.class_counts(lt.num_classes)
    tcfg = replace(cfg.train_config(), margin_scale=lt.margin_scale)
    model = fit_widin(world.encoder, train.x, train.y, lt.num_classes, tcfg)
    probe = train_probe(train.x, train.y, lt.num_classes, tcfg, tag=1)
    report = MetricsReport(name="longtail")
    report.longtail = {
        "widin_margins": longtail_report(widin_predictor(model), test, counts, lt.many, lt.few),
        "linear_probe": longtail_report(probe.predict, test, counts, lt.many, lt.few),
    }
    report.extra = {"train_counts": counts}
    return report


def cmd_longtail(run: Run) -> int:
    run.emit("longtail", longtail_experiment(run.cfg))
    return EXIT_OK


def cmd_gradcheck(run: Run) -> int:
    errors = run_suite(run.cfg.seed)
    report = MetricsReport(name="gradcheck", probes={k: v for k, v in errors.items()})
    worst = max(errors.values())
    report.extra = {"max_error": worst, "tolerance": TOLERANCE, "passed": worst < TOLERANCE}
    run.emit("gradcheck", report)
    if worst >= TOLERANCE:
        log.error("gradcheck failed: max relative error %.3g", worst)
        return EXIT_NUMERIC
    return EXIT_OK


COMMANDS = {
    "defaults": cmd_defaults,
    "gen-world": cmd_gen_world,
    "train": cmd_train,
    "eval": cmd_eval,
    "probe-domain": cmd_probe_domain,
    "ablate-prompts": cmd_ablate_prompts,
    "ablate-alignment": cmd_ablate_alignment,
    "ablate-schedule": cmd_ablate_schedule,
    "sweep-k": cmd_sweep_k,
    "bridge": cmd_bridge,
    "longtail": cmd_longtail,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="widin", description="Synthetic image-wording disentanglement lab.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("--out", help="output directory (overrides the config's 'out')")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        overrides = list(args.overrides) + ([f"out={args.out}"] if args.out else [])
        cfg = parse_config(args.config, overrides)
        return COMMANDS[args.command](Run(cfg))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ArtifactError as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return exc.code
    except WidinError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
