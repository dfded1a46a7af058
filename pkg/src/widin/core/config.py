from __future__ import annotations

from dataclasses import asdict, dataclass

from widin.errors import ConfigError

STRATEGIES = ("fixed", "random", "aggregated", "misaligned", "none")
ALIGN_MODES = ("CT", "SupCT", "None")
FEAT_MODES = ("MSE", "direction")
# (F_P, F_D+F_C) is the default; the other two train a head jointly with F_P
SCHEDULES = ("P,DC", "PC,D", "PD,C")


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.07
    k: float = 1.0
    batch: int = 64
    lr_align: float = 0.002
    lr_disentangle: float = 1e-4
    lr_bridge: float = 1e-4
    lr_probe: float = 1e-4
    weight_decay: float = 0.01
    feat_weight: float = 2.0
    epochs: int = 60
    probe_epochs: int = 30
    template: str = "fixed"
    align: str = "CT"
    feat: str = "MSE"
    schedule: str = "P,DC"
    margin_scale: float = 0.0
    seed: int = 1

    def validate(self) -> None:
        """Raise :class:`ConfigError` naming the first offending field."""
        if self.tau <= 0:
            raise ConfigError("tau", "tau must be positive")
        if self.k < 0:
            raise ConfigError("k", "k must be non-negative")
        if self.batch < 2:
            raise ConfigError("batch", "batch must be >= 2")
        for name in ("lr_align", "lr_disentangle", "lr_bridge", "lr_probe", "weight_decay", "feat_weight", "margin_scale"):
            if getattr(self, name) < 0:
                raise ConfigError(name, f"{name} must be non-negative")
        for name in ("epochs", "probe_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(name, f"{name} must be non-negative")
        for name, allowed in (("template", STRATEGIES), ("align", ALIGN_MODES), ("feat", FEAT_MODES), ("schedule", SCHEDULES)):
            if getattr(self, name) not in allowed:
                raise ConfigError(name, f"{name} must be one of {allowed}")

    def as_dict(self) -> dict:
        return asdict(self)
