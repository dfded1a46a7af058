"""Image wording, disentanglement losses and staged training."""

from widin.core.config import TrainConfig
from widin.core.params import MLP, Linear, WidinModel
from widin.core.training import classify, fit_widin, predict_invariant

__all__ = ["MLP", "Linear", "TrainConfig", "WidinModel", "classify", "fit_widin", "predict_invariant"]
