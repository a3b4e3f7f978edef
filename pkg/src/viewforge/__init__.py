"""Learned and hand-designed views for contrastive pretraining on multispectral images."""

__version__ = "0.1.0"

from .autodiff import Tensor, backward  # noqa: E402
from .training import ExperimentConfig, pretrain, linear_probe, budget_sweep  # noqa: E402

__all__ = ["Tensor", "backward", "ExperimentConfig", "pretrain", "linear_probe", "budget_sweep", "__version__"]
