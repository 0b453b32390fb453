"""Binary adversarial training of energy models on low-dimensional data."""
from .diffcore import EnergyModel, init_model
from .distributions import Batch, DistributionSpec
from .samplers import AttackConfig, SgldConfig
from .training import MinimaxConfig, RunRecord, TrainConfig

__all__ = [
    "AttackConfig",
    "Batch",
    "DistributionSpec",
    "EnergyModel",
    "MinimaxConfig",
    "RunRecord",
    "SgldConfig",
    "TrainConfig",
    "init_model",
]
