"""CTC-alignment-based single-step non-autoregressive speech recognition in numpy."""
from .errors import CassNatError
from .losses import LossConfig
from .model import ATBaseline, CassNat, ModelConfig, build_model
from .training import TrainConfig

__all__ = ["ATBaseline", "CassNat", "CassNatError", "LossConfig", "ModelConfig", "TrainConfig", "build_model"]
__version__ = "0.1.0"
