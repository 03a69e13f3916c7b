"""Multi-modal multi-label emotion recognition with adversarial refinement,
hierarchical cross-modal fusion and label-guided tailored representations."""

from .config import ModelConfig, toy_config
from .model import InputShapes, TailorModel, build_model

__all__ = ["ModelConfig", "toy_config", "InputShapes", "TailorModel", "build_model"]
__version__ = "0.1.0"
