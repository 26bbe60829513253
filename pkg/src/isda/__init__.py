"""Instance segmentation with deformable attention and position-aware kernels."""
from .config import ConfigError, RunConfig, load_config
from .model import ISDA, Detection, ModelConfig, predict

__version__ = "0.1.0"

__all__ = ["ConfigError", "Detection", "ISDA", "ModelConfig", "RunConfig", "load_config", "predict"]
