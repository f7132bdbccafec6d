"""Object counting with global sum pooling (GSP) on a small numpy autodiff engine."""
from .model import CountModel, IdealizedBlockModel, ModelConfig, build_idealized, build_model, load_model, save_model
from .synth import AnnotatedImage, SceneSpec, generate_image
from .tensor import Tensor, backward, gradient_check
from .train import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AnnotatedImage",
    "CountModel",
    "IdealizedBlockModel",
    "ModelConfig",
    "SceneSpec",
    "Tensor",
    "TrainConfig",
    "backward",
    "build_idealized",
    "build_model",
    "generate_image",
    "gradient_check",
    "load_model",
    "save_model",
    "train",
]
