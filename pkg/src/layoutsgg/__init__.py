"""Layout-guided robustness mechanisms for scene graph generation, at desk scale."""
from .estimator import SceneGraphModel
from .nrm import Layout, instance_normalize, layout_attention, nrm_forward, restitute
from .pipeline import ModelConfig, ModelParams, TrainConfig, forward, init_params, load_model, save_model, train
from .scenes import GeneratorConfig, SceneRecord, generate_dataset, rasterize

__all__ = [
    "SceneGraphModel",
    "Layout",
    "instance_normalize",
    "layout_attention",
    "nrm_forward",
    "restitute",
    "ModelConfig",
    "ModelParams",
    "TrainConfig",
    "forward",
    "init_params",
    "load_model",
    "save_model",
    "train",
    "GeneratorConfig",
    "SceneRecord",
    "generate_dataset",
    "rasterize",
]

__version__ = "0.1.0"
