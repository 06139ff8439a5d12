"""Object-centric video transformer at desk scale, with a synthetic benchmark."""

from .model import ModelConfig, ObjectCentricVideoModel
from .training import TrainConfig, evaluate, train
from .worlds import SampleSet, SplitSpec, WorldSpec, build_split, generate_sample

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "ObjectCentricVideoModel",
    "TrainConfig",
    "evaluate",
    "train",
    "SampleSet",
    "SplitSpec",
    "WorldSpec",
    "build_split",
    "generate_sample",
    "__version__",
]
