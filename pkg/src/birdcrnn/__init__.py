"""Bird audio detection pipeline: features, CRNN, training, and evaluation."""

__version__ = "0.1.0"

from .dataset import AudioClip, Manifest, SplitAssignment, SynthSpec  # noqa: F401
from .features import FeatureConfig, FeatureMatrix, FilterBank, NormStats  # noqa: F401
from .net import CrnnModel, ModelConfig  # noqa: F401
from .train import GridSpace, TrainConfig, TrainRun  # noqa: F401
from .evaluate import EvalReport, Prediction  # noqa: F401
