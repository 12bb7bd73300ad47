"""Last-layer empirical Bayes and uncertainty baselines on a small numpy autodiff."""
from .autodiff import Tape, Tensor
from .config import ExperimentConfig, load_config
from .flow import FlowConfig, NeuralSplineFlow
from .lleb import LLEBModel, RegularizationConfig, train_end_to_end, train_regularized, train_two_step
from .metrics import EvalReport, PosteriorSamples, evaluate_method
from .nets import ClassifierParams, TrainConfig, train_classifier

__version__ = "0.1.0"
