"""Adversarial image captioning with attention-augmented GRUs, on numpy."""
from .autograd import Tensor, grad, no_grad
from .data import SyntheticSpec, Vocabulary, generate_synthetic
from .estimator import CaptionGAN
from .evaluation import bleu4, dropout_sweep, evaluate
from .model import build_models, greedy_decode, load_checkpoint, save_checkpoint
from .training import ModelDims, TrainConfig, TrainingData, TrainingError, build_and_train, train_loop

__version__ = "0.1.0"

__all__ = [
    "CaptionGAN", "ModelDims", "SyntheticSpec", "Tensor", "TrainConfig", "TrainingData",
    "TrainingError", "Vocabulary", "bleu4", "build_and_train", "build_models", "dropout_sweep",
    "evaluate", "generate_synthetic", "grad", "greedy_decode", "load_checkpoint", "no_grad",
    "save_checkpoint", "train_loop",
]
