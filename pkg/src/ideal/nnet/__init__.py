from .autoencoder import Autoencoder, area_resize, prepare_map, train_autoencoder
from .checkpoint import load_weights, save_weights
from .classifier import (Classifier, TrainConfig, TrainingError, augment,
                         mc_dropout_samples, predict, train_classifier)
from .optim import Adam

__all__ = [
    "Adam", "Autoencoder", "Classifier", "TrainConfig", "TrainingError", "area_resize",
    "augment", "encode", "load_weights", "mc_dropout_samples", "predict", "prepare_map",
    "save_weights", "train_autoencoder", "train_classifier",
]


def encode(ae, saliency_values):
    """32-d latent of one saliency map (normalised and resized first)."""
    return ae.encode(prepare_map(saliency_values))[0]
