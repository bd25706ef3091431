"""KMEx: turn a trained classifier into a prototype model with per-class k-means, and measure it."""

from kmex.nn import LayerStack, Model, load_model, save_model, toy_cnn, train_sgd
from kmex.pipeline import evaluate
from kmex.prototypes import PrototypeSet, class_scores, classify, convert, load_prototypes, save_prototypes
from kmex.similarity import Similarity

__version__ = "0.1.0"

__all__ = [
    "LayerStack", "Model", "PrototypeSet", "Similarity", "class_scores", "classify", "convert",
    "evaluate", "load_model", "load_prototypes", "save_model", "save_prototypes", "toy_cnn",
    "train_sgd",
]
