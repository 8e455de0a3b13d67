from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import gradcheck_suite, gradient_check
from .layers import AffineOccupancy, Conv3D, Dense, Dropout, Flatten, L2Normalize, Layer, MaxPool3D, ReLU, Sigmoid, Softmax
from .losses import loss_binary_ce, loss_categorical_ce, loss_contrastive
from .optim import SGD, SgdConfig, sgd_step
from .stack import LayerStack

__all__ = [
    "AffineOccupancy", "Conv3D", "Dense", "Dropout", "Flatten", "L2Normalize", "Layer", "LayerStack", "MaxPool3D", "ReLU", "SGD",
    "SgdConfig", "Sigmoid", "Softmax", "gradcheck_suite", "gradient_check", "load_checkpoint", "loss_binary_ce",
    "loss_categorical_ce", "loss_contrastive", "save_checkpoint", "sgd_step",
]
