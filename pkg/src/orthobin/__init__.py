"""Binarization of small neural networks guided by trainable orthonormal
weight transforms, with a bit-packed XNOR-popcount inference path."""

from .autodiff import Tensor, backward, sign_ste
from .datasets import Dataset, load_dataset
from .inference import BinaryDeployment, binary_dot, binary_forward
from .network import LayerSpec, Network, load_checkpoint, save_checkpoint
from .quantize import BinaryLayer, quantize_mse, transform_distance
from .trainer import RunResult, TrainConfig, binarize_network
from .transform import BlockState, kmeans_group, pca_init

__version__ = "0.1.0"

__all__ = [
    "BinaryDeployment", "BinaryLayer", "BlockState", "Dataset", "LayerSpec",
    "Network", "RunResult", "Tensor", "TrainConfig", "backward",
    "binarize_network", "binary_dot", "binary_forward", "kmeans_group",
    "load_checkpoint", "load_dataset", "pca_init", "quantize_mse",
    "save_checkpoint", "sign_ste", "transform_distance", "__version__",
]
