"""Superpixel graph attention networks for image and land-use change classification."""

from .graph import GraphBatch, Rag, SuperGraph, build_rag, build_supergraph
from .nn import GraphClassifier, ModelConfig, count_params
from .segmentation import Image, LabelMap, load_image, slic

__version__ = "0.1.0"

__all__ = [
    "GraphBatch", "GraphClassifier", "Image", "LabelMap", "ModelConfig", "Rag", "SuperGraph",
    "build_rag", "build_supergraph", "count_params", "load_image", "slic",
]
