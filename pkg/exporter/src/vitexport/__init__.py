"""Toy ViT trainer and STRV exporter feeding the tokenshield runtime."""

__version__ = "0.1.0"

from .data import generate, read_dataset, write_dataset
from .export import convert_pretrained, export_strv, identity_name_map
from .refinput import reference_input
from .toyvit import ToyConfig, ToyViT, export_tensors
from .train import load_checkpoint, save_checkpoint, train_toy

__all__ = [
    "ToyConfig",
    "ToyViT",
    "convert_pretrained",
    "export_strv",
    "export_tensors",
    "generate",
    "identity_name_map",
    "load_checkpoint",
    "read_dataset",
    "reference_input",
    "save_checkpoint",
    "train_toy",
    "write_dataset",
]
