"""Synthetic observations, dataset files and the command line interface."""
from .generator import SceneSpec, SpecError, generate_sequence
from .tensorfile import TensorFormatError, read_tensor, write_tensor

__all__ = ["SceneSpec", "SpecError", "TensorFormatError", "generate_sequence", "read_tensor", "write_tensor"]
