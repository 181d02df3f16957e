"""Convolutional networks on point clouds.

Layers learn a continuous filter as an MLP of local coordinates, reweighted
by inverse point density, with a factored evaluation path that avoids
materializing per-neighbor filter tensors. Everything runs on a small
numpy-backed tensor engine with tape-based reverse-mode differentiation.
"""

from pointconv import tensor
from pointconv.tensor import Tensor, record, backward, gradient_check, precision

__version__ = "0.1.0"

__all__ = ["tensor", "Tensor", "record", "backward", "gradient_check", "precision", "__version__"]
