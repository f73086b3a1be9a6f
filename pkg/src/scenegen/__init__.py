"""Scene-graph-to-image pipeline on a small from-scratch autodiff core.

Three trainable stages: a graph transformer that turns a scene graph into an
object layout, a vector-quantized convolutional autoencoder that maps images
to discrete token grids, and a decoder-only transformer that generates token
grids conditioned on layout triplets. A procedural shape-scene generator
makes the whole pipeline trainable and testable on one CPU core.
"""

from .tensor import Tensor, ShapeError, backward, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "ShapeError", "backward", "no_grad", "__version__"]
