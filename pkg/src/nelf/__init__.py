"""nelf: a numpy neural light field toolkit.

A volumetric ray-marching teacher renders views of analytic radiance
fields; a convolutional light-field student with super-resolution heads is
distilled from those renders and then serves real-time novel views from
camera poses alone.  Everything runs on a small reverse-mode autodiff core
over (B, C, H, W) arrays.
"""

from .tensor import (
    GraphError,
    Parameter,
    ShapeError,
    Tensor4,
    backward,
    no_grad,
    zero_grad,
)

__version__ = "0.1.0"

__all__ = [
    "GraphError",
    "Parameter",
    "ShapeError",
    "Tensor4",
    "backward",
    "no_grad",
    "zero_grad",
    "__version__",
]
