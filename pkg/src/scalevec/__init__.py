"""Scale-equivariant convolutional networks with vector-field feature maps."""
from scalevec.kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
