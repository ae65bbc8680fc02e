"""Filter-sharing convolutional layers with a self-contained training stack.

Every convolution layer's M*N filters can be expanded at run time as linear
combinations of P learned seed filters, dropping the layer's weight count
from M*N*S to M*N*P + P*S. The package bundles the tensor kernels, reverse-
mode autodiff, regularizers, two reference architectures, data tooling, a
post-hoc SVD factorization baseline, and a CSV-emitting CLI.
"""

__version__ = "0.1.0"

from .tensor import Shape, Tensor  # noqa: F401
