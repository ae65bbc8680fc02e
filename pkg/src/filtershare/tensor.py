"""Dense float64 tensors and the numeric operations built on them.

Convolution is implemented as cross-correlation (no kernel flip) throughout
the package: the standard CNN convention, under which learned filters simply
absorb the flip. All values are 64-bit floats so gradient checks can be tight.
Tensors are immutable once constructed and safe to share across threads.
"""

from __future__ import annotations

import struct
from typing import Iterable

import numpy as np

from . import kernels
from .errors import FormatError, ShapeError


class Shape(tuple):
    """Ordered positive extents of a tensor; at least one dimension."""

    def __new__(cls, dims: Iterable[int]):
        dims = tuple(int(d) for d in dims)
        if not dims:
            raise ShapeError("a shape needs at least one dimension")
        for i, d in enumerate(dims):
            if d < 1:
                raise ShapeError(f"extent must be >= 1, got {d} in dimension {i}")
        return super().__new__(cls, dims)

    @property
    def element_count(self) -> int:
        return int(np.prod(self, dtype=np.int64))


class Tensor:
    """Immutable dense array of float64 values in row-major order."""

    __slots__ = ("array",)

    def __init__(self, values):
        arr = np.array(values, dtype=np.float64, order="C")
        if arr.ndim == 0:
            arr = arr.reshape(1)
        Shape(arr.shape)
        if not np.all(np.isfinite(arr)):
            raise ShapeError("tensor values must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "array", arr)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        """Adopt an array we own (already float64, C-contiguous). No checks."""
        t = object.__new__(cls)
        arr.flags.writeable = False
        object.__setattr__(t, "array", arr)
        return t

    @classmethod
    def zeros(cls, shape) -> "Tensor":
        return cls._wrap(np.zeros(Shape(shape)))

    @classmethod
    def full(cls, shape, value: float) -> "Tensor":
        return cls._wrap(np.full(Shape(shape), float(value)))

    @property
    def shape(self) -> Shape:
        return Shape(self.array.shape)

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the values (read-only)."""
        return self.array.reshape(-1)

    @property
    def size(self) -> int:
        return self.array.size

    def reshape(self, shape) -> "Tensor":
        return Tensor._wrap(np.ascontiguousarray(self.array.reshape(Shape(shape))))

    def tolist(self):
        return self.array.tolist()

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.array.reshape(-1)[0])

    def __getitem__(self, idx):
        got = self.array[idx]
        if np.isscalar(got) or got.ndim == 0:
            return float(got)
        return Tensor._wrap(np.ascontiguousarray(got))

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)})"

    def __eq__(self, other):
        return isinstance(other, Tensor) and np.array_equal(self.array, other.array)

    def __hash__(self):
        return hash((tuple(self.shape), self.array.tobytes()))


def _arr(t) -> np.ndarray:
    return t.array if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)


# ---------------------------------------------------------------------------
# elementwise / reduction operations
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    x, y = _arr(a), _arr(b)
    kernels.require_same_shape(x, y, "add operands")
    return Tensor._wrap(x + y)


def mul(a: Tensor, b: Tensor) -> Tensor:
    x, y = _arr(a), _arr(b)
    kernels.require_same_shape(x, y, "mul operands")
    return Tensor._wrap(x * y)


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor._wrap(_arr(a) * float(c))


def relu(a: Tensor) -> Tensor:
    return Tensor._wrap(kernels.relu(_arr(a)))


def sigmoid(a: Tensor) -> Tensor:
    return Tensor._wrap(kernels.sigmoid(_arr(a)))


def tensor_sum(a: Tensor) -> float:
    return float(_arr(a).sum())


def dot(a: Tensor, b: Tensor) -> float:
    x, y = _arr(a), _arr(b)
    if x.ndim != 1 or y.ndim != 1:
        raise ShapeError("dot expects two 1-dimensional tensors")
    kernels.require_same_shape(x, y, "dot operands")
    return float(np.dot(x, y))


def upsample_nearest(a: Tensor, factor: int) -> Tensor:
    """Repeat each element `factor` times along every dimension."""
    return Tensor._wrap(kernels.repeat_all(_arr(a), int(factor)))


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def conv_valid(x: Tensor, k: Tensor) -> Tensor:
    """Valid cross-correlation: out extent = in - kernel + 1 per dimension."""
    return Tensor._wrap(kernels.conv_valid(_arr(x), _arr(k)))


def conv_same(x: Tensor, k: Tensor) -> Tensor:
    """Shape-preserving cross-correlation over a zero-padded input.

    Kernel extents must be odd; each side is padded by (extent - 1) / 2.
    """
    return Tensor._wrap(kernels.conv_same(_arr(x), _arr(k)))


def zero_pad(x: Tensor, widths) -> Tensor:
    return Tensor._wrap(kernels.zero_pad(_arr(x), [int(w) for w in widths]))


def max_pool(x: Tensor, window) -> tuple[Tensor, np.ndarray]:
    """Non-overlapping max pooling over every dimension.

    `window` is one int (applied to every dim) or a per-dim sequence. Returns
    the pooled tensor and, per output element, the flat index into x of the
    chosen maximum (used by the backward scatter).
    """
    arr = _arr(x)
    if np.isscalar(window):
        window = (int(window),) * arr.ndim
    else:
        window = tuple(int(w) for w in window)
    pooled, sources = kernels.max_pool_stack(arr[None], window)
    return Tensor._wrap(np.ascontiguousarray(pooled[0])), sources[0]


def max_pool_backward(grad: Tensor, sources: np.ndarray, in_shape) -> Tensor:
    """Scatter pooled gradients back to their argmax positions."""
    return Tensor._wrap(kernels.max_pool_scatter(_arr(grad), sources, Shape(in_shape)))


# ---------------------------------------------------------------------------
# binary dump format: u32 dim count, u32 extents, then f64 row-major data,
# all little-endian. Used by checkpoints and the factorization tooling.
# ---------------------------------------------------------------------------

_U32 = np.dtype("<u4")
_F64 = np.dtype("<f8")


def dump_tensor(t: Tensor, path) -> None:
    arr = t.array
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(np.asarray(arr.shape, dtype=_U32).tobytes())
        fh.write(np.ascontiguousarray(arr, dtype=_F64).tobytes())


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated tensor dump (no header)")
    (ndim,) = struct.unpack_from("<I", raw, 0)
    header_end = 4 + 4 * ndim
    if ndim < 1 or len(raw) < header_end:
        raise FormatError(f"{path}: truncated tensor dump header")
    dims = np.frombuffer(raw, dtype=_U32, count=ndim, offset=4)
    shape = Shape(int(d) for d in dims)
    expected = header_end + 8 * shape.element_count
    if len(raw) != expected:
        raise FormatError(
            f"{path}: tensor dump holds {len(raw)} bytes, expected {expected} "
            f"for shape {tuple(shape)}"
        )
    data = np.frombuffer(raw, dtype=_F64, offset=header_end).astype(np.float64)
    return Tensor._wrap(np.ascontiguousarray(data.reshape(shape)))
