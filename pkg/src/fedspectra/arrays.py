"""Dense grid and flat parameter-vector arithmetic.

SpecGrid carries an F x T log-magnitude spectrogram-like matrix; ParamVector
carries every trainable parameter of a model as one flat float64 vector plus
a registry describing the layout.  Both are immutable after construction.
"""

from __future__ import annotations

import numpy as np

from .errors import IncompatibleRegistry, NonFiniteValue, ShapeMismatch


def _freeze(arr: np.ndarray) -> np.ndarray:
    """Return a read-only array, copying only if the input is writeable."""
    if arr.flags.writeable:
        arr = arr.copy()
        arr.setflags(write=False)
    return arr


class SpecGrid:
    """Immutable F x T float64 grid. All entries must be finite."""

    __slots__ = ("values",)

    def __init__(self, values):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeMismatch(f"grid must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeMismatch(f"grid axes must be positive, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteValue("grid contains NaN or Inf")
        object.__setattr__(self, "values", _freeze(arr))

    @property
    def freq_bins(self) -> int:
        return self.values.shape[0]

    @property
    def time_frames(self) -> int:
        return self.values.shape[1]

    def __setattr__(self, name, value):
        raise AttributeError("SpecGrid is immutable")

    def __eq__(self, other):
        return isinstance(other, SpecGrid) and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.values.shape, self.values.tobytes()))

    def __repr__(self):
        return f"SpecGrid({self.freq_bins}x{self.time_frames})"


def frobenius_norm(g: SpecGrid) -> float:
    """sqrt of the sum of squared entries."""
    v = g.values
    return float(np.sqrt(np.sum(v * v)))


# A registry is an ordered tuple of (name, offset, shape) rows describing the
# flat layout; two vectors interoperate only when their registries are equal.


def build_registry(shapes) -> tuple:
    """shapes: ordered (name, shape) pairs -> registry with running offsets."""
    registry = []
    offset = 0
    for name, shape in shapes:
        shape = tuple(int(d) for d in shape)
        registry.append((name, offset, shape))
        offset += int(np.prod(shape))
    return tuple(registry)


def registry_size(registry: tuple) -> int:
    if not registry:
        return 0
    _, offset, shape = registry[-1]
    return offset + int(np.prod(shape))


class ParamVector:
    """Flat float64 vector with a (name, offset, shape) layout registry."""

    __slots__ = ("values", "registry")

    def __init__(self, values, registry: tuple):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 1:
            raise ShapeMismatch(f"parameter vector must be 1-D, got {arr.shape}")
        if arr.shape[0] != registry_size(registry):
            raise ShapeMismatch(
                f"vector length {arr.shape[0]} != registry volume {registry_size(registry)}"
            )
        object.__setattr__(self, "values", _freeze(arr))
        object.__setattr__(self, "registry", tuple(registry))

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def view(self, name: str) -> np.ndarray:
        """Read-only reshaped view of one registry entry."""
        for entry_name, offset, shape in self.registry:
            if entry_name == name:
                flat = self.values[offset : offset + int(np.prod(shape))]
                return flat.reshape(shape)
        raise KeyError(name)

    def compatible(self, other: "ParamVector") -> bool:
        return self.registry is other.registry or self.registry == other.registry

    def _check(self, other: "ParamVector"):
        if not isinstance(other, ParamVector) or not self.compatible(other):
            raise IncompatibleRegistry("parameter registries differ")

    def __setattr__(self, name, value):
        raise AttributeError("ParamVector is immutable")

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return ParamVector(self.values + other.values, self.registry)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return ParamVector(self.values - other.values, self.registry)

    def __mul__(self, scalar: float) -> "ParamVector":
        return ParamVector(float(scalar) * self.values, self.registry)

    __rmul__ = __mul__

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.values * self.values)))

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros(self.size), self.registry)

    def __repr__(self):
        return f"ParamVector(P={self.size}, entries={len(self.registry)})"


def axpy(a: float, x: ParamVector, y: ParamVector) -> ParamVector:
    """a*x + y elementwise; registries must match."""
    x._check(y)
    return ParamVector(float(a) * x.values + y.values, x.registry)
