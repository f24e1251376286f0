"""Counter-based splittable random streams.

A stream is identified by a 64-bit seed plus a path of labels such as
("round", 7, "client", "Meditron", "shuffle").  The (seed, path) pair is
hashed into a Philox key, so replaying a stream always reproduces the same
bit pattern and sibling paths are statistically independent.  This is what
makes parallel and sequential client execution draw identical values.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import BadRange

_SEP = b"\x1f"


def _philox_key(seed: int, path: tuple) -> int:
    material = str(int(seed)).encode()
    for label in path:
        material += _SEP + repr(label).encode()
    digest = hashlib.sha256(material).digest()
    return int.from_bytes(digest[:16], "little")


class RngStream:
    """Sequential draw cursor for one (seed, path) identity.

    Instances are cheap; derive a fresh child per purpose instead of sharing
    one stream across threads.
    """

    __slots__ = ("seed", "path", "_gen")

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        self._gen = None

    def child(self, *labels) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(labels))

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            self._gen = np.random.Generator(
                np.random.Philox(key=_philox_key(self.seed, self.path))
            )
        return self._gen

    def random(self, size=None):
        return self.generator.random(size)

    def uniform(self, lo: float, hi: float, size=None):
        if not lo < hi:
            raise BadRange(f"uniform needs lo < hi, got [{lo}, {hi})")
        return lo + (hi - lo) * self.generator.random(size)

    def integer(self, n: int, size=None):
        """Uniform integer(s) in [0, n)."""
        return self.generator.integers(0, n, size=size)

    def normal(self, sd: float = 1.0, size=None):
        return sd * self.generator.standard_normal(size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self.path!r})"


def uniform(stream: RngStream, lo: float, hi: float) -> float:
    """One draw from U[lo, hi); raises BadRange when lo >= hi."""
    return float(stream.uniform(lo, hi))
