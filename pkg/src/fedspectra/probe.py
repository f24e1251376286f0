"""Embedding-bias probe: grouped mean subtraction, dominant-component
removal, and leave-one-out k-nearest-neighbour accuracy.

The probe quantifies how much device identity versus disease content a set
of audio embeddings carries, and how the two trade off when the dominant
(device-driven) directions are suppressed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadRange, BadRank, DataError, DegenerateEmbedding, EmptyGroup, TooFewPoints
from .rng import RngStream

_POWER_TOL = 1e-10
_POWER_MAX_ITER = 10_000


@dataclass(frozen=True)
class EmbeddingSet:
    vectors: np.ndarray  # (N, H)
    device_labels: np.ndarray
    disease_labels: np.ndarray

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] < 2:
            raise DataError("embedding set needs a (N>=2, H) matrix")
        device = np.asarray(self.device_labels)
        disease = np.asarray(self.disease_labels)
        if device.shape[0] != vectors.shape[0] or disease.shape[0] != vectors.shape[0]:
            raise DataError("label arrays must have one entry per vector")
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "device_labels", device)
        object.__setattr__(self, "disease_labels", disease)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def with_vectors(self, vectors: np.ndarray) -> "EmbeddingSet":
        return EmbeddingSet(vectors, self.device_labels, self.disease_labels)


def mean_subtract(e: EmbeddingSet, groups, estimate_on=None) -> EmbeddingSet:
    """Subtract each group's mean from its members.

    estimate_on optionally restricts which rows the mean is estimated from
    (per group); the probe pipeline uses this to estimate a background from
    normal-labelled samples only.  With the default, every group mean of the
    output is exactly zero.
    """
    groups = np.asarray(groups)
    if groups.shape[0] != e.vectors.shape[0]:
        raise DataError("group array must have one entry per vector")
    out = e.vectors.copy()
    for g in np.unique(groups):
        member = groups == g
        if estimate_on is not None:
            basis = member & np.asarray(estimate_on, dtype=bool)
            if not basis.any():
                basis = member
        else:
            basis = member
        if not member.any():
            raise EmptyGroup(f"group {g!r} is empty")
        out[member] -= e.vectors[basis].mean(axis=0)
    return e.with_vectors(out)


def _power_iteration(cov: np.ndarray, stream: RngStream):
    """Dominant eigenpair of a symmetric PSD matrix, or None if degenerate."""
    h = cov.shape[0]
    v = stream.normal(size=h)
    norm = np.linalg.norm(v)
    v = v / norm
    lam = 0.0
    for _ in range(_POWER_MAX_ITER):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm < _POWER_TOL:
            return None
        w = w / norm
        lam_new = float(w @ cov @ w)
        if abs(lam_new - lam) <= _POWER_TOL * max(1.0, abs(lam_new)):
            return lam_new, w
        v, lam = w, lam_new
    return lam, v


def top_directions(vectors: np.ndarray, r: int):
    """Top-r principal directions and eigenvalues of the centered data via
    power iteration with deflation."""
    centered = vectors - vectors.mean(axis=0)
    cov = centered.T @ centered / centered.shape[0]
    dirs = []
    lams = []
    stream = RngStream(0x5EED, ("probe", "power"))
    for i in range(r):
        pair = _power_iteration(cov, stream.child(i))
        if pair is None:
            break
        lam, v = pair
        dirs.append(v)
        lams.append(lam)
        cov = cov - lam * np.outer(v, v)
    return np.asarray(dirs), np.asarray(lams)


def lowrank_whiten(e: EmbeddingSet, r: int) -> EmbeddingSet:
    """Center the set and remove the projections onto its top-r principal
    directions; the output has zero variance along the removed directions."""
    if not 1 <= r < e.dim:
        raise BadRank(f"rank must be in [1, {e.dim}), got {r}")
    centered = e.vectors - e.vectors.mean(axis=0)
    dirs, _ = top_directions(e.vectors, r)
    out = centered.copy()
    for v in dirs:
        out -= np.outer(out @ v, v)
    return e.with_vectors(out)


def knn_accuracy(e: EmbeddingSet, labels, k: int = 50, chunk: int = 256) -> float:
    """Leave-one-out majority vote over the k nearest neighbours (Euclidean);
    vote ties break toward the class with the smallest summed distance.
    Returns percent correct."""
    labels = np.asarray(labels)
    n = e.vectors.shape[0]
    if n <= k:
        raise TooFewPoints(f"need more than k={k} points, got {n}")
    if k < 1:
        raise BadRank(f"k must be >= 1, got {k}")
    x = e.vectors
    if np.ptp(x, axis=0).max() == 0.0:
        raise DegenerateEmbedding("all embedding vectors are identical")
    sq = (x * x).sum(axis=1)
    classes, encoded = np.unique(labels, return_inverse=True)
    n_classes = classes.shape[0]
    correct = 0
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        block = x[start:stop]
        d2 = sq[start:stop, None] - 2.0 * (block @ x.T) + sq[None, :]
        np.maximum(d2, 0.0, out=d2)
        rows = np.arange(start, stop)
        d2[np.arange(stop - start), rows] = np.inf  # exclude self
        part = np.argpartition(d2, k, axis=1)[:, : k + 1]
        for i in range(stop - start):
            cand = part[i]
            # stable order: by distance, then index, keeping exactly k
            order = np.lexsort((cand, d2[i, cand]))[:k]
            neigh = cand[order]
            votes = np.bincount(encoded[neigh], minlength=n_classes)
            top = votes.max()
            tied = np.flatnonzero(votes == top)
            if tied.shape[0] == 1:
                winner = tied[0]
            else:
                sums = np.full(n_classes, np.inf)
                for c in tied:
                    sums[c] = d2[i, neigh[encoded[neigh] == c]].sum()
                winner = int(np.argmin(sums))
            if winner == encoded[start + i]:
                correct += 1
    return 100.0 * correct / n


def export_embeddings(e: EmbeddingSet, path) -> None:
    """Tab-separated: vector components, then device and disease labels."""
    with open(path, "w", encoding="ascii") as fh:
        for vec, dev, dis in zip(e.vectors, e.device_labels, e.disease_labels):
            fh.write("\t".join(repr(float(v)) for v in vec))
            fh.write(f"\t{dev}\t{dis}\n")
