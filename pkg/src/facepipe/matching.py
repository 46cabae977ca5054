"""Cosine-distance identification against a gallery, plus CMC/ROC metrics."""

from __future__ import annotations

import numpy as np

__all__ = [
    "Gallery",
    "ZeroNormError",
    "MatchAccountingError",
    "cosine_distance",
    "identify",
    "cmc",
    "roc",
]


class ZeroNormError(ValueError):
    """Cosine distance is undefined for a zero-norm feature vector."""


class MatchAccountingError(ValueError):
    """A probe's true identity is missing from the gallery."""


class Gallery:
    """Enrolled (subject_id, feature) pairs; immutable after construction."""

    def __init__(self, entries):
        entries = list(entries)
        if not entries:
            raise ValueError("gallery needs at least one entry")
        self.subject_ids = tuple(str(sid) for sid, _ in entries)
        feats = np.stack([np.asarray(f, dtype=np.float64).reshape(-1) for _, f in entries])
        norms = np.linalg.norm(feats, axis=1)
        if np.any(norms == 0):
            raise ZeroNormError("gallery contains a zero-norm feature")
        feats.setflags(write=False)
        self.features = feats
        self._norms = norms

    def __len__(self) -> int:
        return len(self.subject_ids)

    @property
    def dimension(self) -> int:
        return self.features.shape[1]

    def distances(self, probe: np.ndarray) -> np.ndarray:
        """Cosine distance from the probe to every entry, in gallery order."""
        probe = np.asarray(probe, dtype=np.float64).reshape(-1)
        if probe.shape[0] != self.dimension:
            raise ValueError(
                f"probe dimension {probe.shape[0]} != gallery dimension {self.dimension}"
            )
        norm = np.linalg.norm(probe)
        if norm == 0:
            raise ZeroNormError("probe feature has zero norm")
        sims = (self.features @ probe) / (self._norms * norm)
        return 1.0 - np.clip(sims, -1.0, 1.0)


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - cos(angle between a and b); 0 for parallel, 2 for opposite."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroNormError("cosine distance undefined for zero-norm vectors")
    return 1.0 - float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def identify(probe: np.ndarray, gallery: Gallery) -> list[tuple[str, float]]:
    """All gallery entries sorted by ascending distance; ties keep gallery order."""
    dist = gallery.distances(probe)
    order = np.argsort(dist, kind="stable")
    return [(gallery.subject_ids[i], float(dist[i])) for i in order]


def cmc(all_results, max_rank: int) -> np.ndarray:
    """curve[r-1] = fraction of probes whose true id appears within rank r."""
    all_results = list(all_results)
    if not all_results:
        raise ValueError("need at least one probe result")
    if max_rank < 1:
        raise ValueError("max_rank must be >= 1")
    hits = np.zeros(max_rank)
    for true_id, ranked in all_results:
        ids = [sid for sid, _ in ranked]
        if true_id not in ids:
            raise MatchAccountingError(f"true id {true_id!r} absent from gallery")
        rank = ids.index(true_id) + 1
        if rank <= max_rank:
            hits[rank - 1] += 1
    return np.cumsum(hits) / len(all_results)


def roc(genuine, impostor, thresholds: int = 1000) -> np.ndarray:
    """(FAR, VR) pairs over an even threshold sweep of the pooled score range.

    VR is the fraction of genuine distances at or below the threshold, FAR
    the same fraction of impostor distances; both are non-decreasing along
    the sweep.
    """
    genuine = np.asarray(list(genuine), dtype=np.float64)
    impostor = np.asarray(list(impostor), dtype=np.float64)
    if genuine.size == 0 or impostor.size == 0:
        raise ValueError("need both genuine and impostor distances")
    if thresholds < 2:
        raise ValueError("need at least two thresholds")
    pooled_min = min(genuine.min(), impostor.min())
    pooled_max = max(genuine.max(), impostor.max())
    grid = np.linspace(pooled_min, pooled_max, thresholds)
    vr = np.searchsorted(np.sort(genuine), grid, side="right") / genuine.size
    far = np.searchsorted(np.sort(impostor), grid, side="right") / impostor.size
    return np.column_stack([far, vr])
