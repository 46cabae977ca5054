"""Feature extraction behind a pluggable backend, plus feature post-processing.

A backend maps a normalized 224x224 depth map to a fixed-dimension vector.
The built-in baseline projects flattened maps onto an eigen-depth-map basis;
the external backend reads precomputed vectors keyed by the SHA-256 of the
exported PGM bytes, which is the interchange point for any offline feature
extractor. Post-processing follows the matching chain: signed square root,
then PCA.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from facepipe.depthmap import DepthMap, pgm_bytes

__all__ = [
    "PcaModel",
    "BaselineBackend",
    "ExternalBackend",
    "FeatureLookupError",
    "FeatureFormatError",
    "sqrt_normalize",
    "pca_fit",
    "pca_fit_variance",
    "pca_transform",
    "baseline_train",
    "external_backend",
    "write_feature_file",
    "read_feature_file",
    "feature_hash",
]

_FVEC_MAGIC = b"FVEC1"


class FeatureLookupError(KeyError):
    """No stored feature for the requested map hash."""


class FeatureFormatError(ValueError):
    """Feature file is malformed (bad magic or length)."""


def sqrt_normalize(values: np.ndarray) -> np.ndarray:
    """Signed element-wise square root: x -> sign(x) * sqrt(|x|).

    Agrees with the plain square root on the non-negative features most
    extractors emit, and stays odd-symmetric for signed baselines.
    """
    values = np.asarray(values, dtype=np.float64)
    return np.sign(values) * np.sqrt(np.abs(values))


@dataclass(frozen=True)
class PcaModel:
    """Mean, orthonormal component rows, and per-component variance."""

    mean: np.ndarray
    components: np.ndarray  # (k, d), rows orthonormal
    explained_variance: np.ndarray  # (k,), non-increasing

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        comps = np.asarray(self.components, dtype=np.float64)
        var = np.asarray(self.explained_variance, dtype=np.float64).reshape(-1)
        if comps.ndim != 2 or comps.shape[1] != mean.shape[0]:
            raise ValueError("components must be (k, d) matching the mean")
        if var.shape[0] != comps.shape[0]:
            raise ValueError("one variance per component required")
        if np.any(np.diff(var) > 1e-12) or np.any(var < -1e-12):
            raise ValueError("explained_variance must be non-increasing and >= 0")
        for arr in (mean, comps, var):
            arr.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "explained_variance", var)

    @property
    def k(self) -> int:
        return self.components.shape[0]


def _pca_eig(features: np.ndarray):
    """Mean, eigenvalues (desc), and eigenvectors up to numerical rank.

    Uses the Gram-matrix route when there are fewer samples than
    dimensions, which keeps flattened-image PCA tractable.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least two feature vectors")
    n, d = x.shape
    mean = x.mean(axis=0)
    xc = x - mean
    if n <= d:
        gram = xc @ xc.T / (n - 1)
        evals, evecs = np.linalg.eigh(gram)
        order = np.argsort(evals)[::-1]
        evals = evals[order]
        evecs = evecs[:, order]
        tol = max(evals[0], 0.0) * 1e-12
        rank = int(np.sum(evals > tol))
        if rank == 0:
            raise ValueError("degenerate input: all feature vectors identical")
        comps = np.empty((rank, d))
        for i in range(rank):
            vec = xc.T @ evecs[:, i]
            comps[i] = vec / np.linalg.norm(vec)
        evals = evals[:rank]
    else:
        cov = xc.T @ xc / (n - 1)
        evals, evecs = np.linalg.eigh(cov)
        order = np.argsort(evals)[::-1]
        evals = evals[order]
        tol = max(evals[0], 0.0) * 1e-12
        rank = int(np.sum(evals > tol))
        if rank == 0:
            raise ValueError("degenerate input: all feature vectors identical")
        comps = evecs[:, order][:, :rank].T.copy()
        evals = evals[:rank]

    # Deterministic sign: largest-magnitude entry of each component positive.
    for row in comps:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            row *= -1
    return mean, np.maximum(evals, 0.0), comps


def pca_fit(features, k: int) -> PcaModel:
    """Top-k principal axes of the sample covariance, deterministic signs."""
    x = np.asarray(features, dtype=np.float64)
    n, d = x.shape
    if k < 1 or k > min(d, n - 1):
        raise ValueError(f"k={k} out of range for {n} samples of dimension {d}")
    mean, evals, comps = _pca_eig(x)
    if k > comps.shape[0]:
        raise ValueError(
            f"k={k} exceeds the numerical rank {comps.shape[0]} of the sample"
        )
    return PcaModel(mean, comps[:k], evals[:k])


def pca_fit_variance(features, variance_target: float, cap: int) -> PcaModel:
    """Smallest k whose cumulative explained variance reaches the target.

    k is additionally capped (typically at gallery size - 1) and by the
    sample's numerical rank.
    """
    if not 0 < variance_target <= 1:
        raise ValueError("variance_target must be in (0, 1]")
    mean, evals, comps = _pca_eig(np.asarray(features, dtype=np.float64))
    cum = np.cumsum(evals) / evals.sum()
    k = int(np.searchsorted(cum, variance_target) + 1)
    k = max(1, min(k, cap, comps.shape[0]))
    return PcaModel(mean, comps[:k], evals[:k])


def pca_transform(model: PcaModel, values: np.ndarray) -> np.ndarray:
    """Project (v - mean) onto the component rows; accepts a vector or batch."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-1] != model.mean.shape[0]:
        raise ValueError(
            f"dimension {values.shape[-1]} does not match model dimension "
            f"{model.mean.shape[0]}"
        )
    return (values - model.mean) @ model.components.T


class BaselineBackend:
    """Eigen-depth-map embedder: flattens maps and projects onto a PCA basis."""

    def __init__(self, model: PcaModel, map_size: int):
        self._model = model
        self._map_size = map_size

    @property
    def dimension(self) -> int:
        return self._model.k

    def embed(self, dmap: DepthMap) -> np.ndarray:
        if dmap.height != self._map_size or dmap.width != self._map_size:
            raise ValueError(
                f"expected {self._map_size}x{self._map_size} map, "
                f"got {dmap.height}x{dmap.width}"
            )
        return pca_transform(self._model, dmap.depth.reshape(-1))


def baseline_train(maps, d: int, map_size: int = 224) -> BaselineBackend:
    """Fit the eigen-depth-map basis on flattened training maps."""
    maps = list(maps)
    if len(maps) < d + 1:
        raise ValueError(f"need at least {d + 1} training maps for d={d}, got {len(maps)}")
    flat = np.stack([m.depth.reshape(-1) for m in maps])
    if flat.shape[1] != map_size * map_size:
        raise ValueError(f"training maps must be {map_size}x{map_size}")
    return BaselineBackend(pca_fit(flat, d), map_size)


def feature_hash(dmap: DepthMap) -> str:
    """Lowercase hex SHA-256 of the map's exported PGM bytes."""
    return hashlib.sha256(pgm_bytes(dmap)).hexdigest()


def write_feature_file(values: np.ndarray, path) -> None:
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    with Path(path).open("wb") as fh:
        fh.write(_FVEC_MAGIC)
        fh.write(struct.pack("<Q", values.shape[0]))
        fh.write(values.astype("<f8").tobytes())


def read_feature_file(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:5] != _FVEC_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic, expected {_FVEC_MAGIC!r}")
    if len(raw) < 13:
        raise FeatureFormatError(f"{path}: truncated header")
    (count,) = struct.unpack_from("<Q", raw, 5)
    if len(raw) != 13 + 8 * count:
        raise FeatureFormatError(
            f"{path}: expected {13 + 8 * count} bytes for {count} values, "
            f"found {len(raw)}"
        )
    return np.frombuffer(raw, dtype="<f8", count=count, offset=13).copy()


class ExternalBackend:
    """Feature lookup from a directory of <sha256>.fvec files."""

    def __init__(self, directory):
        self._dir = Path(directory)
        if not self._dir.is_dir():
            raise FileNotFoundError(f"feature directory {self._dir} does not exist")
        self._dimension = None
        for f in sorted(self._dir.glob("*.fvec")):
            try:
                self._dimension = read_feature_file(f).shape[0]
                break
            except FeatureFormatError:
                continue  # surfaces as a format error if actually looked up

    @property
    def dimension(self) -> int | None:
        return self._dimension

    def embed(self, dmap: DepthMap) -> np.ndarray:
        digest = feature_hash(dmap)
        path = self._dir / f"{digest}.fvec"
        if not path.exists():
            raise FeatureLookupError(f"no feature file for map hash {digest}")
        values = read_feature_file(path)
        if self._dimension is None:
            self._dimension = values.shape[0]
        elif values.shape[0] != self._dimension:
            raise FeatureFormatError(
                f"{path}: dimension {values.shape[0]} != backend dimension "
                f"{self._dimension}"
            )
        return values


def external_backend(directory) -> ExternalBackend:
    return ExternalBackend(directory)
