"""Orthographic depth-map rendering, filtering, normalization, and PGM export."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from facepipe.pointcloud import PointCloud

__all__ = [
    "DepthMap",
    "RenderParams",
    "EmptyRenderError",
    "bilinear_weights",
    "render_depth",
    "median_filter",
    "normalize",
    "resize",
    "export_pgm",
    "pgm_bytes",
    "load_pgm",
]


class EmptyRenderError(ValueError):
    """No point of the cloud projected onto the canvas."""


def bilinear_weights(u: np.ndarray, v: np.ndarray, size: int):
    """Corner pixels and weights for continuous positions inside the canvas.

    Returns (rows, cols, weights), each (n, 4), corner order
    top-left, top-right, bottom-left, bottom-right; weights sum to 1.
    """
    # Anchor at size-2 so u == size-1 still addresses an in-canvas 2x2 block.
    u0 = np.minimum(np.floor(u).astype(np.intp), size - 2)
    v0 = np.minimum(np.floor(v).astype(np.intp), size - 2)
    fu = u - u0
    fv = v - v0
    weights = np.stack(
        [(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], axis=1
    )
    cols = np.stack([u0, u0 + 1, u0, u0 + 1], axis=1)
    rows = np.stack([v0, v0, v0 + 1, v0 + 1], axis=1)
    return rows, cols, weights


@dataclass(frozen=True)
class DepthMap:
    """Grid of depth values (mm, or 0..255 after normalize) with a validity mask.

    depth and valid are (height, width) arrays; pixels that received no
    splat contribution are invalid and carry depth 0.
    """

    depth: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        depth = np.asarray(self.depth, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if depth.ndim != 2 or depth.shape != valid.shape:
            raise ValueError("depth and valid must be matching 2-D arrays")
        if depth.shape[0] < 1 or depth.shape[1] < 1:
            raise ValueError("map must have positive size")
        if not np.isfinite(depth[valid]).all():
            raise ValueError("valid pixels must be finite")
        if np.any(depth[~valid] != 0.0):
            raise ValueError("invalid pixels must carry depth 0")
        depth.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "valid", valid)

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]


@dataclass(frozen=True)
class RenderParams:
    crop_radius: float = 100.0  # mm; also sets the pixels-per-mm scale
    output_size: int = 200

    def __post_init__(self):
        if self.crop_radius <= 0:
            raise ValueError("crop_radius must be positive")
        if self.output_size < 2:
            raise ValueError("output_size must be >= 2")


def render_depth(cloud: PointCloud, params: RenderParams = RenderParams()) -> DepthMap:
    """Orthographic splat of (x, y, z) points onto a square depth image.

    A point maps to the continuous pixel (u, v) = (s*x + W/2, -s*y + H/2)
    with s = output_size / crop_radius; its z value is spread over the four
    surrounding pixels with bilinear weights and each pixel stores the
    weighted mean of its contributions. Points projecting outside the
    canvas are discarded; accumulation follows cloud order.
    """
    size = params.output_size
    scale = size / params.crop_radius
    u = scale * cloud.points[:, 0] + size / 2.0
    v = -scale * cloud.points[:, 1] + size / 2.0
    z = cloud.points[:, 2]

    inside = (u >= 0) & (u <= size - 1) & (v >= 0) & (v <= size - 1)
    if not inside.any():
        raise EmptyRenderError("no point projects onto the canvas")
    u, v, z = u[inside], v[inside], z[inside]
    rows, cols, weights = bilinear_weights(u, v, size)

    weight_sum = np.zeros((size, size))
    value_sum = np.zeros((size, size))
    flat = rows.ravel() * size + cols.ravel()  # per point, its 4 corners in order
    np.add.at(weight_sum.ravel(), flat, weights.ravel())
    np.add.at(value_sum.ravel(), flat, (weights * z[:, None]).ravel())

    valid = weight_sum > 0
    depth = np.zeros((size, size))
    depth[valid] = value_sum[valid] / weight_sum[valid]
    return DepthMap(depth, valid)


def median_filter(dmap: DepthMap, kernel: int = 3) -> DepthMap:
    """Replace each valid pixel by the median of the valid pixels in its window.

    Invalid neighbors are excluded; the validity mask is unchanged.
    """
    if kernel < 3 or kernel % 2 == 0:
        raise ValueError("kernel must be odd and >= 3")
    pad = kernel // 2
    padded = np.full(
        (dmap.height + 2 * pad, dmap.width + 2 * pad), np.nan, dtype=np.float64
    )
    padded[pad:-pad, pad:-pad] = np.where(dmap.valid, dmap.depth, np.nan)
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kernel, kernel))
    with warnings.catch_warnings():
        # all-NaN windows only occur at invalid centers, masked out below
        warnings.simplefilter("ignore", RuntimeWarning)
        med = np.nanmedian(windows.reshape(dmap.height, dmap.width, -1), axis=2)
    depth = np.where(dmap.valid, med, 0.0)
    return DepthMap(depth, dmap.valid)


def normalize(dmap: DepthMap, window: tuple[float, float] | None = None) -> DepthMap:
    """Linearly rescale valid depths to 0..255; invalid pixels stay 0.

    By default the window is the per-image min/max; pass an explicit
    (lo, hi) window for cross-image comparability. A degenerate window
    maps everything to 128.
    """
    if not dmap.valid.any():
        raise ValueError("cannot normalize a map with no valid pixels")
    if window is None:
        lo, hi = float(dmap.depth[dmap.valid].min()), float(dmap.depth[dmap.valid].max())
    else:
        lo, hi = float(window[0]), float(window[1])
    if hi <= lo:
        depth = np.where(dmap.valid, 128.0, 0.0)
    else:
        scaled = (dmap.depth - lo) * (255.0 / (hi - lo))
        depth = np.where(dmap.valid, np.clip(scaled, 0.0, 255.0), 0.0)
    return DepthMap(depth, dmap.valid)


def resize(dmap: DepthMap, target: int) -> DepthMap:
    """Bilinear resample to target x target under the align-corners convention."""
    if target < 2:
        raise ValueError("target must be >= 2")
    if target == dmap.height and target == dmap.width:
        return dmap

    src_y = np.arange(target) * (dmap.height - 1) / (target - 1)
    src_x = np.arange(target) * (dmap.width - 1) / (target - 1)
    y0 = np.minimum(src_y.astype(np.intp), dmap.height - 2)
    x0 = np.minimum(src_x.astype(np.intp), dmap.width - 2)
    fy = (src_y - y0)[:, None]
    fx = (src_x - x0)[None, :]

    def sample(grid):
        g00 = grid[np.ix_(y0, x0)]
        g01 = grid[np.ix_(y0, x0 + 1)]
        g10 = grid[np.ix_(y0 + 1, x0)]
        g11 = grid[np.ix_(y0 + 1, x0 + 1)]
        return (
            g00 * (1 - fy) * (1 - fx)
            + g01 * (1 - fy) * fx
            + g10 * fy * (1 - fx)
            + g11 * fy * fx
        )

    depth = sample(dmap.depth)
    valid = sample(dmap.valid.astype(np.float64)) >= 0.5
    return DepthMap(np.where(valid, depth, 0.0), valid)


def pgm_bytes(dmap: DepthMap) -> bytes:
    """Serialize as a 16-bit big-endian binary PGM; values are round(depth*257).

    The map must be normalized (depths within 0..255).
    """
    # tolerance absorbs one-ulp overshoot from bilinear resampling
    if dmap.depth.min() < -1e-6 or dmap.depth.max() > 255.0 + 1e-6:
        raise ValueError("map is not normalized to 0..255; call normalize() first")
    header = f"P5\n{dmap.width} {dmap.height}\n65535\n".encode("ascii")
    values = np.rint(np.clip(dmap.depth, 0.0, 255.0) * 257.0).astype(">u2")
    return header + values.tobytes()


def export_pgm(dmap: DepthMap, path) -> None:
    Path(path).write_bytes(pgm_bytes(dmap))


def load_pgm(path) -> DepthMap:
    """Read a 16-bit binary PGM back into a 0..255-scaled map.

    Zero-valued pixels are treated as invalid, matching the export of
    normalized maps where invalid pixels carry 0.
    """
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    try:
        width, height = (int(x) for x in parts[1].split())
        maxval = int(parts[2])
    except ValueError:
        raise ValueError(f"{path}: malformed PGM header") from None
    if maxval != 65535:
        raise ValueError(f"{path}: expected 16-bit PGM, maxval {maxval}")
    try:
        values = np.frombuffer(parts[3], dtype=">u2", count=width * height)
    except ValueError:
        raise ValueError(f"{path}: truncated PGM body") from None
    grid = values.reshape(height, width).astype(np.float64) / 257.0
    valid = grid > 0
    return DepthMap(np.where(valid, grid, 0.0), valid)
