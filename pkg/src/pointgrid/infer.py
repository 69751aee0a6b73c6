"""Tiled inference: overlapping patches, tent-weight blending, non-negativity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geo import GridSpec, PointCloud, Raster
from .model import HeightNet


class CoverageGap(Exception):
    def __init__(self, uncovered: np.ndarray):
        preview = ", ".join(str(int(i)) for i in uncovered[:10])
        more = "" if uncovered.size <= 10 else f" (+{uncovered.size - 10} more)"
        super().__init__(f"{uncovered.size} cells covered by no patch: [{preview}]{more}")
        self.uncovered = uncovered


class TileError(Exception):
    def __init__(self, row0: int, col0: int, cause: Exception):
        super().__init__(f"tile at rows {row0}+, cols {col0}+: {cause}")
        self.row0 = row0
        self.col0 = col0
        self.cause = cause


@dataclass(frozen=True)
class BlendWeights:
    """Separable tent profile: 1 at the patch center, eps at the edges, > 0 everywhere."""

    w: np.ndarray
    eps: float

    @property
    def size(self) -> int:
        return self.w.shape[0]


def blend_weights(size: int, eps: float = 1e-3) -> BlendWeights:
    if size < 2:
        raise ValueError("blend_weights needs size >= 2")
    c = (size - 1) / 2.0
    t = eps + (1.0 - eps) * (1.0 - np.abs(np.arange(size) - c) / c)
    w = np.outer(t, t)
    return BlendWeights(w=w, eps=eps)


def mosaic(
    patches: list[tuple[int, int, np.ndarray]],
    weights: BlendWeights,
    region: GridSpec,
) -> Raster:
    """Blend overlapping patch predictions into one rectified region raster.

    ``patches`` holds (row_offset, col_offset, values) with offsets in region
    cells.  Per cell the result is max(0, sum(w*v) / sum(w)), computed anchored
    on the first contribution (first + sum(w*(v-first))/sum(w)), so cells where
    every patch agrees -- single coverage included -- reproduce the patch value
    bit-for-bit.
    """
    s = weights.size
    first = np.full((region.nrows, region.ncols), np.nan)
    num = np.zeros_like(first)
    den = np.zeros_like(first)
    for row0, col0, values in patches:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (s, s):
            raise ValueError(f"patch shape {values.shape} does not match weights {s}x{s}")
        if row0 < 0 or col0 < 0 or row0 + s > region.nrows or col0 + s > region.ncols:
            raise ValueError(f"patch at ({row0}, {col0}) exceeds the region grid")
        rows = slice(row0, row0 + s)
        cols = slice(col0, col0 + s)
        anchor = first[rows, cols]
        fresh = np.isnan(anchor)
        anchor[fresh] = values[fresh]
        num[rows, cols] += weights.w * (values - anchor)
        den[rows, cols] += weights.w
    uncovered = np.flatnonzero(np.isnan(first))
    if uncovered.size:
        raise CoverageGap(uncovered)
    return Raster(region, np.maximum(first + num / den, 0.0))


def tile_offsets(extent: int, size: int, stride: int) -> list[int]:
    """Start offsets covering [0, extent) with the last tile snapped inward."""
    if extent < size:
        raise ValueError(f"region extent {extent} smaller than the patch size {size}")
    offsets = list(range(0, extent - size + 1, stride))
    if offsets[-1] != extent - size:
        offsets.append(extent - size)
    return offsets


def predict_region(
    points: PointCloud,
    net: HeightNet,
    region: GridSpec,
    stride: int | None = None,
    image: np.ndarray | None = None,
    eps: float = 1e-3,
) -> Raster:
    """Tile the region, run the model per tile, and mosaic the results.

    ``points`` are in world coordinates; each tile clips its own subset with the
    half-open window rule.  ``image``, when given, must cover the whole region
    as a (3, nrows, ncols) array.  Default stride is half a patch (50% overlap).
    """
    s = net.cfg.plane_size
    if stride is None:
        stride = s // 2
    if not (1 <= stride <= s):
        raise ValueError(f"stride {stride} must be in [1, {s}]")
    cell = region.cell_size
    xy = points.xy
    patches = []
    for row0 in tile_offsets(region.nrows, s, stride):
        for col0 in tile_offsets(region.ncols, s, stride):
            x0 = region.origin_x + col0 * cell
            y0 = region.origin_y + row0 * cell
            side = s * cell
            inside = (
                (xy[:, 0] >= x0)
                & (xy[:, 0] < x0 + side)
                & (xy[:, 1] >= y0)
                & (xy[:, 1] < y0 + side)
            )
            local = points.coords[inside].copy()
            local[:, 0] -= x0
            local[:, 1] -= y0
            chip = None
            if image is not None:
                chip = image[:, row0 : row0 + s, col0 : col0 + s]
            try:
                pred = net.predict(local, cell_size=cell, image=chip)
            except Exception as exc:  # attach tile coordinates for diagnosis
                raise TileError(row0, col0, exc) from exc
            patches.append((row0, col0, pred))
    return mosaic(patches, blend_weights(s, eps), region)
