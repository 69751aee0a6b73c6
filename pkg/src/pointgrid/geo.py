"""Core spatial types: regular grids, point clouds, rasters, patch windows, file I/O.

Conventions fixed here and relied on everywhere else:

* Grid cells are half-open squares ``[origin + i*cell, origin + (i+1)*cell)``,
  indexed by ``(row, col)`` with row 0 at the grid's *minimum* y.  Flat cell ids
  are ``row * ncols + col``.
* Raster arrays are stored row-major with row 0 = minimum y.  The ESRI ASCII
  format stores the maximum-y row first; the flip happens in :func:`read_raster`
  / :func:`write_raster` and nowhere else.
* The nodata sentinel in files is -9999.  In memory, nodata cells are carried
  verbatim in the value array and excluded from metric sums by the callers.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

NODATA = -9999.0

#: Flat cell id returned for points beyond the grid extent.
OUTSIDE = -1


class GeoError(Exception):
    """Base class for spatial-layer failures."""


class ParseError(GeoError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


class WindowOutOfBounds(GeoError):
    """A requested patch window crosses the grid or region boundary."""


@dataclass(frozen=True)
class GridSpec:
    """Georeferenced regular 2D grid; ``(origin_x, origin_y)`` is the lower-left corner."""

    origin_x: float
    origin_y: float
    cell_size: float
    ncols: int
    nrows: int

    def __post_init__(self):
        if not (self.cell_size > 0):
            raise ValueError(f"cell_size must be > 0, got {self.cell_size}")
        if self.ncols < 1 or self.nrows < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.ncols}x{self.nrows}")

    @property
    def ncells(self) -> int:
        return self.ncols * self.nrows

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) in meters."""
        return (
            self.origin_x,
            self.origin_y,
            self.origin_x + self.ncols * self.cell_size,
            self.origin_y + self.nrows * self.cell_size,
        )

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Arrays of x (ncols,) and y (nrows,) cell-center coordinates."""
        xs = self.origin_x + (np.arange(self.ncols) + 0.5) * self.cell_size
        ys = self.origin_y + (np.arange(self.nrows) + 0.5) * self.cell_size
        return xs, ys


def cell_index(xy, spec: GridSpec):
    """Flat cell id(s) for 2D point(s), or OUTSIDE (-1) beyond the extent.

    ``xy`` may be a single (x, y) pair or an (N, 2) array; the return matches
    (int or int64 array).  Membership follows the half-open cell rule, so a
    point exactly on the upper/right boundary is OUTSIDE.
    """
    arr = np.asarray(xy, dtype=np.float64)
    single = arr.ndim == 1
    pts = arr.reshape(-1, 2)
    col = np.floor((pts[:, 0] - spec.origin_x) / spec.cell_size).astype(np.int64)
    row = np.floor((pts[:, 1] - spec.origin_y) / spec.cell_size).astype(np.int64)
    ids = row * spec.ncols + col
    bad = (col < 0) | (col >= spec.ncols) | (row < 0) | (row >= spec.nrows)
    ids[bad] = OUTSIDE
    if single:
        return int(ids[0])
    return ids


def cell_rowcol(xy, spec: GridSpec):
    """(row, col) for a single point, or None when outside the extent."""
    flat = cell_index(xy, spec)
    if flat == OUTSIDE:
        return None
    return divmod(flat, spec.ncols)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PointCloud:
    """N points with metric (x, y, z) coordinates and optional per-point attributes."""

    coords: np.ndarray
    attrs: np.ndarray | None = None

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(coords)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "coords", _readonly(coords))
        if self.attrs is not None:
            attrs = np.asarray(self.attrs, dtype=np.float64).reshape(len(coords), -1)
            object.__setattr__(self, "attrs", _readonly(attrs))

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def xy(self) -> np.ndarray:
        return self.coords[:, :2]

    def select(self, mask) -> "PointCloud":
        attrs = self.attrs[mask] if self.attrs is not None else None
        return PointCloud(self.coords[mask], attrs)

    def translated(self, dx: float, dy: float) -> "PointCloud":
        c = self.coords.copy()
        c[:, 0] += dx
        c[:, 1] += dy
        return PointCloud(c, self.attrs)


def empty_cloud() -> PointCloud:
    return PointCloud(np.empty((0, 3)))


@dataclass(frozen=True)
class Raster:
    """A value plane over a GridSpec; row 0 of ``values`` is the minimum-y row."""

    spec: GridSpec
    values: np.ndarray
    nodata: float = NODATA

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.spec.nrows, self.spec.ncols):
            raise ValueError(
                f"raster shape {v.shape} does not match grid "
                f"{self.spec.nrows}x{self.spec.ncols}"
            )
        object.__setattr__(self, "values", _readonly(v))

    @property
    def valid_mask(self) -> np.ndarray:
        return self.values != self.nodata

    def with_values(self, values: np.ndarray) -> "Raster":
        return Raster(self.spec, values, self.nodata)


def constant_raster(spec: GridSpec, value: float = 0.0) -> Raster:
    return Raster(spec, np.full((spec.nrows, spec.ncols), value))


@dataclass(frozen=True)
class SceneSample:
    """One training/inference patch in patch-local coordinates.

    All rasters share one GridSpec whose origin is (0, 0); ``window_origin``
    is the world position of that local origin, so world coordinates are
    recovered as ``local + window_origin``.
    """

    points: PointCloud
    gt_height: Raster
    gt_footprint: Raster | None = None
    image: np.ndarray | None = None
    window_origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        spec = self.gt_height.spec
        if self.gt_footprint is not None and self.gt_footprint.spec != spec:
            raise ValueError("sample rasters must share one GridSpec")
        xmax = spec.ncols * spec.cell_size
        ymax = spec.nrows * spec.cell_size
        xy = self.points.xy
        if len(self.points) and (
            xy[:, 0].min() < 0 or xy[:, 0].max() >= xmax or xy[:, 1].min() < 0 or xy[:, 1].max() >= ymax
        ):
            raise ValueError("sample points must lie inside the patch extent")


def extract_patch(
    points: PointCloud,
    rasters: list[Raster],
    center: tuple[float, float],
    size: int,
    image: np.ndarray | None = None,
) -> SceneSample:
    """Cut a size x size cell window around ``center`` out of points and rasters.

    ``rasters`` holds the ground-truth height map first and optionally the
    footprint mask second.  Points are clipped with the half-open window rule
    and shifted into patch-local coordinates.  Raises WindowOutOfBounds when
    the snapped window does not lie fully inside the raster extent.
    """
    if not rasters:
        raise ValueError("extract_patch needs at least the height raster")
    if len(rasters) > 2:
        raise ValueError("extract_patch takes [height] or [height, footprint]")
    spec = rasters[0].spec
    for r in rasters[1:]:
        if r.spec != spec:
            raise ValueError("all rasters must share one GridSpec")

    # Snap the window to the cell grid: nearest cell corner to (center - size/2).
    col0 = int(np.floor((center[0] - spec.origin_x) / spec.cell_size - size / 2 + 0.5))
    row0 = int(np.floor((center[1] - spec.origin_y) / spec.cell_size - size / 2 + 0.5))
    if col0 < 0 or row0 < 0 or col0 + size > spec.ncols or row0 + size > spec.nrows:
        raise WindowOutOfBounds(
            f"window cols [{col0}, {col0 + size}) rows [{row0}, {row0 + size}) "
            f"exceeds grid {spec.ncols}x{spec.nrows}"
        )

    x0 = spec.origin_x + col0 * spec.cell_size
    y0 = spec.origin_y + row0 * spec.cell_size
    side = size * spec.cell_size
    xy = points.xy
    inside = (xy[:, 0] >= x0) & (xy[:, 0] < x0 + side) & (xy[:, 1] >= y0) & (xy[:, 1] < y0 + side)
    local = points.select(inside).translated(-x0, -y0)

    patch_spec = GridSpec(0.0, 0.0, spec.cell_size, size, size)
    cropped = [
        Raster(patch_spec, r.values[row0 : row0 + size, col0 : col0 + size], r.nodata)
        for r in rasters
    ]
    chip = None
    if image is not None:
        chip = np.ascontiguousarray(image[:, row0 : row0 + size, col0 : col0 + size])
    return SceneSample(
        points=local,
        gt_height=cropped[0],
        gt_footprint=cropped[1] if len(cropped) > 1 else None,
        image=chip,
        window_origin=(x0, y0),
    )


# ---------------------------------------------------------------------------
# File I/O.
#
# Point file: UTF-8 text, one "x y z [attrs...]" per line, '#' comments.
# Raster file: ESRI ASCII grid (ncols/nrows/xllcorner/yllcorner/cellsize/
# NODATA_value header, then nrows lines, top row = maximum y).
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    # repr gives the shortest string that round-trips the float64 exactly.
    return repr(float(v))


def write_points(path, cloud: PointCloud) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for i in range(len(cloud)):
            row = [_fmt(v) for v in cloud.coords[i]]
            if cloud.attrs is not None:
                row += [_fmt(v) for v in cloud.attrs[i]]
            fh.write(" ".join(row) + "\n")


def read_points(path) -> PointCloud:
    path = Path(path)
    coords: list[list[float]] = []
    attrs: list[list[float]] = []
    nattr = None
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            parts = stripped.split()
            if len(parts) < 3:
                raise ParseError(path, lineno, f"expected at least 3 columns, got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from None
            if nattr is None:
                nattr = len(vals) - 3
            elif len(vals) - 3 != nattr:
                raise ParseError(path, lineno, f"inconsistent column count ({len(vals)})")
            coords.append(vals[:3])
            attrs.append(vals[3:])
    coord_arr = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    attr_arr = np.asarray(attrs, dtype=np.float64).reshape(len(coord_arr), -1) if nattr else None
    return PointCloud(coord_arr, attr_arr)


_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


def write_raster(path, raster: Raster) -> None:
    path = Path(path)
    spec = raster.spec
    with path.open("w", encoding="utf-8") as fh:
        fh.write(f"ncols {spec.ncols}\n")
        fh.write(f"nrows {spec.nrows}\n")
        fh.write(f"xllcorner {_fmt(spec.origin_x)}\n")
        fh.write(f"yllcorner {_fmt(spec.origin_y)}\n")
        fh.write(f"cellsize {_fmt(spec.cell_size)}\n")
        fh.write(f"NODATA_value {_fmt(raster.nodata)}\n")
        for i in range(spec.nrows - 1, -1, -1):  # top row = maximum y
            fh.write(" ".join(_fmt(v) for v in raster.values[i]) + "\n")


def read_raster(path) -> Raster:
    path = Path(path)
    header: dict[str, float] = {}
    with path.open("r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    lineno = 0
    for key in _HEADER_KEYS:
        if lineno >= len(lines):
            raise ParseError(path, lineno + 1, f"missing header line '{key}'")
        parts = lines[lineno].split()
        lineno += 1
        if len(parts) != 2 or parts[0].lower() != key:
            raise ParseError(path, lineno, f"expected header '{key}', got {lines[lineno - 1]!r}")
        try:
            header[key] = float(parts[1])
        except ValueError:
            raise ParseError(path, lineno, f"bad header value {parts[1]!r}") from None

    ncols = int(header["ncols"])
    nrows = int(header["nrows"])
    spec = GridSpec(header["xllcorner"], header["yllcorner"], header["cellsize"], ncols, nrows)
    values = np.empty((nrows, ncols), dtype=np.float64)
    for i in range(nrows):
        if lineno >= len(lines):
            raise ParseError(path, lineno + 1, f"expected {nrows} data rows, found {i}")
        parts = lines[lineno].split()
        lineno += 1
        if len(parts) != ncols:
            raise ParseError(path, lineno, f"expected {ncols} values, got {len(parts)}")
        try:
            values[nrows - 1 - i] = [float(p) for p in parts]
        except ValueError as exc:
            raise ParseError(path, lineno, str(exc)) from None
    for extra in lines[lineno:]:
        if extra.strip():
            raise ParseError(path, lineno + 1, "trailing data after raster rows")
        lineno += 1
    return Raster(spec, values, nodata=header["nodata_value"])


def write_pgm(path, values: np.ndarray, vmax: float | None = None) -> None:
    """8-bit binary PGM preview of a 2D array, scaled to [0, vmax]; row 0 drawn at top."""
    v = np.asarray(values, dtype=np.float64)
    if vmax is None:
        vmax = float(v.max()) if v.size else 1.0
    if vmax <= 0:
        vmax = 1.0
    scaled = np.clip(v / vmax, 0.0, 1.0)
    img = (scaled[::-1] * 255).astype(np.uint8)  # flip so max-y row is on top
    with Path(path).open("wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())
