"""Metrics over three region tiers, classical interpolation baselines, and reports.

The baselines realize the pre-learning approach: rasterize scattered points by
per-cell maximum elevation, fill the empty cells by interpolation (Delaunay
linear or inverse-distance weighting), subtract the terrain model, clamp at
zero.  They need a DTM at inference time; the network path takes none.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.interpolate import LinearNDInterpolator, NearestNDInterpolator
from scipy.spatial import QhullError, cKDTree

from .geo import GridSpec, PointCloud, Raster, cell_index, write_pgm
from .model import HeightNet
from .synth import Scene


class EmptySelection(Exception):
    pass


class InsufficientPoints(Exception):
    pass


def _select(pred: Raster, gt: Raster, mask: Raster | None) -> np.ndarray:
    if pred.spec != gt.spec:
        raise ValueError("pred/gt rasters must share one GridSpec")
    valid = pred.valid_mask & gt.valid_mask
    if mask is not None:
        if mask.spec != pred.spec:
            raise ValueError("mask raster must share the pred/gt GridSpec")
        valid &= mask.values > 0.5
    if not valid.any():
        raise EmptySelection("no valid cells in the selection")
    return valid


def mae(pred: Raster, gt: Raster, mask: Raster | None = None) -> float:
    sel = _select(pred, gt, mask)
    return float(np.mean(np.abs(pred.values[sel] - gt.values[sel])))


def rmse(pred: Raster, gt: Raster, mask: Raster | None = None) -> float:
    sel = _select(pred, gt, mask)
    return float(np.sqrt(np.mean((pred.values[sel] - gt.values[sel]) ** 2)))


def medae(pred: Raster, gt: Raster, mask: Raster | None = None) -> float:
    # Even-count medians average the two middle values (numpy convention).
    sel = _select(pred, gt, mask)
    return float(np.median(np.abs(pred.values[sel] - gt.values[sel])))


def instance_metrics(pred: Raster, gt: Raster, instances: Raster) -> dict[str, float]:
    """Per-building median heights compared, then aggregated across buildings."""
    if instances.spec != pred.spec:
        raise ValueError("instance raster must share the pred/gt GridSpec")
    labels = instances.values
    ids = np.unique(labels[labels > 0])
    if ids.size == 0:
        raise EmptySelection("no building instances")
    errs = []
    for i in ids:
        cells = labels == i
        errs.append(
            abs(float(np.median(pred.values[cells])) - float(np.median(gt.values[cells])))
        )
    errs = np.asarray(errs)
    return {
        "mae": float(np.mean(errs)),
        "rmse": float(np.sqrt(np.mean(errs**2))),
        "medae": float(np.median(errs)),
        "count": int(ids.size),
    }


@dataclass
class MetricReport:
    """MAE/RMSE/MedAE over the overall area, building area, and building instances."""

    overall: dict[str, float]
    building: dict[str, float] | None
    instance: dict[str, float] | None
    overall_pixels: int
    building_pixels: int

    ROWS = ("overall", "building", "instance")
    COLS = ("mae", "rmse", "medae")

    def row(self, name: str) -> dict[str, float] | None:
        return getattr(self, name)

    def to_text(self) -> str:
        # Text values go to 0.01 m; the CSV keeps full precision.
        lines = [f"{'region':<10}{'MAE':>8}{'RMSE':>8}{'MedAE':>8}   pixels/instances"]
        for name in self.ROWS:
            r = self.row(name)
            if r is None:
                continue
            extra = {
                "overall": self.overall_pixels,
                "building": self.building_pixels,
                "instance": r.get("count", 0) if name == "instance" else 0,
            }[name]
            lines.append(
                f"{name:<10}"
                + "".join(f"{r[c]:>8.2f}" for c in self.COLS)
                + f"   {extra}"
            )
        return "\n".join(lines)

    def to_csv(self) -> str:
        lines = ["region,mae,rmse,medae,count"]
        for name in self.ROWS:
            r = self.row(name)
            if r is None:
                continue
            count = {
                "overall": self.overall_pixels,
                "building": self.building_pixels,
                "instance": r.get("count", 0),
            }[name]
            lines.append(f"{name},{r['mae']!r},{r['rmse']!r},{r['medae']!r},{count}")
        return "\n".join(lines) + "\n"


def compute_report(
    pred: Raster,
    gt: Raster,
    footprint: Raster | None = None,
    instances: Raster | None = None,
) -> MetricReport:
    overall = {"mae": mae(pred, gt), "rmse": rmse(pred, gt), "medae": medae(pred, gt)}
    building = None
    building_pixels = 0
    if footprint is not None:
        building = {
            "mae": mae(pred, gt, footprint),
            "rmse": rmse(pred, gt, footprint),
            "medae": medae(pred, gt, footprint),
        }
        building_pixels = int((footprint.values > 0.5).sum())
    instance = instance_metrics(pred, gt, instances) if instances is not None else None
    return MetricReport(
        overall=overall,
        building=building,
        instance=instance,
        overall_pixels=int(_select(pred, gt, None).sum()),
        building_pixels=building_pixels,
    )


# ---------------------------------------------------------------------------
# Classical baselines
# ---------------------------------------------------------------------------


def rasterize_max(points: PointCloud, spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell maximum z and the filled-cell mask."""
    surface = np.full((spec.nrows, spec.ncols), -np.inf)
    ids = cell_index(points.xy, spec)
    ok = ids >= 0
    ids = ids[ok]
    z = points.coords[ok, 2]
    if ids.size:
        order = np.argsort(ids, kind="stable")
        sid = ids[order]
        sz = z[order]
        starts = np.flatnonzero(np.r_[True, sid[1:] != sid[:-1]])
        peaks = np.maximum.reduceat(sz, starts)
        surface.reshape(-1)[sid[starts]] = peaks
    filled = np.isfinite(surface)
    return surface, filled


def _filled_centers(spec: GridSpec, filled: np.ndarray) -> np.ndarray:
    xs, ys = spec.cell_centers()
    rows, cols = np.nonzero(filled)
    return np.column_stack([xs[cols], ys[rows]])


def _check_dtm(spec: GridSpec, dtm: Raster) -> None:
    if dtm.spec != spec:
        raise ValueError("the DTM raster must share the target GridSpec")


def baseline_bilinear(points: PointCloud, spec: GridSpec, dtm: Raster) -> Raster:
    """Max-rasterize, Delaunay-linear interpolate empty cells, subtract DTM, clamp."""
    _check_dtm(spec, dtm)
    surface, filled = rasterize_max(points, spec)
    n_filled = int(filled.sum())
    if n_filled < 3:
        raise InsufficientPoints(f"bilinear interpolation needs >= 3 filled cells, got {n_filled}")
    centers = _filled_centers(spec, filled)
    values = surface[filled]
    xs, ys = spec.cell_centers()
    xg, yg = np.meshgrid(xs, ys)
    targets = np.column_stack([xg.ravel(), yg.ravel()])
    try:
        interp = LinearNDInterpolator(centers, values)
        full = interp(targets)
    except QhullError as exc:
        raise InsufficientPoints(f"degenerate filled-cell geometry: {exc}") from None
    missing = ~np.isfinite(full)
    if missing.any():  # outside the convex hull: fall back to nearest filled cell
        nearest = NearestNDInterpolator(centers, values)
        full[missing] = nearest(targets[missing])
    est = full.reshape(spec.nrows, spec.ncols) - dtm.values
    return Raster(spec, np.maximum(est, 0.0))


def baseline_idw(
    points: PointCloud, spec: GridSpec, dtm: Raster, power: float = 2.0, k: int = 12
) -> Raster:
    """Max-rasterize, inverse-distance-weight the k nearest filled cells, subtract DTM."""
    _check_dtm(spec, dtm)
    if k < 1:
        raise ValueError("k must be >= 1")
    surface, filled = rasterize_max(points, spec)
    n_filled = int(filled.sum())
    if n_filled < 1:
        raise InsufficientPoints("IDW needs at least one filled cell")
    centers = _filled_centers(spec, filled)
    values = surface[filled]
    xs, ys = spec.cell_centers()
    xg, yg = np.meshgrid(xs, ys)
    targets = np.column_stack([xg.ravel(), yg.ravel()])
    k_eff = min(k, n_filled)
    dist, idx = cKDTree(centers).query(targets, k=k_eff)
    if k_eff == 1:
        dist = dist[:, None]
        idx = idx[:, None]
    exact = dist[:, 0] == 0.0
    with np.errstate(divide="ignore"):
        w = 1.0 / dist**power
    est = np.empty(len(targets))
    est[exact] = values[idx[exact, 0]]
    rest = ~exact
    est[rest] = np.sum(w[rest] * values[idx[rest]], axis=1) / np.sum(w[rest], axis=1)
    est = est.reshape(spec.nrows, spec.ncols) - dtm.values
    return Raster(spec, np.maximum(est, 0.0))


# ---------------------------------------------------------------------------
# Analyses
# ---------------------------------------------------------------------------


def error_by_height(
    pred: Raster,
    gt: Raster,
    bin_width: float = 1.0,
    h_range: tuple[float, float] = (0.0, 30.0),
    exclude_zero: bool = True,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-bin MAE binned by ground-truth height; returns (edges, mae, counts).

    Bins are [edge, edge + width); zero-height cells are excluded by default.
    Empty bins report NaN.
    """
    sel = _select(pred, gt, None)
    g = gt.values[sel]
    e = np.abs(pred.values[sel] - gt.values[sel])
    keep = (g >= h_range[0]) & (g < h_range[1])
    if exclude_zero:
        keep &= g != 0
    g, e = g[keep], e[keep]
    edges = np.arange(h_range[0], h_range[1] + bin_width / 2, bin_width)
    n_bins = len(edges) - 1
    which = np.clip(((g - h_range[0]) / bin_width).astype(int), 0, n_bins - 1)
    counts = np.bincount(which, minlength=n_bins)
    sums = np.bincount(which, weights=e, minlength=n_bins)
    with np.errstate(invalid="ignore"):
        per_bin = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return edges, per_bin, counts


def error_by_height_csv(edges: np.ndarray, per_bin: np.ndarray, counts: np.ndarray) -> str:
    lines = ["bin_lo,bin_hi,mae,count"]
    for lo, hi, m, c in zip(edges[:-1], edges[1:], per_bin, counts):
        lines.append(f"{lo!r},{hi!r},{'' if np.isnan(m) else repr(m)},{int(c)}")
    return "\n".join(lines) + "\n"


def dump_feature_maps(net: HeightNet, points: np.ndarray, out_dir,
                      cell_size: float = 1.0, image: np.ndarray | None = None) -> list[Path]:
    """Channel-mean each refinement level's grid features to 8-bit PGM images.

    Emits one image per encoder level, the bottleneck, and each decoder level
    (2L+1 files), min-max normalized per map.  Qualitative/debugging aid.
    """
    from . import nncore as nc

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with nc.no_grad():
        out = net.forward(points, cell_size=cell_size, image=image, collect_maps=True)
    paths = []
    for i, (name, grid) in enumerate(out.feature_maps):
        mean = grid.mean(axis=0)
        lo, hi = float(mean.min()), float(mean.max())
        norm = (mean - lo) / (hi - lo) if hi > lo else np.zeros_like(mean)
        path = out_dir / f"{i:02d}_{name}.pgm"
        write_pgm(path, norm, vmax=1.0)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# Region-level scoring (network and baselines on one split rectangle)
# ---------------------------------------------------------------------------


def crop_to_rect(raster: Raster, rect: tuple[float, float, float, float]) -> Raster:
    """Cell-aligned crop of a raster to a rectangle (meters)."""
    spec = raster.spec
    c0 = int(round((rect[0] - spec.origin_x) / spec.cell_size))
    r0 = int(round((rect[1] - spec.origin_y) / spec.cell_size))
    c1 = int(round((rect[2] - spec.origin_x) / spec.cell_size))
    r1 = int(round((rect[3] - spec.origin_y) / spec.cell_size))
    if not (0 <= c0 < c1 <= spec.ncols and 0 <= r0 < r1 <= spec.nrows):
        raise ValueError(f"rect {rect} does not lie on the raster grid")
    sub = GridSpec(
        spec.origin_x + c0 * spec.cell_size,
        spec.origin_y + r0 * spec.cell_size,
        spec.cell_size,
        c1 - c0,
        r1 - r0,
    )
    return Raster(sub, raster.values[r0:r1, c0:c1], raster.nodata)


def score_region(
    scene: Scene,
    net: HeightNet,
    rect: tuple[float, float, float, float],
    stride: int | None = None,
    use_image: bool = False,
) -> tuple[Raster, MetricReport]:
    """Tile-predict one split rectangle of a scene and score it against ground truth."""
    from .infer import predict_region
    from .synth import render_synthetic_image

    gt = crop_to_rect(scene.gt_height, rect)
    footprint = crop_to_rect(scene.gt_footprint, rect)
    instances = crop_to_rect(scene.instances, rect)
    image = None
    if use_image:
        full = scene.image if scene.image is not None else render_synthetic_image(scene)
        spec = scene.gt_height.spec
        c0 = int(round((rect[0] - spec.origin_x) / spec.cell_size))
        r0 = int(round((rect[1] - spec.origin_y) / spec.cell_size))
        image = full[:, r0 : r0 + gt.spec.nrows, c0 : c0 + gt.spec.ncols]
    pred = predict_region(scene.points, net, gt.spec, stride=stride, image=image)
    return pred, compute_report(pred, gt, footprint, instances)
