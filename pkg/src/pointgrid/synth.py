"""Seeded synthetic urban scenes: blocky buildings, facade-heavy scatterer sampling,
anisotropic noise, voids, and outliers, with exact ground-truth rasters.

Buildings are flat-roofed axis-aligned rectangles so every ground-truth value is
analytically known.  Facade points are sampled only on the two faces oriented
toward a fixed look direction (-x, -y), at roughly five times the areal density
of roofs, mimicking side-looking acquisition.  All randomness flows through one
`numpy.random.Generator` (PCG64) seeded from the config, so a scene is a pure
function of its config.
"""

from __future__ import annotations

import colorsys
import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geo import GridSpec, PointCloud, Raster, read_points, read_raster, write_points, write_raster


class PlacementFailure(Exception):
    """Could not place the requested number of buildings without overlap."""


@dataclass(frozen=True)
class SceneConfig:
    extent: tuple[float, float] = (1000.0, 1000.0)
    cell_size: float = 1.0
    n_buildings: int = 100
    height_range: tuple[float, float] = (6.0, 36.0)
    footprint_range: tuple[float, float] = (12.0, 40.0)
    roof_density: float = 0.25      # points per m² of roof
    facade_density: float = 1.25    # points per m² of facade (~5x roof)
    ground_density: float = 0.12    # points per m² of open ground
    z_noise_sigma: float = 3.0      # vertical noise, ~10x the planimetric noise
    xy_noise_sigma: float = 0.3
    void_fraction: float = 0.3
    outlier_fraction: float = 0.02
    terrain_amplitude: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.void_fraction <= 1.0):
            raise ValueError(f"void_fraction must be in [0, 1], got {self.void_fraction}")
        if not (0.0 <= self.outlier_fraction <= 1.0):
            raise ValueError(f"outlier_fraction must be in [0, 1], got {self.outlier_fraction}")
        if self.cell_size <= 0:
            raise ValueError("cell_size must be > 0")

    def grid(self) -> GridSpec:
        ncols = int(round(self.extent[0] / self.cell_size))
        nrows = int(round(self.extent[1] / self.cell_size))
        return GridSpec(0.0, 0.0, self.cell_size, ncols, nrows)


@dataclass(frozen=True)
class Building:
    x0: float
    y0: float
    x1: float
    y1: float
    height: float
    base: float  # terrain elevation of the leveled pad the building sits on

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def contains_xy(self, x, y):
        return (x >= self.x0) & (x < self.x1) & (y >= self.y0) & (y < self.y1)


@dataclass(frozen=True)
class CorruptionStats:
    n_in: int
    n_voided: int           # total points removed by void discs (ground included)
    n_voided_building: int  # the subset that sat on building footprints
    n_outliers: int

    @property
    def n_out(self) -> int:
        return self.n_in - self.n_voided


@dataclass(frozen=True)
class Scene:
    points: PointCloud
    gt_height: Raster
    gt_footprint: Raster
    dtm: Raster
    instances: Raster
    buildings: tuple[Building, ...] = ()
    config: SceneConfig | None = None
    corruption: CorruptionStats | None = None
    image: np.ndarray | None = None

    @property
    def seed(self) -> int:
        return self.config.seed if self.config is not None else 0


class _Terrain:
    """Smooth low-frequency elevation surface, point-evaluable."""

    def __init__(self, cfg: SceneConfig, rng: np.random.Generator):
        self.amp = cfg.terrain_amplitude
        self.wavelengths = rng.uniform(250.0, 600.0, size=(3, 2))
        self.phases = rng.uniform(0.0, 2.0 * np.pi, size=(3, 2))
        self.weights = np.array([0.55, 0.3, 0.15])

    def __call__(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        z = np.zeros(np.broadcast(x, y).shape)
        for k in range(3):
            z = z + self.weights[k] * (
                np.sin(2 * np.pi * x / self.wavelengths[k, 0] + self.phases[k, 0])
                * np.cos(2 * np.pi * y / self.wavelengths[k, 1] + self.phases[k, 1])
            )
        return self.amp * z


def _place_buildings(cfg: SceneConfig, rng: np.random.Generator, terrain: _Terrain) -> list[Building]:
    placed: list[Building] = []
    margin = 2.0
    gap = 3.0
    attempts = 0
    max_attempts = 10 * cfg.n_buildings
    while len(placed) < cfg.n_buildings:
        if attempts >= max_attempts:
            raise PlacementFailure(
                f"placed {len(placed)}/{cfg.n_buildings} buildings in {max_attempts} attempts"
            )
        attempts += 1
        w = rng.uniform(*cfg.footprint_range)
        d = rng.uniform(*cfg.footprint_range)
        x0 = rng.uniform(margin, cfg.extent[0] - margin - w)
        y0 = rng.uniform(margin, cfg.extent[1] - margin - d)
        h = rng.uniform(*cfg.height_range)
        overlaps = any(
            x0 < b.x1 + gap and x0 + w > b.x0 - gap and y0 < b.y1 + gap and y0 + d > b.y0 - gap
            for b in placed
        )
        if overlaps:
            continue
        base = float(terrain(x0 + w / 2, y0 + d / 2))
        placed.append(Building(x0, y0, x0 + w, y0 + d, h, base))
    return placed


def _rasterize_ground_truth(cfg: SceneConfig, buildings: list[Building], terrain: _Terrain):
    spec = cfg.grid()
    xs, ys = spec.cell_centers()
    xg, yg = np.meshgrid(xs, ys)
    height = np.zeros((spec.nrows, spec.ncols))
    labels = np.zeros((spec.nrows, spec.ncols))
    for i, b in enumerate(buildings, start=1):
        inside = b.contains_xy(xg, yg)
        height[inside] = b.height
        labels[inside] = i
    footprint = (labels > 0).astype(np.float64)
    dtm = terrain(xg, yg) if cfg.terrain_amplitude != 0 else np.zeros_like(height)
    return (
        Raster(spec, height),
        Raster(spec, footprint),
        Raster(spec, np.asarray(dtm, dtype=np.float64)),
        Raster(spec, labels),
    )


def _sample_clean_points(
    cfg: SceneConfig, buildings: list[Building], terrain: _Terrain, rng: np.random.Generator
) -> np.ndarray:
    chunks: list[np.ndarray] = []

    # Ground returns everywhere except under buildings.
    n_ground = rng.poisson(cfg.ground_density * cfg.extent[0] * cfg.extent[1])
    if n_ground:
        gx = rng.uniform(0.0, cfg.extent[0], n_ground)
        gy = rng.uniform(0.0, cfg.extent[1], n_ground)
        covered = np.zeros(n_ground, dtype=bool)
        for b in buildings:
            covered |= b.contains_xy(gx, gy)
        gx, gy = gx[~covered], gy[~covered]
        chunks.append(np.column_stack([gx, gy, terrain(gx, gy)]))

    look_faces = ("west", "south")  # faces lit by the fixed (-1, -1) look direction
    for b in buildings:
        roof_top = b.base + b.height
        n_roof = rng.poisson(cfg.roof_density * b.area)
        if n_roof:
            rx = rng.uniform(b.x0, b.x1, n_roof)
            ry = rng.uniform(b.y0, b.y1, n_roof)
            chunks.append(np.column_stack([rx, ry, np.full(n_roof, roof_top)]))
        for face in look_faces:
            length = (b.y1 - b.y0) if face == "west" else (b.x1 - b.x0)
            n_fac = rng.poisson(cfg.facade_density * length * b.height)
            if not n_fac:
                continue
            t = rng.uniform(0.0, length, n_fac)
            fz = rng.uniform(b.base, roof_top, n_fac)
            if face == "west":
                chunks.append(np.column_stack([np.full(n_fac, b.x0), b.y0 + t, fz]))
            else:
                chunks.append(np.column_stack([b.x0 + t, np.full(n_fac, b.y0), fz]))

    if not chunks:
        return np.empty((0, 3))
    return np.concatenate(chunks, axis=0)


def corrupt_points(
    points: PointCloud,
    cfg: SceneConfig,
    rng: np.random.Generator,
    building_mask: Raster | None = None,
) -> tuple[PointCloud, CorruptionStats]:
    """Degrade a clean cloud: anisotropic noise, void discs, uniform-z outliers.

    Void discs are centered on randomly chosen building-area points (cells where
    ``building_mask`` is 1) and grown until ``void_fraction`` of the building-area
    points are gone; every point inside a disc is removed, ground included.
    Outliers keep their (x, y) but get z redrawn uniformly over the cloud's z range.
    Returns the corrupted cloud plus the removal/replacement counts.
    """
    coords = points.coords.copy()
    n_in = len(coords)
    if n_in == 0:
        return points, CorruptionStats(0, 0, 0, 0)

    if cfg.xy_noise_sigma > 0:
        coords[:, 0] += rng.normal(0.0, cfg.xy_noise_sigma, n_in)
        coords[:, 1] += rng.normal(0.0, cfg.xy_noise_sigma, n_in)
    if cfg.z_noise_sigma > 0:
        coords[:, 2] += rng.normal(0.0, cfg.z_noise_sigma, n_in)

    n_voided = 0
    n_voided_building = 0
    if cfg.void_fraction > 0 and building_mask is not None:
        from .geo import OUTSIDE, cell_index

        ids = cell_index(coords[:, :2], building_mask.spec)
        flat = building_mask.values.ravel()
        on_building = np.zeros(n_in, dtype=bool)
        ok = ids != OUTSIDE
        on_building[ok] = flat[ids[ok]] > 0
        target = int(round(cfg.void_fraction * int(on_building.sum())))
        alive = np.ones(n_in, dtype=bool)
        while n_voided_building < target:
            candidates = np.flatnonzero(alive & on_building)
            if candidates.size == 0:
                break
            center = coords[rng.choice(candidates), :2]
            radius = rng.uniform(4.0, 12.0)
            d2 = (coords[:, 0] - center[0]) ** 2 + (coords[:, 1] - center[1]) ** 2
            hit = alive & (d2 <= radius * radius)
            n_voided += int(hit.sum())
            n_voided_building += int((hit & on_building).sum())
            alive &= ~hit
        coords = coords[alive]

    n_remaining = len(coords)
    n_outliers = int(round(cfg.outlier_fraction * n_remaining))
    if n_outliers and n_remaining:
        idx = rng.choice(n_remaining, size=n_outliers, replace=False)
        z_lo, z_hi = coords[:, 2].min(), coords[:, 2].max()
        coords[idx, 2] = rng.uniform(z_lo, z_hi, n_outliers)

    return PointCloud(coords), CorruptionStats(n_in, n_voided, n_voided_building, n_outliers)


def generate_scene(cfg: SceneConfig) -> Scene:
    """Build a complete synthetic scene; deterministic given ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    terrain = _Terrain(cfg, rng)
    buildings = _place_buildings(cfg, rng, terrain)
    gt_height, gt_footprint, dtm, instances = _rasterize_ground_truth(cfg, buildings, terrain)
    clean = _sample_clean_points(cfg, buildings, terrain, rng)
    cloud, stats = corrupt_points(PointCloud(clean), cfg, rng, building_mask=gt_footprint)

    # Clip to the scene extent: noise may push points slightly across the border.
    xy = cloud.xy
    inside = (
        (xy[:, 0] >= 0.0)
        & (xy[:, 0] < cfg.extent[0])
        & (xy[:, 1] >= 0.0)
        & (xy[:, 1] < cfg.extent[1])
    )
    cloud = cloud.select(inside)

    return Scene(
        points=cloud,
        gt_height=gt_height,
        gt_footprint=gt_footprint,
        dtm=dtm,
        instances=instances,
        buildings=tuple(buildings),
        config=cfg,
        corruption=stats,
    )


def render_synthetic_image(scene: Scene) -> np.ndarray:
    """Deterministic pseudo-optical chip (3, nrows, ncols) in [0, 1].

    Building footprints are shaded by a per-instance hue; open ground is a gray
    texture with low-amplitude noise.  Enough signal for an image branch to
    recover footprint semantics, nothing more.
    """
    labels = scene.instances.values
    nrows, ncols = labels.shape
    rng = np.random.default_rng(scene.seed + 7919)
    ground = 0.35 + 0.03 * rng.standard_normal((nrows, ncols))
    img = np.repeat(ground[None, :, :], 3, axis=0)
    n_inst = int(labels.max())
    for i in range(1, n_inst + 1):
        hue = (0.61803398875 * i) % 1.0
        r, g, b = colorsys.hsv_to_rgb(hue, 0.55, 0.75)
        mask = labels == i
        img[0][mask] = r
        img[1][mask] = g
        img[2][mask] = b
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Scene directories: the on-disk layout emitted by the `synth` CLI subcommand.
# ---------------------------------------------------------------------------

_SCENE_FILES = {
    "points": "points.txt",
    "gt_height": "gt_height.asc",
    "gt_footprint": "gt_footprint.asc",
    "dtm": "dtm.asc",
    "instances": "instances.asc",
    "image": "image.ppm",
    "config": "scene.cfg",
}


def config_to_text(cfg: SceneConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            lines.append(f"{f.name}={','.join(repr(float(x)) for x in v)}")
        else:
            lines.append(f"{f.name}={v!r}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> SceneConfig:
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(SceneConfig)}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in fields:
            raise ValueError(f"unknown scene config key {key!r} (line {lineno})")
        if "," in raw:
            kwargs[key] = tuple(float(x) for x in raw.split(","))
        elif key in ("n_buildings", "seed"):
            kwargs[key] = int(raw)
        else:
            kwargs[key] = float(raw)
    return SceneConfig(**kwargs)


def write_ppm(path, img: np.ndarray) -> None:
    """Binary P6 image from a (3, h, w) float array in [0, 1]; row 0 drawn at bottom."""
    arr = (np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = arr.shape[1], arr.shape[2]
    pixels = arr.transpose(1, 2, 0)[::-1]  # flip so max-y row is written first
    with Path(path).open("wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(pixels.tobytes())


def read_ppm(path) -> np.ndarray:
    with Path(path).open("rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM file")
    w, h = (int(t) for t in parts[1].split())
    raw = np.frombuffer(parts[3], dtype=np.uint8, count=h * w * 3)
    pixels = raw.reshape(h, w, 3)[::-1].transpose(2, 0, 1)
    return pixels.astype(np.float64) / 255.0


def write_scene_dir(path, scene: Scene, with_image: bool = True) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_points(path / _SCENE_FILES["points"], scene.points)
    write_raster(path / _SCENE_FILES["gt_height"], scene.gt_height)
    write_raster(path / _SCENE_FILES["gt_footprint"], scene.gt_footprint)
    write_raster(path / _SCENE_FILES["dtm"], scene.dtm)
    write_raster(path / _SCENE_FILES["instances"], scene.instances)
    if with_image:
        img = scene.image if scene.image is not None else render_synthetic_image(scene)
        write_ppm(path / _SCENE_FILES["image"], img)
    if scene.config is not None:
        (path / _SCENE_FILES["config"]).write_text(config_to_text(scene.config))


def load_scene_dir(path) -> Scene:
    path = Path(path)
    cfg = None
    cfg_path = path / _SCENE_FILES["config"]
    if cfg_path.exists():
        cfg = config_from_text(cfg_path.read_text())
    img_path = path / _SCENE_FILES["image"]
    return Scene(
        points=read_points(path / _SCENE_FILES["points"]),
        gt_height=read_raster(path / _SCENE_FILES["gt_height"]),
        gt_footprint=read_raster(path / _SCENE_FILES["gt_footprint"]),
        dtm=read_raster(path / _SCENE_FILES["dtm"]),
        instances=read_raster(path / _SCENE_FILES["instances"]),
        config=cfg,
        image=read_ppm(img_path) if img_path.exists() else None,
    )
