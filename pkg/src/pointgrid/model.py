"""The dual-topology height network.

Data flow: a point encoder (shared per-point MLPs with repeated local pooling
onto the plane) produces paired point features Z and grid features G at full
plane resolution.  A U-Net then refines both representations jointly: on the
way down, each level runs a conv block on the grid, interpolates grid features
back to the points, sharpens them with a per-point MLP, and projects them onto
the next (half-resolution) plane, added on top of the pooled grid.  On the way
up, levels are upsampled, merged with the stored grid/point skips, and
exchanged once more between topologies, again with the point-side projection
added residually.  Cells without points thereby keep their convolutional
features at every scale while points inject detail wherever data exists.  Two
shallow conv heads decode the refined plane into a height map and (optionally)
a footprint probability map.

Grid-only ablation: with the point topology disabled all exchanges are skipped
and the network degenerates to a plain grid U-Net over the encoded plane.
An optional image branch (a small grid U-Net) produces plane-aligned features
that are added to the encoded plane before refinement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nncore as nc
from .nncore import Tensor


class EmptyPointSet(Exception):
    pass


class ResolutionUnderflow(Exception):
    pass


@dataclass(frozen=True)
class ModelConfig:
    feat_dim: int = 32          # d, width of the point/grid feature pairing
    depth: int = 6              # number of refinement levels L
    plane_size: int = 256       # cells per patch side; equals the patch size
    encoder_blocks: int = 5
    use_point_topology: bool = True
    use_aux_footprint: bool = True
    use_image_branch: bool = False
    aux_weight: float = 10.0    # loss weight on the footprint term
    channel_cap: int = 256      # per-level width doubles up to this cap
    head_width: int = 16
    z_scale: float = 100.0      # fixed elevation normalization (meters)

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.aux_weight < 0:
            raise ValueError("aux_weight must be >= 0")
        if self.plane_size % (1 << self.depth):
            raise ValueError(
                f"plane_size {self.plane_size} not divisible by 2^depth ({1 << self.depth})"
            )

    def level_channels(self) -> list[int]:
        """Grid width per encoder level, plus the bottleneck width last."""
        return [min(self.feat_dim * (1 << l), self.channel_cap) for l in range(self.depth + 1)]


@dataclass
class FeatureField:
    """Paired features at one pyramid level; coords are continuous cell units."""

    point_feats: Tensor | None
    grid_feats: Tensor
    coords: np.ndarray  # (N, 2) as (col, row), cell-center units of this level
    cells: np.ndarray   # (N,) flat cell ids of this level
    level: int
    side: int


@dataclass
class ModelOutput:
    height: Tensor                 # (1, S, S)
    footprint: Tensor | None       # (1, S, S) probabilities
    feature_maps: list[tuple[str, np.ndarray]] | None = None


def _image_levels(plane_size: int) -> int:
    # 6-level image pyramid, clamped so the bottleneck stays at least 4 cells.
    most = int(np.log2(plane_size)) - 2
    return max(1, min(6, most))


def _image_widths(levels: int) -> list[int]:
    return [min(16 << l, 64) for l in range(levels + 1)]


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    """Fan-in-scaled normal init for all weights, zeros for biases."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def lin(name: str, cin: int, cout: int):
        w = rng.standard_normal((cin, cout)) / np.sqrt(cin)
        params[f"{name}.W"] = Tensor(w, requires_grad=True, dtype=dtype)
        params[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True, dtype=dtype)

    def conv(name: str, cin: int, cout: int, k: int):
        w = rng.standard_normal((cout, cin, k, k)) / np.sqrt(cin * k * k)
        params[f"{name}.W"] = Tensor(w, requires_grad=True, dtype=dtype)
        params[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True, dtype=dtype)

    d = cfg.feat_dim
    lin("enc.in", 3, d)
    for i in range(cfg.encoder_blocks):
        lin(f"enc.block{i}", 2 * d, d)
    lin("enc.out", d, d)

    if cfg.use_image_branch:
        li = _image_levels(cfg.plane_size)
        widths = _image_widths(li)
        for l in range(li):
            conv(f"img.enc{l}.conv", 3 if l == 0 else widths[l - 1], widths[l], 3)
        conv("img.bott.conv", widths[li - 1], widths[li], 3)
        for l in range(li):
            up = widths[li] if l == li - 1 else widths[l + 1]
            conv(f"img.dec{l}.fuse", up + widths[l], widths[l], 1)
            conv(f"img.dec{l}.conv", widths[l], widths[l], 3)
        conv("img.out", widths[0], d, 1)

    chans = cfg.level_channels()
    for l in range(cfg.depth):
        conv(f"unet.enc{l}.conv", d if l == 0 else chans[l - 1], chans[l], 3)
        if cfg.use_point_topology:
            lin(f"unet.enc{l}.mlp", chans[l], chans[l])
    conv("unet.bott.conv", chans[cfg.depth - 1], chans[cfg.depth], 3)
    for l in range(cfg.depth):
        up = chans[cfg.depth] if l == cfg.depth - 1 else chans[l + 1]
        conv(f"unet.dec{l}.fuse", up + chans[l], chans[l], 1)
        conv(f"unet.dec{l}.conv", chans[l], chans[l], 3)
        if cfg.use_point_topology:
            lin(f"unet.dec{l}.mlp", 2 * chans[l], chans[l])

    conv("head.h.conv1", d, cfg.head_width, 3)
    conv("head.h.conv2", cfg.head_width, 1, 1)
    if cfg.use_aux_footprint:
        conv("head.a.conv1", d, cfg.head_width, 3)
        conv("head.a.conv2", cfg.head_width, 1, 1)
    return params


def count_params(params: dict[str, Tensor]) -> int:
    return sum(p.size for p in params.values())


def grid_to_point(field: FeatureField) -> Tensor:
    """Interpolate grid features back to the field's point locations."""
    return nc.bilinear_gather(field.grid_feats, field.coords)


def point_to_grid(point_feats: Tensor, W: Tensor, b: Tensor, cells: np.ndarray, side: int) -> Tensor:
    """Per-point MLP, then mean projection onto a side x side plane."""
    zt = nc.relu(nc.linear(point_feats, W, b))
    return nc.rows_to_grid(nc.scatter_mean(zt, cells, side * side), side, side)


class HeightNet:
    """Dual-topology network instance: config plus parameter tensors."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32,
                 params: dict[str, Tensor] | None = None):
        if cfg.plane_size >> cfg.depth < 4:
            raise ResolutionUnderflow(
                f"plane {cfg.plane_size} over {cfg.depth} levels bottoms out below 4 cells"
            )
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params = params if params is not None else init_params(cfg, seed, dtype)

    # -- geometry -------------------------------------------------------------

    def _level_geometry(self, xy_cells: np.ndarray, level: int):
        """(coords, cells) of raw cell-unit point positions at a pyramid level."""
        side = self.cfg.plane_size >> level
        pos = xy_cells / (1 << level)
        col = np.floor(pos[:, 0]).astype(np.int64)
        row = np.floor(pos[:, 1]).astype(np.int64)
        inside = (col >= 0) & (col < side) & (row >= 0) & (row < side)
        cells = np.where(inside, row * side + col, nc.OUTSIDE)
        coords = pos - 0.5
        return coords, cells, side

    # -- stages ----------------------------------------------------------------

    def encode_points(self, points: np.ndarray, cell_size: float = 1.0) -> FeatureField:
        """Point encoder producing the level-0 feature field (Z and G paired)."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if pts.shape[0] == 0:
            raise EmptyPointSet("encode_points needs at least one point")
        # Canonical ordering makes scatter sums independent of input order.
        pts = pts[np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))]

        s = self.cfg.plane_size
        xy_cells = pts[:, :2] / cell_size
        coords0, cells0, side0 = self._level_geometry(xy_cells, 0)
        if (cells0 == nc.OUTSIDE).any():
            raise ValueError("encode_points: some points fall outside the patch plane")

        norm = np.column_stack(
            [
                pts[:, 0] / (s * cell_size),
                pts[:, 1] / (s * cell_size),
                pts[:, 2] / self.cfg.z_scale,
            ]
        ).astype(self.dtype)
        p = self.params
        h = nc.relu(nc.linear(Tensor(norm), p["enc.in.W"], p["enc.in.b"]))
        m0 = side0 * side0
        for i in range(self.cfg.encoder_blocks):
            pooled = nc.take_rows(nc.scatter_mean(h, cells0, m0), cells0)
            h = nc.relu(
                nc.linear(nc.concat([h, pooled], 1), p[f"enc.block{i}.W"], p[f"enc.block{i}.b"])
            )
        z = nc.linear(h, p["enc.out.W"], p["enc.out.b"])
        grid = nc.rows_to_grid(nc.scatter_mean(z, cells0, m0), side0, side0)
        return FeatureField(z, grid, coords0, cells0, level=0, side=side0)

    def encode_image(self, image: np.ndarray) -> Tensor:
        """Small grid U-Net over the (3, S, S) chip, producing d-channel features."""
        s = self.cfg.plane_size
        image = np.asarray(image)
        if image.shape != (3, s, s):
            raise nc.ShapeMismatch(f"image chip {image.shape} does not match plane {(3, s, s)}")
        p = self.params
        li = _image_levels(s)
        g = Tensor(image.astype(self.dtype))
        skips = []
        for l in range(li):
            g = nc.relu(nc.conv2d(g, p[f"img.enc{l}.conv.W"], p[f"img.enc{l}.conv.b"]))
            skips.append(g)
            g = nc.avgpool2(g)
        g = nc.relu(nc.conv2d(g, p["img.bott.conv.W"], p["img.bott.conv.b"]))
        for l in reversed(range(li)):
            g = nc.upsample2(g)
            g = nc.concat([g, skips[l]], 0)
            g = nc.relu(nc.conv2d(g, p[f"img.dec{l}.fuse.W"], p[f"img.dec{l}.fuse.b"]))
            g = nc.relu(nc.conv2d(g, p[f"img.dec{l}.conv.W"], p[f"img.dec{l}.conv.b"]))
        return nc.conv2d(g, p["img.out.W"], p["img.out.b"])

    def refine(self, field: FeatureField, collect_maps: bool = False):
        """U-Net over the paired representations; returns (G_final, maps)."""
        cfg = self.cfg
        p = self.params
        if cfg.plane_size >> cfg.depth < 4:
            raise ResolutionUnderflow(f"plane {cfg.plane_size} too small for depth {cfg.depth}")

        n = field.coords.shape[0]
        exchange = cfg.use_point_topology and n > 0
        raw = field.coords + 0.5  # back to raw cell units of level 0
        geom = [self._level_geometry(raw, l) for l in range(cfg.depth + 1)]

        maps: list[tuple[str, np.ndarray]] = []
        g = field.grid_feats
        skips: list[tuple[Tensor, Tensor | None]] = []
        for l in range(cfg.depth):
            g = nc.relu(nc.conv2d(g, p[f"unet.enc{l}.conv.W"], p[f"unet.enc{l}.conv.b"]))
            if collect_maps:
                maps.append((f"E{l}", g.data.copy()))
            if exchange:
                coords_l, _, _ = geom[l]
                zpt = nc.bilinear_gather(g, coords_l)
                zt = nc.relu(nc.linear(zpt, p[f"unet.enc{l}.mlp.W"], p[f"unet.enc{l}.mlp.b"]))
                skips.append((g, zt))
                # Residual downsample: point features project onto the coarser
                # plane on top of the pooled grid, so point-free cells keep
                # their convolutional features instead of zeroing out.
                _, cells_dn, side_dn = geom[l + 1]
                g = nc.add(
                    nc.avgpool2(g),
                    nc.rows_to_grid(
                        nc.scatter_mean(zt, cells_dn, side_dn * side_dn), side_dn, side_dn
                    ),
                )
            else:
                skips.append((g, None))
                g = nc.avgpool2(g)
        g = nc.relu(nc.conv2d(g, p["unet.bott.conv.W"], p["unet.bott.conv.b"]))
        if collect_maps:
            maps.append(("B", g.data.copy()))

        for l in reversed(range(cfg.depth)):
            skip_g, skip_z = skips[l]
            g = nc.upsample2(g)
            g = nc.concat([g, skip_g], 0)
            g = nc.relu(nc.conv2d(g, p[f"unet.dec{l}.fuse.W"], p[f"unet.dec{l}.fuse.b"]))
            g = nc.relu(nc.conv2d(g, p[f"unet.dec{l}.conv.W"], p[f"unet.dec{l}.conv.b"]))
            if exchange:
                coords_l, cells_l, side_l = geom[l]
                zpt = nc.bilinear_gather(g, coords_l)
                zc = nc.concat([zpt, skip_z], 1)
                ztd = nc.relu(nc.linear(zc, p[f"unet.dec{l}.mlp.W"], p[f"unet.dec{l}.mlp.b"]))
                # Residual projection: cells without points keep their conv features.
                g = nc.add(
                    g,
                    nc.rows_to_grid(nc.scatter_mean(ztd, cells_l, side_l * side_l), side_l, side_l),
                )
            if collect_maps:
                maps.append((f"D{l}", g.data.copy()))
        return g, (maps if collect_maps else None)

    def decode_height(self, g: Tensor) -> Tensor:
        # The final conv is linear; its output is calibrated by the fixed
        # elevation scale so meter-range targets are reachable from small weights.
        p = self.params
        hidden = nc.relu(nc.conv2d(g, p["head.h.conv1.W"], p["head.h.conv1.b"]))
        return nc.scale(
            nc.conv2d(hidden, p["head.h.conv2.W"], p["head.h.conv2.b"]), self.cfg.z_scale
        )

    def decode_footprint(self, g: Tensor) -> Tensor:
        p = self.params
        hidden = nc.relu(nc.conv2d(g, p["head.a.conv1.W"], p["head.a.conv1.b"]))
        return nc.sigmoid(nc.conv2d(hidden, p["head.a.conv2.W"], p["head.a.conv2.b"]))

    # -- full passes -------------------------------------------------------------

    def forward(
        self,
        points: np.ndarray,
        cell_size: float = 1.0,
        image: np.ndarray | None = None,
        collect_maps: bool = False,
    ) -> ModelOutput:
        """Run the network on one patch given patch-local point coordinates.

        ``points`` is (N, 3) in meters with the patch's lower-left corner at the
        origin; N may be zero (fully voided tiles), in which case the encoded
        plane is all zeros.
        """
        s = self.cfg.plane_size
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if pts.shape[0] > 0:
            field = self.encode_points(pts, cell_size)
        else:
            zeros = np.zeros((self.cfg.feat_dim, s, s), dtype=self.dtype)
            field = FeatureField(
                point_feats=None,
                grid_feats=Tensor(zeros),
                coords=np.empty((0, 2)),
                cells=np.empty(0, dtype=np.int64),
                level=0,
                side=s,
            )
        if self.cfg.use_image_branch:
            if image is None:
                raise ValueError("image branch enabled but no image chip given")
            field.grid_feats = nc.add(field.grid_feats, self.encode_image(image))

        g, maps = self.refine(field, collect_maps=collect_maps)
        height = self.decode_height(g)
        footprint = self.decode_footprint(g) if self.cfg.use_aux_footprint else None
        return ModelOutput(height, footprint, maps)

    def predict(
        self, points: np.ndarray, cell_size: float = 1.0, image: np.ndarray | None = None
    ) -> np.ndarray:
        """Forward pass without graph building; returns the raw (S, S) height map."""
        with nc.no_grad():
            out = self.forward(points, cell_size=cell_size, image=image)
        return out.height.data[0].astype(np.float64)


def loss(
    pred_h: Tensor,
    pred_a: Tensor | None,
    gt_h: np.ndarray,
    gt_a: np.ndarray | None,
    beta: float,
) -> tuple[Tensor, dict[str, float]]:
    """Total training objective: height MAE plus beta times the footprint BCE.

    Without a footprint prediction the total is exactly the height term.
    """
    l_h = nc.mae_loss(pred_h, np.asarray(gt_h).reshape(pred_h.shape))
    if pred_a is None:
        return l_h, {"l_h": l_h.item(), "l_a": float("nan"), "total": l_h.item()}
    l_a = nc.bce_loss(pred_a, np.asarray(gt_a).reshape(pred_a.shape))
    total = nc.add(l_h, nc.scale(l_a, beta))
    return total, {"l_h": l_h.item(), "l_a": l_a.item(), "total": total.item()}
