"""Patch sampling, the training loop, checkpointing, and best-model selection."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import configio
from . import nncore as nc
from .geo import SceneSample, WindowOutOfBounds, extract_patch
from .model import HeightNet, ModelConfig, loss
from .synth import Scene, render_synthetic_image


class NoValidWindow(Exception):
    pass


class NonFiniteLoss(Exception):
    def __init__(self, step: int, sample: SceneSample, breakdown: dict):
        super().__init__(f"non-finite loss at step {step}: {breakdown}")
        self.step = step
        self.sample = sample
        self.breakdown = breakdown


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 10000
    batch_size: int = 1          # patches per optimizer step (gradient accumulation)
    patch_size: int = 256        # cells; must equal the model's plane_size
    base_max_lr: float = 1e-3
    weight_decay: float = 1e-4
    cycle_len: int = 1000
    seed: int = 0
    val_interval: int = 500
    val_patches: int = 32
    train_rect: tuple[float, float, float, float] = (0.0, 0.0, 600.0, 1000.0)
    val_rect: tuple[float, float, float, float] = (600.0, 0.0, 800.0, 1000.0)
    test_rect: tuple[float, float, float, float] = (800.0, 0.0, 1000.0, 1000.0)


def default_splits(extent: tuple[float, float]):
    """60/20/20 vertical strips over a scene extent."""
    w, h = extent
    return (
        (0.0, 0.0, 0.6 * w, h),
        (0.6 * w, 0.0, 0.8 * w, h),
        (0.8 * w, 0.0, w, h),
    )


def _rects_disjoint(a, b) -> bool:
    return a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1]


def _window_in_rect(sample: SceneSample, rect) -> bool:
    x0, y0 = sample.window_origin
    spec = sample.gt_height.spec
    side = spec.ncols * spec.cell_size
    tol = 1e-9
    return (
        x0 >= rect[0] - tol
        and y0 >= rect[1] - tol
        and x0 + side <= rect[2] + tol
        and y0 + side <= rect[3] + tol
    )


def sample_patch(
    scene: Scene,
    rect: tuple[float, float, float, float],
    patch_size: int,
    rng: np.random.Generator,
    image: np.ndarray | None = None,
) -> SceneSample:
    """Draw one patch whose window lies fully inside the split rectangle.

    Patch windows are cell-aligned, so the sampler draws uniformly over the
    valid window positions (a split exactly one patch wide forces the center).
    Windows that still fail extraction are rejected, at most 100 times.
    """
    spec = scene.gt_height.spec
    cell = spec.cell_size
    tol = 1e-9
    c_min = int(np.ceil((rect[0] - spec.origin_x) / cell - tol))
    c_max = int(np.floor((rect[2] - spec.origin_x) / cell + tol)) - patch_size
    r_min = int(np.ceil((rect[1] - spec.origin_y) / cell - tol))
    r_max = int(np.floor((rect[3] - spec.origin_y) / cell + tol)) - patch_size
    c_min, r_min = max(c_min, 0), max(r_min, 0)
    c_max = min(c_max, spec.ncols - patch_size)
    r_max = min(r_max, spec.nrows - patch_size)
    if c_max < c_min or r_max < r_min:
        raise NoValidWindow(f"split {rect} cannot contain a {patch_size}-cell window")

    rasters = [scene.gt_height, scene.gt_footprint]
    for _ in range(100):
        col0 = int(rng.integers(c_min, c_max + 1))
        row0 = int(rng.integers(r_min, r_max + 1))
        center = (
            spec.origin_x + (col0 + patch_size / 2.0) * cell,
            spec.origin_y + (row0 + patch_size / 2.0) * cell,
        )
        try:
            sample = extract_patch(scene.points, rasters, center, patch_size, image=image)
        except WindowOutOfBounds:
            continue
        if _window_in_rect(sample, rect):
            return sample
    raise NoValidWindow(f"no valid {patch_size}-cell window found in {rect} after 100 tries")


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    adam: nc.AdamState | None
    step: int
    val_mae: float
    model_cfg: ModelConfig
    train_cfg: TrainConfig | None = None

    def to_net(self, dtype=np.float32) -> HeightNet:
        tensors = {
            k: nc.Tensor(v.copy(), requires_grad=True, dtype=dtype) for k, v in self.params.items()
        }
        return HeightNet(self.model_cfg, params=tensors, dtype=dtype)


def _snapshot(net: HeightNet, adam: nc.AdamState, step: int, val_mae: float,
              tcfg: TrainConfig) -> Checkpoint:
    return Checkpoint(
        params={k: p.data.copy() for k, p in net.params.items()},
        adam=nc.AdamState(
            lr=adam.lr,
            weight_decay=adam.weight_decay,
            beta1=adam.beta1,
            beta2=adam.beta2,
            eps=adam.eps,
            step_count=adam.step_count,
            m={k: v.copy() for k, v in adam.m.items()},
            v={k: v.copy() for k, v in adam.v.items()},
        ),
        step=step,
        val_mae=val_mae,
        model_cfg=net.cfg,
        train_cfg=tcfg,
    )


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    meta_parts = ["[model]", configio.to_text(ckpt.model_cfg).rstrip()]
    if ckpt.train_cfg is not None:
        meta_parts += ["[train]", configio.to_text(ckpt.train_cfg).rstrip()]
    state_lines = [f"step={ckpt.step}", f"val_mae={ckpt.val_mae!r}"]
    arrays: dict[str, np.ndarray] = {}
    for k, v in ckpt.params.items():
        arrays[f"param/{k}"] = v
    if ckpt.adam is not None:
        a = ckpt.adam
        state_lines += [
            f"adam.lr={a.lr!r}",
            f"adam.weight_decay={a.weight_decay!r}",
            f"adam.beta1={a.beta1!r}",
            f"adam.beta2={a.beta2!r}",
            f"adam.eps={a.eps!r}",
            f"adam.step_count={a.step_count}",
        ]
        for k, v in a.m.items():
            arrays[f"adam.m/{k}"] = v
        for k, v in a.v.items():
            arrays[f"adam.v/{k}"] = v
    meta_parts += ["[state]"] + state_lines
    nc.write_arrays(path, "\n".join(meta_parts) + "\n", arrays)


def load_checkpoint(path) -> Checkpoint:
    meta, arrays = nc.read_arrays(path)
    sections: dict[str, list[str]] = {}
    current = None
    for line in meta.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = []
        elif current is not None:
            sections[current].append(line)

    model_cfg = configio.from_text(ModelConfig, "\n".join(sections.get("model", [])))
    train_cfg = None
    if sections.get("train"):
        train_cfg = configio.from_text(TrainConfig, "\n".join(sections["train"]))
    state = dict(line.split("=", 1) for line in sections.get("state", []))

    params = {k[len("param/") :]: v for k, v in arrays.items() if k.startswith("param/")}
    adam = None
    if "adam.lr" in state:
        adam = nc.AdamState(
            lr=float(state["adam.lr"]),
            weight_decay=float(state["adam.weight_decay"]),
            beta1=float(state["adam.beta1"]),
            beta2=float(state["adam.beta2"]),
            eps=float(state["adam.eps"]),
            step_count=int(state["adam.step_count"]),
            m={k[len("adam.m/") :]: v for k, v in arrays.items() if k.startswith("adam.m/")},
            v={k[len("adam.v/") :]: v for k, v in arrays.items() if k.startswith("adam.v/")},
        )
    return Checkpoint(
        params=params,
        adam=adam,
        step=int(state["step"]),
        val_mae=float(state["val_mae"]),
        model_cfg=model_cfg,
        train_cfg=train_cfg,
    )


@dataclass
class TraceRow:
    step: int
    lr: float
    l_h: float
    l_a: float
    l_total: float
    val_mae: float | None = None


def write_trace(path, rows: list[TraceRow]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "L_h", "L_a", "L_total", "val_MAE"])
        for r in rows:
            w.writerow(
                [
                    r.step,
                    repr(r.lr),
                    repr(r.l_h),
                    "" if math.isnan(r.l_a) else repr(r.l_a),
                    repr(r.l_total),
                    "" if r.val_mae is None else repr(r.val_mae),
                ]
            )


def read_trace(path) -> list[TraceRow]:
    rows = []
    with Path(path).open("r", newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            rows.append(
                TraceRow(
                    step=int(rec["step"]),
                    lr=float(rec["lr"]),
                    l_h=float(rec["L_h"]),
                    l_a=float(rec["L_a"]) if rec["L_a"] else float("nan"),
                    l_total=float(rec["L_total"]),
                    val_mae=float(rec["val_MAE"]) if rec["val_MAE"] else None,
                )
            )
    return rows


@dataclass
class TrainResult:
    best: Checkpoint
    trace: list[TraceRow]


def _patch_mae(net: HeightNet, sample: SceneSample, image_branch: bool) -> float:
    pred = net.predict(
        sample.points.coords,
        cell_size=sample.gt_height.spec.cell_size,
        image=sample.image if image_branch else None,
    )
    return float(np.mean(np.abs(pred - sample.gt_height.values)))


def train(
    scene: Scene,
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    log=None,
) -> TrainResult:
    """Run the sample/forward/backward/step loop and keep the best-validation model.

    The patch sampler and the weight init draw from independent seeded streams,
    so the whole run is a pure function of (scene, mcfg, tcfg).
    """
    if tcfg.patch_size != mcfg.plane_size:
        raise ValueError(
            f"patch_size {tcfg.patch_size} must equal the model plane_size {mcfg.plane_size}"
        )
    for a, b in ((tcfg.train_rect, tcfg.val_rect), (tcfg.train_rect, tcfg.test_rect),
                 (tcfg.val_rect, tcfg.test_rect)):
        if not _rects_disjoint(a, b):
            raise ValueError(f"split rectangles overlap: {a} vs {b}")

    image = None
    if mcfg.use_image_branch:
        image = scene.image if scene.image is not None else render_synthetic_image(scene)

    net = HeightNet(mcfg, seed=tcfg.seed, dtype=np.float32)
    adam = nc.AdamState(lr=tcfg.base_max_lr, weight_decay=tcfg.weight_decay)
    sampler_rng = np.random.default_rng((tcfg.seed, 1))
    val_rng = np.random.default_rng((tcfg.seed, 2))

    val_set = [
        sample_patch(scene, tcfg.val_rect, tcfg.patch_size, val_rng, image=image)
        for _ in range(tcfg.val_patches)
    ]

    cell = scene.gt_height.spec.cell_size
    best = _snapshot(net, adam, step=0, val_mae=float("nan"), tcfg=tcfg)
    best_mae = float("inf")
    trace: list[TraceRow] = []

    for step in range(tcfg.total_steps):
        lr = nc.cyclic_lr(step, tcfg.base_max_lr, tcfg.cycle_len)
        for p in net.params.values():
            p.zero_grad()
        acc = {"l_h": 0.0, "l_a": 0.0, "total": 0.0}
        for _ in range(tcfg.batch_size):
            sample = sample_patch(scene, tcfg.train_rect, tcfg.patch_size, sampler_rng, image=image)
            assert _window_in_rect(sample, tcfg.train_rect)
            out = net.forward(
                sample.points.coords,
                cell_size=cell,
                image=sample.image if mcfg.use_image_branch else None,
            )
            gt_a = sample.gt_footprint.values if out.footprint is not None else None
            total, bd = loss(
                out.height, out.footprint, sample.gt_height.values, gt_a, mcfg.aux_weight
            )
            if not math.isfinite(bd["total"]):
                raise NonFiniteLoss(step, sample, bd)
            total.backward()
            for key in acc:
                v = bd[key]
                acc[key] += v if math.isfinite(v) else 0.0
        if tcfg.batch_size > 1:
            inv = 1.0 / tcfg.batch_size
            for p in net.params.values():
                if p.grad is not None:
                    p.grad *= p.grad.dtype.type(inv)
        adam_grads = None  # use the accumulated .grad buffers
        nc.adam_step(net.params, adam_grads, adam, lr=lr)

        row = TraceRow(
            step=step,
            lr=lr,
            l_h=acc["l_h"] / tcfg.batch_size,
            l_a=acc["l_a"] / tcfg.batch_size if mcfg.use_aux_footprint else float("nan"),
            l_total=acc["total"] / tcfg.batch_size,
        )
        done = step + 1 == tcfg.total_steps
        if tcfg.val_patches and ((step + 1) % tcfg.val_interval == 0 or done):
            val_mae = float(
                np.mean([_patch_mae(net, s, mcfg.use_image_branch) for s in val_set])
            )
            row.val_mae = val_mae
            if val_mae < best_mae:
                best_mae = val_mae
                best = _snapshot(net, adam, step=step + 1, val_mae=val_mae, tcfg=tcfg)
        trace.append(row)
        if log is not None:
            log(row)

    if not math.isfinite(best_mae) and tcfg.total_steps > 0:
        # No validation ever ran (val_patches=0): hand back the final weights.
        best = _snapshot(net, adam, step=tcfg.total_steps, val_mae=float("nan"), tcfg=tcfg)
    return TrainResult(best=best, trace=trace)
