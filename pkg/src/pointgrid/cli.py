"""Single entry point wiring all modules into reproducible experiment runs.

Configuration is sectioned key=value text ([scene], [model], [train], [run],
[ablate]) with command-line overrides via --set SECTION.KEY=VALUE.  Every
subcommand writes a fully resolved config echo (resolved.cfg) next to its
outputs so a run can be reproduced exactly.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import configio, evalbench, synth, train as train_mod
from .configio import ConfigError
from .geo import GridSpec, read_points, read_raster, write_pgm, write_raster
from .infer import predict_region
from .model import ModelConfig
from .nncore.grad import op_gradcheck_suite
from .synth import SceneConfig
from .train import TrainConfig


@dataclass(frozen=True)
class RunPaths:
    """Input/output locations and per-run knobs that are not model/data config."""

    scene_dir: str = ""
    checkpoint: str = ""
    points_file: str = ""
    dtm: str = ""
    pred: str = ""
    gt: str = ""
    footprint: str = ""
    instances: str = ""
    region: str = ""      # "x0,y0,cellsize,ncols,nrows" when no scene grid applies
    stride: int = 0       # 0 = half the patch size
    idw_power: float = 2.0
    idw_k: int = 12


@dataclass(frozen=True)
class AblateConfig:
    axis: str = "point_topology"  # point_topology | aux_footprint | image_branch | depth | resolution
    values: str = "on,off"
    seeds: str = "0,1,2"


_SECTIONS = {
    "scene": SceneConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "run": RunPaths,
    "ablate": AblateConfig,
}


@dataclass
class RunConfig:
    scene: SceneConfig
    model: ModelConfig
    train: TrainConfig
    run: RunPaths
    ablate: AblateConfig

    def to_text(self) -> str:
        parts = []
        for name in _SECTIONS:
            parts.append(f"[{name}]")
            parts.append(configio.to_text(getattr(self, name)).rstrip())
        return "\n".join(parts) + "\n"


def _parse_sections(text: str) -> dict[str, dict[str, str]]:
    sections: dict[str, dict[str, str]] = {}
    current: str | None = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in _SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section [{current}]")
            sections.setdefault(current, {})
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        if current is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        sections[current][key.strip()] = raw.strip()
    return sections


def load_run_config(
    config_path: str | None,
    overrides: list[str],
    seed: int | None = None,
) -> RunConfig:
    raw: dict[str, dict[str, str]] = {name: {} for name in _SECTIONS}
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        for name, kv in _parse_sections(path.read_text()).items():
            raw[name].update(kv)
    if seed is not None:
        raw["scene"]["seed"] = str(seed)
        raw["train"]["seed"] = str(seed)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        section, _, field = key.partition(".")
        section = section.strip()
        if section not in _SECTIONS:
            raise ConfigError(f"--set: unknown section {section!r}")
        raw[section][field.strip()] = value.strip()

    built = {}
    for name, cls in _SECTIONS.items():
        kwargs = {k: configio.coerce(cls, k, v) for k, v in raw[name].items()}
        try:
            built[name] = cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{name}]: {exc}") from None
    return RunConfig(**built)


def _default_rects(tcfg: TrainConfig) -> bool:
    d = TrainConfig()
    return (
        tcfg.train_rect == d.train_rect
        and tcfg.val_rect == d.val_rect
        and tcfg.test_rect == d.test_rect
    )


def _sync_splits(tcfg: TrainConfig, scene: synth.Scene) -> TrainConfig:
    """Derive 60/20/20 splits from the scene extent when the config still holds
    the defaults and the scene is not the default 1 km² extent."""
    spec = scene.gt_height.spec
    extent = (spec.ncols * spec.cell_size, spec.nrows * spec.cell_size)
    if _default_rects(tcfg) and extent != (1000.0, 1000.0):
        tr, va, te = train_mod.default_splits(extent)
        return replace(tcfg, train_rect=tr, val_rect=va, test_rect=te)
    return tcfg


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(out: Path, cfg: RunConfig) -> None:
    (out / "resolved.cfg").write_text(cfg.to_text())


def _load_scene(cfg: RunConfig) -> synth.Scene:
    _require(bool(cfg.run.scene_dir), "[run] scene_dir is required for this subcommand")
    return synth.load_scene_dir(cfg.run.scene_dir)


def _parse_region(spec_str: str) -> GridSpec:
    parts = [p for p in spec_str.split(",") if p.strip()]
    _require(len(parts) == 5, "[run] region must be 'x0,y0,cellsize,ncols,nrows'")
    x0, y0, cell = (float(p) for p in parts[:3])
    ncols, nrows = int(parts[3]), int(parts[4])
    return GridSpec(x0, y0, cell, ncols, nrows)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, out: Path) -> int:
    scene = synth.generate_scene(cfg.scene)
    synth.write_scene_dir(out, scene, with_image=True)
    _write_resolved(out, cfg)
    print(
        f"scene: {len(scene.points)} points, {len(scene.buildings)} buildings -> {out}"
    )
    return 0


def cmd_train(cfg: RunConfig, out: Path) -> int:
    scene = _load_scene(cfg)
    tcfg = _sync_splits(cfg.train, scene)
    _require(
        tcfg.patch_size == cfg.model.plane_size,
        f"[train] patch_size {tcfg.patch_size} must equal [model] plane_size "
        f"{cfg.model.plane_size}",
    )
    result = train_mod.train(scene, cfg.model, tcfg)
    train_mod.save_checkpoint(out / "checkpoint.bin", result.best)
    train_mod.write_trace(out / "trace.csv", result.trace)
    _write_resolved(out, cfg)
    print(
        f"trained {tcfg.total_steps} steps; best step {result.best.step} "
        f"val_MAE {result.best.val_mae:.4f} -> {out}"
    )
    return 0


def cmd_infer(cfg: RunConfig, out: Path) -> int:
    _require(bool(cfg.run.checkpoint), "[run] checkpoint is required")
    ckpt = train_mod.load_checkpoint(cfg.run.checkpoint)
    net = ckpt.to_net()

    image = None
    if cfg.run.scene_dir:
        scene = synth.load_scene_dir(cfg.run.scene_dir)
        points = scene.points
        region = scene.gt_height.spec
        image = scene.image
    else:
        _require(bool(cfg.run.points_file), "[run] points_file or scene_dir is required")
        points = read_points(cfg.run.points_file)
        _require(bool(cfg.run.region), "[run] region is required without a scene_dir")
        region = _parse_region(cfg.run.region)
    if not ckpt.model_cfg.use_image_branch:
        image = None
    elif image is None:
        raise ConfigError("checkpoint uses the image branch but the scene has no image")

    stride = cfg.run.stride or None
    pred = predict_region(points, net, region, stride=stride, image=image)
    write_raster(out / "height.asc", pred)
    write_pgm(out / "preview.pgm", pred.values)
    _write_resolved(out, cfg)
    print(f"inferred {region.ncols}x{region.nrows} height map -> {out}")
    return 0


def cmd_baseline(cfg: RunConfig, out: Path) -> int:
    if cfg.run.scene_dir:
        scene = synth.load_scene_dir(cfg.run.scene_dir)
        points, dtm, spec = scene.points, scene.dtm, scene.gt_height.spec
    else:
        _require(
            bool(cfg.run.points_file) and bool(cfg.run.dtm),
            "[run] points_file and dtm are required without a scene_dir",
        )
        points = read_points(cfg.run.points_file)
        dtm = read_raster(cfg.run.dtm)
        spec = dtm.spec
    bil = evalbench.baseline_bilinear(points, spec, dtm)
    idw = evalbench.baseline_idw(points, spec, dtm, power=cfg.run.idw_power, k=cfg.run.idw_k)
    write_raster(out / "bilinear.asc", bil)
    write_raster(out / "idw.asc", idw)
    _write_resolved(out, cfg)
    print(f"baselines over {spec.ncols}x{spec.nrows} cells -> {out}")
    return 0


def cmd_eval(cfg: RunConfig, out: Path) -> int:
    _require(bool(cfg.run.pred), "[run] pred raster path is required")
    pred = read_raster(cfg.run.pred)
    footprint = instances = None
    if cfg.run.scene_dir:
        scene = synth.load_scene_dir(cfg.run.scene_dir)
        gt, footprint, instances = scene.gt_height, scene.gt_footprint, scene.instances
    else:
        _require(bool(cfg.run.gt), "[run] gt raster path or scene_dir is required")
        gt = read_raster(cfg.run.gt)
        if cfg.run.footprint:
            footprint = read_raster(cfg.run.footprint)
        if cfg.run.instances:
            instances = read_raster(cfg.run.instances)
    report = evalbench.compute_report(pred, gt, footprint, instances)
    (out / "report.txt").write_text(report.to_text() + "\n")
    (out / "report.csv").write_text(report.to_csv())
    edges, per_bin, counts = evalbench.error_by_height(pred, gt)
    (out / "error_by_height.csv").write_text(
        evalbench.error_by_height_csv(edges, per_bin, counts)
    )
    _write_resolved(out, cfg)
    print(report.to_text())
    return 0


_ABLATE_AXES = {
    "point_topology": "use_point_topology",
    "aux_footprint": "use_aux_footprint",
    "image_branch": "use_image_branch",
    "depth": "depth",
    "resolution": "plane_size",
}


def _axis_variant(mcfg: ModelConfig, tcfg: TrainConfig, axis: str, value: str):
    field = _ABLATE_AXES.get(axis)
    if field is None:
        raise ConfigError(f"[ablate] unknown axis {axis!r} (one of {sorted(_ABLATE_AXES)})")
    if axis in ("point_topology", "aux_footprint", "image_branch"):
        flag = configio.coerce(ModelConfig, field, value)
        return replace(mcfg, **{field: flag}), tcfg
    n = int(value)
    mcfg = replace(mcfg, **{field: n})
    if axis == "resolution":
        tcfg = replace(tcfg, patch_size=n)
    return mcfg, tcfg


def cmd_ablate(cfg: RunConfig, out: Path) -> int:
    values = [v.strip() for v in cfg.ablate.values.split(",") if v.strip()]
    seeds = [int(s) for s in cfg.ablate.seeds.split(",") if s.strip()]
    _require(bool(values) and bool(seeds), "[ablate] values and seeds must be non-empty")

    rows = [("axis", "value", "seed", "overall_mae", "building_mae", "instance_mae")]
    medians: dict[str, list[float]] = {v: [] for v in values}
    for seed in seeds:
        scene = synth.generate_scene(replace(cfg.scene, seed=seed))
        for value in values:
            mcfg, tcfg = _axis_variant(cfg.model, replace(cfg.train, seed=seed),
                                       cfg.ablate.axis, value)
            tcfg = _sync_splits(tcfg, scene)
            result = train_mod.train(scene, mcfg, tcfg)
            net = result.best.to_net()
            _, report = evalbench.score_region(
                scene, net, tcfg.test_rect, use_image=mcfg.use_image_branch
            )
            rows.append(
                (
                    cfg.ablate.axis,
                    value,
                    str(seed),
                    repr(report.overall["mae"]),
                    repr(report.building["mae"]),
                    repr(report.instance["mae"]),
                )
            )
            medians[value].append(report.overall["mae"])
            print(
                f"ablate {cfg.ablate.axis}={value} seed={seed}: "
                f"overall MAE {report.overall['mae']:.3f}"
            )
    for value in values:
        rows.append(
            (cfg.ablate.axis, value, "median", repr(float(np.median(medians[value]))), "", "")
        )
    (out / "ablate.csv").write_text("\n".join(",".join(r) for r in rows) + "\n")
    _write_resolved(out, cfg)
    return 0


def cmd_gradcheck(cfg: RunConfig, out: Path) -> int:
    results = op_gradcheck_suite()
    worst_name, worst = max(results.items(), key=lambda kv: kv[1])
    for name, err in sorted(results.items()):
        print(f"{name:<18} rel_err {err:.3e}")
    ok = worst < 1e-6
    print(f"worst: {worst_name} {worst:.3e} ({'ok' if ok else 'FAIL'})")
    return 0 if ok else 1


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "baseline": cmd_baseline,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="pointgrid",
        description="Height-map reconstruction from scattered points: data, training, "
        "inference, baselines, evaluation.",
    )
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", default=None, help="sectioned key=value config file")
    parser.add_argument("--seed", type=int, default=None, help="override scene and train seeds")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config value (repeatable)",
    )
    args = parser.parse_args(argv)

    try:
        cfg = load_run_config(args.config, args.overrides, seed=args.seed)
        out = _out_dir(args)
        return _COMMANDS[args.command](cfg, out)
    except Exception as exc:  # one-line machine-parsable failure
        print(f"error kind={type(exc).__name__} msg={str(exc)!r}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
