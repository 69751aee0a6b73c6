"""Acceptance gate: every criterion at its stated tolerance, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -s`` to see the per-criterion lines.
The directional benchmark (criteria 5-7) trains nine 2000-step models on three
seeded synthetic scenes and dominates the runtime; everything else is fast.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

import pointgrid.nncore as nc
from conftest import brute_bilinear, brute_mosaic, brute_scatter_mean
from pointgrid import cli, evalbench, synth, train as train_mod
from pointgrid.geo import GridSpec, PointCloud
from pointgrid.infer import blend_weights, mosaic, predict_region
from pointgrid.model import HeightNet, ModelConfig, loss
from pointgrid.nncore import Tensor, adjoint_gap, no_grad
from pointgrid.nncore.grad import op_gradcheck_suite
from pointgrid.synth import SceneConfig, generate_scene
from pointgrid.train import TrainConfig


def announce(criterion: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
    assert ok, f"{criterion}: {detail}"


BENCH_MODEL = ModelConfig(feat_dim=32, depth=5, plane_size=128, channel_cap=128)


# -----------------------------------------------------------------------------
# 1. Gradient correctness
# -----------------------------------------------------------------------------


class TestCriterion1Gradients:
    def test_per_op_and_end_to_end(self):
        t0 = time.perf_counter()
        suite = op_gradcheck_suite(seed=0)
        worst_op = max(suite.values())

        # End-to-end micro model: 16x16 patch, N=20, d=8, L=2.  The production
        # 32-bit backward pass is compared entrywise against a float64
        # finite-difference oracle evaluated at the same parameter values
        # (a 32-bit central difference has a noise floor at the tolerance
        # itself).  Biases are jittered off zero so empty-cell ReLU units do
        # not sit exactly on their kinks.
        cfg = ModelConfig(feat_dim=8, depth=2, plane_size=16, encoder_blocks=2,
                          channel_cap=16)
        rng = np.random.default_rng(1)
        pts = np.column_stack(
            [rng.uniform(0, 16, 20), rng.uniform(0, 16, 20), rng.uniform(0, 25, 20)]
        )
        gt_h = rng.uniform(0, 25, (16, 16))
        gt_a = (gt_h > 12).astype(np.float64)

        net32 = HeightNet(cfg, seed=0, dtype=np.float32)
        jitter = np.random.default_rng(99)
        for name, p in net32.params.items():
            if name.endswith(".b"):
                p.data[:] = jitter.uniform(0.05, 0.15, p.data.shape).astype(p.data.dtype)

        out = net32.forward(pts)
        total, _ = loss(out.height, out.footprint, gt_h.astype(np.float32),
                        gt_a.astype(np.float32), 10.0)
        for p in net32.params.values():
            p.zero_grad()
        total.backward(release=False)
        grads32 = {
            k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
            for k, p in net32.params.items()
        }

        params64 = {
            k: Tensor(p.data.astype(np.float64), requires_grad=True)
            for k, p in net32.params.items()
        }
        net64 = HeightNet(cfg, params=params64, dtype=np.float64)

        def f64_loss() -> float:
            with no_grad():
                o = net64.forward(pts)
                t, _ = loss(o.height, o.footprint, gt_h, gt_a, 10.0)
            return t.item()

        h = 1e-5
        probe = np.random.default_rng(2)
        worst_e2e = 0.0
        for k, p64 in net64.params.items():
            flat = p64.data.reshape(-1)
            idx = probe.choice(flat.size, size=min(4, flat.size), replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                fp = f64_loss()
                flat[i] = orig - h
                fm = f64_loss()
                flat[i] = orig
                numeric = (fp - fm) / (2 * h)
                a = float(grads32[k].reshape(-1)[i])
                worst_e2e = max(
                    worst_e2e, abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
                )
        elapsed = time.perf_counter() - t0
        announce(
            "criterion 1 (gradient correctness)",
            worst_op < 1e-6 and worst_e2e < 1e-3 and elapsed < 60,
            f"per-op worst {worst_op:.2e} (<1e-6), end-to-end worst {worst_e2e:.2e} "
            f"(<1e-3), {elapsed:.1f}s (<60s)",
        )


# -----------------------------------------------------------------------------
# 2. Kernel oracles on >= 100 random instances each
# -----------------------------------------------------------------------------


class TestCriterion2KernelOracles:
    def test_brute_force_agreement(self):
        t0 = time.perf_counter()
        rng = np.random.default_rng(3)
        worsts = {}

        diffs = []
        for _ in range(100):
            n, d, m = rng.integers(1, 40), rng.integers(1, 6), rng.integers(1, 25)
            feats = rng.standard_normal((n, d))
            cells = rng.integers(-1, m, n)
            got = nc.scatter_mean(Tensor(feats), cells, int(m)).data
            diffs.append(np.abs(got - brute_scatter_mean(feats, cells, int(m))).max())
        worsts["scatter_mean"] = max(diffs)

        diffs = []
        for _ in range(100):
            d, h, w, n = rng.integers(1, 5), rng.integers(1, 9), rng.integers(1, 9), 25
            grid = rng.standard_normal((d, h, w))
            coords = np.column_stack([rng.uniform(-1, w, n), rng.uniform(-1, h, n)])
            got = nc.bilinear_gather(Tensor(grid), coords).data
            diffs.append(np.abs(got - brute_bilinear(grid, coords)).max())
        worsts["bilinear_gather"] = max(diffs)

        from pointgrid.infer import tile_offsets

        diffs = []
        for _ in range(100):
            s = int(rng.integers(3, 7))
            nrows = int(rng.integers(s, 2 * s + 3))
            ncols = int(rng.integers(s, 2 * s + 3))
            w = blend_weights(s)
            stride = int(rng.integers(1, s + 1))
            patches = [
                (r0, c0, rng.standard_normal((s, s)) * 10)
                for r0 in tile_offsets(nrows, s, stride)
                for c0 in tile_offsets(ncols, s, stride)
            ]
            for _ in range(int(rng.integers(0, 3))):  # extra overlapping patches
                patches.append(
                    (int(rng.integers(0, nrows - s + 1)),
                     int(rng.integers(0, ncols - s + 1)),
                     rng.standard_normal((s, s)) * 10)
                )
            got = mosaic(patches, w, GridSpec(0, 0, 1.0, ncols, nrows)).values
            diffs.append(np.abs(got - brute_mosaic(patches, w.w, nrows, ncols)).max())
        worsts["mosaic"] = max(diffs)

        diffs = []
        for _ in range(100):
            ncols, nrows = int(rng.integers(3, 9)), int(rng.integers(3, 9))
            spec = GridSpec(0.0, 0.0, 1.0, ncols, nrows)
            n = int(rng.integers(1, 20))
            cloud = PointCloud(
                np.column_stack([rng.uniform(0, ncols, n), rng.uniform(0, nrows, n),
                                 rng.uniform(0, 30, n)])
            )
            dtm = evalbench.crop_to_rect(
                evalbench.Raster(spec, rng.uniform(-2, 2, (nrows, ncols))),
                (0.0, 0.0, float(ncols), float(nrows)),
            )
            surface, filled = evalbench.rasterize_max(cloud, spec)
            vals = surface[filled]
            fy, fx = np.nonzero(filled)
            xs, ys = spec.cell_centers()
            brute = np.zeros((nrows, ncols))
            for r in range(nrows):
                for c in range(ncols):
                    d2 = (xs[fx] - xs[c]) ** 2 + (ys[fy] - ys[r]) ** 2
                    if (d2 == 0).any():
                        brute[r, c] = vals[d2 == 0][0]
                    else:
                        wgt = 1.0 / d2
                        brute[r, c] = np.sum(wgt * vals) / np.sum(wgt)
            brute = np.maximum(brute - dtm.values, 0.0)
            got = evalbench.baseline_idw(cloud, spec, dtm, power=2.0, k=10_000).values
            diffs.append(np.abs(got - brute).max())
        worsts["idw"] = max(diffs)

        diffs = []
        for _ in range(100):
            shape = (int(rng.integers(2, 9)), int(rng.integers(2, 9)))
            spec = GridSpec(0.0, 0.0, 1.0, shape[1], shape[0])
            pred = evalbench.Raster(spec, rng.standard_normal(shape) * 10)
            gt = evalbench.Raster(spec, rng.standard_normal(shape) * 10)
            e = np.abs(pred.values - gt.values).ravel()
            diffs.append(abs(evalbench.mae(pred, gt) - e.mean()))
            diffs.append(abs(evalbench.rmse(pred, gt) - np.sqrt((e**2).mean())))
            diffs.append(abs(evalbench.medae(pred, gt) - np.median(e)))
        worsts["metrics"] = max(diffs)

        elapsed = time.perf_counter() - t0
        worst = max(worsts.values())
        announce(
            "criterion 2 (kernel oracles)",
            worst < 1e-9 and elapsed < 60,
            f"worst abs diff {worst:.2e} (<1e-9) over "
            + ", ".join(f"{k} {v:.1e}" for k, v in worsts.items())
            + f"; {elapsed:.1f}s (<60s)",
        )


# -----------------------------------------------------------------------------
# 3. Adjoint consistency
# -----------------------------------------------------------------------------


class TestCriterion3Adjoints:
    def test_scatter_and_gather_adjoints(self):
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(100):
            n, d, m = int(rng.integers(1, 40)), int(rng.integers(1, 6)), int(rng.integers(1, 25))
            cells = rng.integers(-1, m, n)
            x = Tensor(np.zeros((n, d)), requires_grad=True)
            worst = max(worst, adjoint_gap(
                lambda t: nc.scatter_mean(t, cells, m), x,
                rng.standard_normal((n, d)), rng.standard_normal((m, d))))
        for _ in range(100):
            d, h, w = int(rng.integers(1, 5)), int(rng.integers(1, 9)), int(rng.integers(1, 9))
            n = int(rng.integers(1, 30))
            coords = np.column_stack([rng.uniform(-1, w, n), rng.uniform(-1, h, n)])
            x = Tensor(np.zeros((d, h, w)), requires_grad=True)
            worst = max(worst, adjoint_gap(
                lambda t: nc.bilinear_gather(t, coords), x,
                rng.standard_normal((d, h, w)), rng.standard_normal((n, d))))
        announce(
            "criterion 3 (adjoint consistency)",
            worst < 1e-10,
            f"worst |<Au,v> - <u,A'v>| = {worst:.2e} (<1e-10) over 200 trials",
        )


# -----------------------------------------------------------------------------
# 4. Overfit oracle
# -----------------------------------------------------------------------------


class TestCriterion4Overfit:
    def test_single_patch_memorization(self):
        t0 = time.perf_counter()
        scene = generate_scene(SceneConfig(seed=11))
        b = scene.buildings[0]
        x0 = int(min(max(b.x0 - 30, 0), 1000 - 128))
        y0 = int(min(max(b.y0 - 30, 0), 1000 - 128))
        rect = (float(x0), float(y0), float(x0 + 128), float(y0 + 128))
        tcfg = TrainConfig(
            total_steps=500, patch_size=128, val_interval=10**9, val_patches=0,
            seed=0, train_rect=rect, val_rect=(900.0, 900.0, 1000.0, 1000.0),
            test_rect=(0.0, 990.0, 10.0, 1000.0),
        )
        res = train_mod.train(scene, BENCH_MODEL, tcfg)
        best_l_h = min(r.l_h for r in res.trace)
        elapsed = time.perf_counter() - t0
        announce(
            "criterion 4 (overfit oracle)",
            best_l_h < 0.5 and elapsed < 600,
            f"min L_h {best_l_h:.3f} m (<0.5) after 500 steps on one patch; "
            f"{elapsed:.0f}s (<600s)",
        )


# -----------------------------------------------------------------------------
# 5-7. Directional reproduction on the seeded synthetic benchmark
# -----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def benchmark():
    """Nine 2000-step trainings (dual / grid-only / fusion across 3 seeds) plus
    the classical baselines, on 1 km² scenes with default corruption."""
    results = {"dual": [], "grid": [], "fusion": [], "bilinear": [], "idw": []}
    timings = {"criterion5": 0.0, "total": 0.0}
    t_total = time.perf_counter()
    for seed in (0, 1, 2):
        t_seed5 = time.perf_counter()
        scene = generate_scene(SceneConfig(seed=seed))
        tcfg = TrainConfig(total_steps=2000, patch_size=128, val_interval=500,
                           val_patches=16, seed=seed)

        res = train_mod.train(scene, BENCH_MODEL, tcfg)
        _, report = evalbench.score_region(scene, res.best.to_net(), tcfg.test_rect)
        results["dual"].append(report.overall["mae"])

        gt = evalbench.crop_to_rect(scene.gt_height, tcfg.test_rect)
        dtm = evalbench.crop_to_rect(scene.dtm, tcfg.test_rect)
        rect = tcfg.test_rect
        xy = scene.points.xy
        inside = (
            (xy[:, 0] >= rect[0]) & (xy[:, 0] < rect[2])
            & (xy[:, 1] >= rect[1]) & (xy[:, 1] < rect[3])
        )
        pts = scene.points.select(inside)
        results["bilinear"].append(
            evalbench.mae(evalbench.baseline_bilinear(pts, gt.spec, dtm), gt)
        )
        results["idw"].append(
            evalbench.mae(evalbench.baseline_idw(pts, gt.spec, dtm), gt)
        )
        timings["criterion5"] += time.perf_counter() - t_seed5

        grid_cfg = replace(BENCH_MODEL, use_point_topology=False)
        res_g = train_mod.train(scene, grid_cfg, tcfg)
        _, report_g = evalbench.score_region(scene, res_g.best.to_net(), tcfg.test_rect)
        results["grid"].append(report_g.overall["mae"])

        fusion_cfg = replace(BENCH_MODEL, use_image_branch=True)
        res_f = train_mod.train(scene, fusion_cfg, tcfg)
        _, report_f = evalbench.score_region(
            scene, res_f.best.to_net(), tcfg.test_rect, use_image=True
        )
        results["fusion"].append(report_f.overall["mae"])
        print(
            f"benchmark seed {seed}: dual {results['dual'][-1]:.3f} "
            f"grid {results['grid'][-1]:.3f} fusion {results['fusion'][-1]:.3f} "
            f"bilinear {results['bilinear'][-1]:.3f} idw {results['idw'][-1]:.3f}"
        )
    timings["total"] = time.perf_counter() - t_total
    medians = {k: float(np.median(v)) for k, v in results.items()}
    return {"results": results, "medians": medians, "timings": timings}


class TestCriterion5BaselineMargin:
    def test_model_beats_baselines_by_30_percent(self, benchmark):
        med = benchmark["medians"]
        t5 = benchmark["timings"]["criterion5"]
        ok = (
            med["dual"] <= 0.7 * med["bilinear"]
            and med["dual"] <= 0.7 * med["idw"]
            and t5 < 7200
        )
        announce(
            "criterion 5 (directional baseline margin)",
            ok,
            f"median dual MAE {med['dual']:.3f} vs bilinear {med['bilinear']:.3f} / "
            f"idw {med['idw']:.3f} (needs <= 70%); dual+baseline time "
            f"{t5 / 60:.0f} min (<120 min)",
        )


class TestCriterion6PointTopology:
    def test_dual_topology_not_worse_than_grid_only(self, benchmark):
        med = benchmark["medians"]
        announce(
            "criterion 6 (point-topology ablation direction)",
            med["dual"] <= med["grid"],
            f"median dual MAE {med['dual']:.3f} <= grid-only {med['grid']:.3f}",
        )


class TestCriterion7ImageFusion:
    def test_fusion_does_not_hurt(self, benchmark):
        med = benchmark["medians"]
        announce(
            "criterion 7 (image-fusion direction)",
            med["fusion"] <= med["dual"],
            f"median fusion MAE {med['fusion']:.3f} <= points-only {med['dual']:.3f}",
        )


# -----------------------------------------------------------------------------
# 8. Blending contract
# -----------------------------------------------------------------------------


class TestCriterion8Blending:
    def test_rectification_single_patch_and_seams(self):
        rng = np.random.default_rng(5)

        # no negative cells, ever
        region = GridSpec(0, 0, 1.0, 12, 12)
        patches = [
            (r0, c0, rng.standard_normal((8, 8)) * 20)
            for r0 in (0, 4) for c0 in (0, 4)
        ]
        blended = mosaic(patches, blend_weights(8), region)
        nonneg = blended.values.min() >= 0.0

        # single-patch region equals the rectified direct prediction
        vals = rng.standard_normal((8, 8)) * 20
        single = mosaic([(0, 0, vals)], blend_weights(8), GridSpec(0, 0, 1.0, 8, 8))
        single_ok = np.array_equal(single.values, np.maximum(vals, 0.0))

        # constant-stub mosaics are seam-free to the last bit
        from types import SimpleNamespace

        stub = SimpleNamespace(
            cfg=SimpleNamespace(plane_size=8),
            predict=lambda pts, cell_size=1.0, image=None: np.full((8, 8), 5.25),
        )
        cloud = PointCloud(
            np.column_stack([rng.uniform(0, 20, 50), rng.uniform(0, 20, 50),
                             rng.uniform(0, 10, 50)])
        )
        out = predict_region(cloud, stub, GridSpec(0, 0, 1.0, 20, 20), stride=4)
        max_delta = max(
            np.abs(np.diff(out.values, axis=0)).max(),
            np.abs(np.diff(out.values, axis=1)).max(),
        )
        announce(
            "criterion 8 (blending contract)",
            nonneg and single_ok and max_delta == 0.0,
            f"non-negative {nonneg}, single-patch exact {single_ok}, "
            f"constant-stub max boundary delta {max_delta}",
        )


# -----------------------------------------------------------------------------
# 9. Schedule contract
# -----------------------------------------------------------------------------


class TestCriterion9Schedule:
    def test_halving_and_trace_agreement(self):
        base = 1e-3
        points_ok = (
            nc.cyclic_lr(0, base) == base
            and nc.cyclic_lr(1000, base) == base / 2
            and nc.cyclic_lr(2000, base) == base / 4
        )
        scene = generate_scene(SceneConfig(extent=(128.0, 128.0), n_buildings=3, seed=6))
        mcfg = ModelConfig(feat_dim=8, depth=2, plane_size=32, encoder_blocks=2,
                           channel_cap=16)
        tcfg = TrainConfig(
            total_steps=40, patch_size=32, base_max_lr=base, cycle_len=16,
            val_interval=20, val_patches=2, seed=0,
            train_rect=(0.0, 0.0, 64.0, 128.0), val_rect=(64.0, 0.0, 96.0, 128.0),
            test_rect=(96.0, 0.0, 128.0, 128.0),
        )
        res = train_mod.train(scene, mcfg, tcfg)
        trace_ok = all(
            row.lr == nc.cyclic_lr(row.step, base, cycle_len=16) for row in res.trace
        )
        announce(
            "criterion 9 (schedule contract)",
            points_ok and trace_ok,
            f"lr(0)/lr(1000)/lr(2000) exact {points_ok}; "
            f"trace matches cyclic_lr at all {len(res.trace)} steps {trace_ok}",
        )


# -----------------------------------------------------------------------------
# 10. Determinism of the CLI surface
# -----------------------------------------------------------------------------


class TestCriterion10Determinism:
    def test_synth_train_infer_bit_identical(self, tmp_path):
        def tree_bytes(root):
            return {p.name: p.read_bytes() for p in sorted(root.iterdir())}

        scene_args = ["--set", "scene.extent=192,192", "--set", "scene.n_buildings=6"]
        model_args = [
            "--set", "model.feat_dim=8", "--set", "model.depth=2",
            "--set", "model.plane_size=32", "--set", "model.channel_cap=16",
            "--set", "model.encoder_blocks=2",
            "--set", "train.patch_size=32",
            "--set", "train.total_steps=50",
            "--set", "train.val_interval=25", "--set", "train.val_patches=4",
            "--set", "train.train_rect=0,0,96,192",
            "--set", "train.val_rect=96,0,144,192",
            "--set", "train.test_rect=144,0,192,192",
        ]
        # each stage reruns against identical inputs; outputs must match in bytes
        outputs = {}
        scene_ref = tmp_path / "scene_a"
        ckpt_ref = tmp_path / "train_a" / "checkpoint.bin"
        for tag in ("a", "b"):
            s = tmp_path / f"scene_{tag}"
            t = tmp_path / f"train_{tag}"
            i = tmp_path / f"infer_{tag}"
            assert cli.main(["synth", "--seed", "9", "--out", str(s), *scene_args]) == 0
            assert cli.main([
                "train", "--seed", "9", "--out", str(t),
                "--set", f"run.scene_dir={scene_ref}", *model_args,
            ]) == 0
            assert cli.main([
                "infer", "--out", str(i),
                "--set", f"run.scene_dir={scene_ref}",
                "--set", f"run.checkpoint={ckpt_ref}",
            ]) == 0
            outputs[tag] = (tree_bytes(s), tree_bytes(t), tree_bytes(i))
        same = outputs["a"] == outputs["b"]
        announce(
            "criterion 10 (fixed-seed determinism)",
            same,
            "synth, 50-step train, and infer outputs byte-identical across reruns"
            if same else "outputs differ between reruns",
        )
