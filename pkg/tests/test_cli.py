import pytest

from pointgrid import cli
from pointgrid.geo import read_raster
from pointgrid.train import read_trace


def run_cli(*args):
    return cli.main(list(args))


def dir_bytes(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


SMALL_SCENE = [
    "--set", "scene.extent=128,128",
    "--set", "scene.n_buildings=4",
]
MICRO_MODEL = [
    "--set", "model.feat_dim=8",
    "--set", "model.depth=2",
    "--set", "model.plane_size=32",
    "--set", "model.channel_cap=16",
    "--set", "model.encoder_blocks=2",
    "--set", "train.patch_size=32",
    "--set", "train.train_rect=0,0,64,128",
    "--set", "train.val_rect=64,0,96,128",
    "--set", "train.test_rect=96,0,128,128",
]


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "scene"
    assert run_cli("synth", "--seed", "7", "--out", str(out), *SMALL_SCENE) == 0
    return out


class TestSynth:
    def test_byte_identical_reruns(self, tmp_path, scene_dir):
        again = tmp_path / "again"
        assert run_cli("synth", "--seed", "7", "--out", str(again), *SMALL_SCENE) == 0
        assert dir_bytes(again) == dir_bytes(scene_dir)

    def test_emits_expected_files(self, scene_dir):
        names = {p.name for p in scene_dir.iterdir()}
        assert {"points.txt", "gt_height.asc", "gt_footprint.asc", "dtm.asc",
                "instances.asc", "image.ppm", "scene.cfg", "resolved.cfg"} <= names


class TestConfigHandling:
    def test_unknown_key_rejected(self, tmp_path, capsys):
        rc = run_cli("synth", "--out", str(tmp_path / "x"), "--set", "scene.bogus=1")
        assert rc == 2
        err = capsys.readouterr().err
        assert err.startswith("error kind=ConfigError")

    def test_unknown_section_rejected(self, tmp_path):
        assert run_cli("synth", "--out", str(tmp_path / "x"),
                       "--set", "nosuch.key=1") == 2

    def test_config_file_plus_override(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("[scene]\nn_buildings=2\nextent=96,96\n")
        out = tmp_path / "s"
        assert run_cli("synth", "--config", str(cfg), "--seed", "3",
                       "--out", str(out), "--set", "scene.n_buildings=3") == 0
        resolved = (out / "resolved.cfg").read_text()
        assert "n_buildings=3" in resolved
        assert "seed=3" in resolved

    def test_missing_config_file(self, tmp_path):
        assert run_cli("synth", "--config", str(tmp_path / "nope.cfg"),
                       "--out", str(tmp_path / "o")) == 2

    def test_resolved_cfg_parses_back(self, scene_dir):
        text = (scene_dir / "resolved.cfg").read_text()
        sections = cli._parse_sections(text)
        assert set(sections) == {"scene", "model", "train", "run", "ablate"}


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory, scene_dir):
    out = tmp_path_factory.mktemp("cli") / "train"
    rc = run_cli(
        "train", "--seed", "7", "--out", str(out),
        "--set", f"run.scene_dir={scene_dir}",
        "--set", "train.total_steps=4",
        "--set", "train.val_interval=2",
        "--set", "train.val_patches=2",
        *MICRO_MODEL,
    )
    assert rc == 0
    return out


class TestTrainInferEval:
    def test_train_outputs(self, trained_dir):
        assert (trained_dir / "checkpoint.bin").exists()
        rows = read_trace(trained_dir / "trace.csv")
        assert [r.step for r in rows] == [0, 1, 2, 3]

    def test_missing_scene_dir_is_config_error(self, tmp_path):
        assert run_cli("train", "--out", str(tmp_path / "t")) == 2

    def test_patch_plane_mismatch_is_config_error(self, tmp_path, scene_dir):
        rc = run_cli(
            "train", "--out", str(tmp_path / "t"),
            "--set", f"run.scene_dir={scene_dir}",
            "--set", "model.plane_size=32",
            "--set", "train.patch_size=64",
        )
        assert rc == 2

    def test_infer_writes_raster_and_preview(self, tmp_path, scene_dir, trained_dir):
        out = tmp_path / "infer"
        rc = run_cli(
            "infer", "--out", str(out),
            "--set", f"run.scene_dir={scene_dir}",
            "--set", f"run.checkpoint={trained_dir / 'checkpoint.bin'}",
        )
        assert rc == 0
        pred = read_raster(out / "height.asc")
        assert pred.values.shape == (128, 128)
        assert pred.values.min() >= 0.0
        assert (out / "preview.pgm").read_bytes().startswith(b"P5\n128 128\n")

    def test_infer_requires_checkpoint(self, tmp_path, scene_dir):
        assert run_cli("infer", "--out", str(tmp_path / "i"),
                       "--set", f"run.scene_dir={scene_dir}") == 2

    def test_baseline_outputs(self, tmp_path, scene_dir):
        out = tmp_path / "base"
        assert run_cli("baseline", "--out", str(out),
                       "--set", f"run.scene_dir={scene_dir}") == 0
        for name in ("bilinear.asc", "idw.asc"):
            r = read_raster(out / name)
            assert r.values.min() >= 0.0

    def test_eval_on_perfect_prediction_reports_zeros(self, tmp_path, scene_dir, capsys):
        out = tmp_path / "eval"
        rc = run_cli(
            "eval", "--out", str(out),
            "--set", f"run.scene_dir={scene_dir}",
            "--set", f"run.pred={scene_dir / 'gt_height.asc'}",
        )
        assert rc == 0
        text = (out / "report.txt").read_text()
        for line in text.splitlines()[1:]:
            cols = line.split()
            assert cols[1] == "0.00" and cols[2] == "0.00" and cols[3] == "0.00"
        assert (out / "report.csv").exists()
        assert (out / "error_by_height.csv").exists()


class TestGradcheckCommand:
    def test_exit_zero_and_reports_ops(self, tmp_path, capsys):
        assert run_cli("gradcheck", "--out", str(tmp_path / "g")) == 0
        out = capsys.readouterr().out
        assert "scatter_mean" in out and "bilinear_gather" in out
        assert "worst:" in out


class TestAblate:
    def test_point_topology_axis_two_rows(self, tmp_path, scene_dir):
        out = tmp_path / "ab"
        rc = run_cli(
            "ablate", "--out", str(out),
            "--set", f"run.scene_dir={scene_dir}",  # ignored: ablate builds scenes
            "--set", "scene.extent=128,128",
            "--set", "scene.n_buildings=4",
            "--set", "ablate.axis=point_topology",
            "--set", "ablate.values=on,off",
            "--set", "ablate.seeds=5",
            "--set", "train.total_steps=2",
            "--set", "train.val_interval=1",
            "--set", "train.val_patches=1",
            *MICRO_MODEL,
        )
        assert rc == 0
        lines = (out / "ablate.csv").read_text().splitlines()
        assert lines[0] == "axis,value,seed,overall_mae,building_mae,instance_mae"
        data = [l.split(",") for l in lines[1:]]
        assert [d[1] for d in data if d[2] == "median"] == ["on", "off"]
        assert len([d for d in data if d[2] != "median"]) == 2
