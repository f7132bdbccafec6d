import json
import subprocess
import sys
from pathlib import Path

import pytest

from gspcount.cli import main, nested_crops
from gspcount.dataset import load_dataset
from gspcount.evaluate import cancellation_aggregates, read_tiles_csv

SMOKE = str(Path(__file__).resolve().parents[1] / "configs" / "smoke.cfg")


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    outputs = None
    lines = out.out.strip().splitlines()
    if lines and lines[-1].startswith("OUTPUTS "):
        outputs = json.loads(lines[-1][len("OUTPUTS "):])
    return code, out, outputs


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--config", SMOKE, "--out", str(root / "data")]) == 0
    assert main(["train", "--config", SMOKE, "--dataset", str(root / "data"), "--out", str(root / "run")]) == 0
    return root


class TestGenData:
    def test_stats_total_matches_files(self, tmp_path, capsys):
        code, out, outputs = run(capsys, "gen-data", "--config", SMOKE, "--out", str(tmp_path / "d"))
        assert code == 0
        assert Path(outputs["manifest"]).exists()
        recount = sum(len(p.read_text().splitlines()) for p in (tmp_path / "d" / "annotations").glob("*.csv"))
        totals = [int(line.split()[-3]) for line in out.out.splitlines()[1:4]]
        assert sum(totals) == recount

    def test_zero_images(self, tmp_path, capsys):
        code, _, _ = run(capsys, "gen-data", "--config", SMOKE, "--out", str(tmp_path / "d"),
                         "--set", "data.n_train=0", "--set", "data.n_val=0", "--set", "data.n_test=0")
        assert code == 0
        assert (tmp_path / "d" / "manifest.csv").read_text() == "id,split\n"

    def test_refuses_non_empty(self, tmp_path, capsys):
        (tmp_path / "d").mkdir()
        (tmp_path / "d" / "keep.txt").write_text("x")
        code, out, _ = run(capsys, "gen-data", "--config", SMOKE, "--out", str(tmp_path / "d"))
        assert code == 2
        assert "--force" in out.err
        assert run(capsys, "gen-data", "--config", SMOKE, "--out", str(tmp_path / "d"), "--force")[0] == 0

    def test_mixed_test_sizes(self, trained):
        ds = load_dataset(trained / "data")
        assert {r.shape[1] for r in ds.records_for("test")} == {64, 96}
        assert len(ds.records_for("train")) == 6

    def test_env_default_out(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("GSPCOUNT_OUT", str(tmp_path / "envout"))
        code, _, outputs = run(capsys, "gen-data", "--config", SMOKE)
        assert code == 0
        assert outputs["dataset"].startswith(str(tmp_path / "envout"))


class TestTrainEval:
    def test_outputs_exist(self, trained):
        run_dir = trained / "run"
        for name in ("model.ckpt", "train_log.csv", "train_config.cfg"):
            assert (run_dir / name).exists()
        assert (run_dir / "train_log.csv").read_text().splitlines()[0] == "epoch,loss,val_mae"

    def test_eval_gap_rows(self, trained, tmp_path, capsys):
        code, out, outputs = run(capsys, "eval", "--config", SMOKE, "--checkpoint", str(trained / "run" / "model.ckpt"),
                                 "--dataset", str(trained / "data"), "--out", str(tmp_path))
        assert code == 0
        rows = [line.split(",")[0] for line in Path(outputs["metrics"]).read_text().splitlines()]
        assert rows == ["type", "GAP", "GAP-C", "GAP-PS"]
        assert "%RMAE = 100*sum|e|/sum(y)" in out.out

    def test_cancellation_matches_tiles_csv(self, trained, tmp_path, capsys):
        _, _, outputs = run(capsys, "eval", "--config", SMOKE, "--checkpoint", str(trained / "run" / "model.ckpt"),
                            "--dataset", str(trained / "data"), "--out", str(tmp_path), "--mode", "tiled")
        header, values = Path(outputs["cancellation"]).read_text().splitlines()
        written = dict(zip(header.split(","), (float(v) for v in values.split(","))))
        assert written == cancellation_aggregates(read_tiles_csv(outputs["tiles"]))

    def test_divergence_exit_code(self, trained, tmp_path, capsys):
        code, out, _ = run(capsys, "train", "--config", SMOKE, "--dataset", str(trained / "data"),
                           "--out", str(tmp_path), "--set", "train.optimizer=sgd", "--set", "train.lr=1e300",
                           "--set", "train.loss=mse")
        assert code == 3
        assert "diverged" in out.err

    def test_missing_dataset(self, tmp_path, capsys):
        code, _, _ = run(capsys, "train", "--config", SMOKE, "--dataset", str(tmp_path / "nope"), "--out", str(tmp_path))
        assert code == 2

    def test_tiled_needs_patch(self, trained, tmp_path, capsys):
        code, _, _ = run(capsys, "eval", "--checkpoint", str(trained / "run" / "model.ckpt"),
                         "--dataset", str(trained / "data"), "--out", str(tmp_path), "--mode", "tiled")
        assert code == 1


@pytest.fixture(scope="module")
def gsp_ckpt(trained):
    out = trained / "gsp"
    assert main(["train", "--config", SMOKE, "--dataset", str(trained / "data"), "--out", str(out),
                 "--head", "gsp", "--epochs", "1"]) == 0
    return out / "model.ckpt"


class TestCamProbe:
    def test_cam(self, trained, gsp_ckpt, tmp_path, capsys):
        code, out, outputs = run(capsys, "cam", "--checkpoint", str(gsp_ckpt), "--dataset", str(trained / "data"),
                                 "--id", "test0001", "--out", str(tmp_path / "c"))
        assert code == 0
        assert "sum(heatmap)+b" in out.out
        assert Path(outputs["overlay"]).exists()

    def test_cam_from_raster(self, trained, gsp_ckpt, tmp_path, capsys):
        image = trained / "data" / "images" / "test0000.pgm"
        code, _, outputs = run(capsys, "cam", "--checkpoint", str(gsp_ckpt), "--image", str(image),
                               "--out", str(tmp_path / "r"))
        assert code == 0 and Path(outputs["heatmap"]).exists()

    def test_probe_shape(self, trained, gsp_ckpt, tmp_path, capsys):
        code, _, outputs = run(capsys, "probe", "--checkpoint", str(gsp_ckpt), "--dataset", str(trained / "data"),
                               "--id", "test0000", "--crop", "0,0,64,64", "--crop", "0,0,32,64", "--k", "5",
                               "--out", str(tmp_path / "p.csv"))
        assert code == 0
        lines = Path(outputs["probe"]).read_text().splitlines()
        assert len(lines) == 3 and len(lines[0].split(",")) == 9

    def test_probe_refuses_gap(self, trained, tmp_path, capsys):
        code, _, _ = run(capsys, "probe", "--checkpoint", str(trained / "run" / "model.ckpt"),
                         "--dataset", str(trained / "data"), "--id", "test0000", "--out", str(tmp_path / "p.csv"))
        assert code == 1

    def test_unknown_id(self, trained, gsp_ckpt, capsys):
        code, _, _ = run(capsys, "cam", "--checkpoint", str(gsp_ckpt), "--dataset", str(trained / "data"), "--id", "zzz")
        assert code == 2

    def test_nested_crops(self):
        crops = nested_crops(64, 48, 16)
        assert crops[0] == (0, 0, 64, 48)
        assert all(w >= 16 and h >= 16 for _, _, w, h in crops)


class TestUsage:
    def test_bad_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--bogus"])
        assert exc.value.code == 1
        assert "usage" in capsys.readouterr().err

    @pytest.mark.parametrize("cmd", ["gen-data", "stats", "train", "eval", "cam", "probe", "gradcheck"])
    def test_help(self, cmd, capsys):
        with pytest.raises(SystemExit) as exc:
            main([cmd, "--help"])
        assert exc.value.code == 0
        assert "usage" in capsys.readouterr().out

    def test_stats(self, trained, capsys):
        code, out, _ = run(capsys, "stats", "--dataset", str(trained / "data"), "--split", "test")
        assert code == 0
        assert "(64x64) - (96x96)" in out.out

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "gspcount", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0
        assert "gen-data" in proc.stdout

    def test_bad_override(self, capsys):
        code, _, _ = run(capsys, "gen-data", "--config", SMOKE, "--set", "scene.height")
        assert code == 1
