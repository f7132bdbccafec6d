"""Acceptance gate: nine criteria, each reported as one PASS/FAIL line in the terminal summary.

Criterion 6 trains two models (several minutes on one CPU); criterion 7 reuses its test set.
"""
import filecmp
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from gspcount.cli import main
from gspcount.evaluate import compute_cam, compute_metrics, evaluate_suite, read_tiles_csv, render_cam_overlay
from gspcount.dataset import read_raster
from gspcount.experiments import GeneralizationSetup, generate_split, run_generalization
from gspcount.gradcheck import run_gradient_suite
from gspcount.model import ConvBlock, ModelConfig, build_idealized, build_model, idealized_scaling_check
from gspcount.synth import SceneSpec, count_in_rect, generate_image, tile_patches
from gspcount.train import train

from acceptance_log import criterion

SMOKE = str(Path(__file__).resolve().parents[1] / "configs" / "smoke.cfg")
SETUP = GeneralizationSetup()


@pytest.fixture(scope="module")
def generalization():
    return run_generalization(SETUP)


def test_criterion_1_gradient_suite():
    with criterion(1, "gradient check, eps=1e-5, max rel err <= 1e-5, < 2 min") as c:
        start = time.perf_counter()
        errors = run_gradient_suite(ModelConfig(), epsilon=1e-5, seed=0)
        seconds = time.perf_counter() - start
        worst_name = max(errors, key=errors.get)
        c.check(errors[worst_name] <= 1e-5, f"{len(errors)} checks, max {errors[worst_name]:.2e} ({worst_name})")
        c.check(any(k.startswith("gsp16/model/") for k in errors), "default CountModel loss covered")
        ops = {"conv2d/input", "conv2d/kernel", "conv2d/bias", "relu", "maxpool2d", "gsp", "gap",
               "linear/input", "linear/weight", "linear/bias", "loss/l1", "loss/mse"}
        c.check(ops <= set(errors), "every differentiable op covered")
        c.check(seconds < 120, f"{seconds:.1f} s")


def test_criterion_2_idealized_scaling():
    with criterion(2, "idealized model returns (m^2 C_b, C_b)") as c:
        worst = 0.0
        for block in (4, 8):
            for count in (1.0, 2.5, 5.0):
                model = build_idealized(block, count)
                for m in range(1, 7):
                    gsp, gap = idealized_scaling_check(model, m)
                    worst = max(worst, abs(gsp - m * m * count) / (m * m * count), abs(gap - count) / count)
        c.check(worst <= 1e-9, f"36 cases, max rel err {worst:.1e}")


def test_criterion_3_head_swap_identity():
    with criterion(3, "(count_GSP - b) == (count_GAP - b) * H'W'") as c:
        rng = np.random.default_rng(3)
        worst = 0.0
        for trial in range(100):
            n_blocks = int(rng.integers(1, 4))
            blocks = tuple(ConvBlock(int(rng.integers(2, 9)), pool_after=bool(rng.integers(0, 2)) or i == 0)
                           for i in range(n_blocks))
            cfg = ModelConfig(blocks=blocks, seed=trial)
            gsp = build_model(cfg)
            gsp.weight.data[:] = rng.normal(0, 1, gsp.weight.shape)
            gsp.bias.data[...] = rng.normal()
            gap = gsp.with_head("gap")
            lo = cfg.min_input_size
            x = rng.uniform(size=(1, int(rng.integers(lo, 4 * lo + 20)), int(rng.integers(lo, 4 * lo + 20))))
            count_gsp, fmap = gsp.forward(x)
            count_gap, _ = gap.forward(x)
            b = gsp.bias.item()
            lhs = count_gsp.item() - b
            rhs = (count_gap.item() - b) * fmap.shape[1] * fmap.shape[2]
            worst = max(worst, abs(lhs - rhs) / max(abs(lhs), 1e-300))
        c.check(worst <= 1e-10, f"100 random models, max rel err {worst:.1e}")


def test_criterion_4_cancellation(generalization):
    with criterion(4, "apparent <= actual everywhere; partially trained GAP shows actual >= 2x apparent") as c:
        setup = replace(SETUP, n_train=16, n_test=16, train=replace(SETUP.train, epochs=3))
        train_images = generate_split(setup.scene, "train", setup.n_train, setup.seed + 1)
        test_images = generate_split(setup.scene, "test", setup.n_test, setup.seed + 1, setup.test_sizes)
        gap, _ = train(build_model(replace(setup.model, head="gap")), train_images, setup.train)
        partial = evaluate_suite(gap, test_images, "tiled", 48, split=None)
        gsp_tiled = evaluate_suite(generalization.gsp_model, generalization.test_images, "tiled", 48, split=None)
        reports = partial.reports + generalization.gap_tiled.reports + gsp_tiled.reports
        violations = [r.image_id for r in reports if r.apparent_error > r.actual_error + 1e-12]
        c.check(not violations, f"apparent <= actual on all {len(reports)} tiled evaluations")
        strong = [r for r in partial.reports if r.actual_error >= 2 * r.apparent_error]
        c.check(bool(strong), f"{len(strong)}/{len(partial.reports)} images with actual >= 2x apparent "
                              f"(partial GAP, mean apparent/actual {partial.cancellation['mean_ratio']:.3f})")


def test_criterion_5_metrics_oracle():
    with criterion(5, "metrics: hand examples exact, MAE <= RMSE, permutation invariant") as c:
        m = compute_metrics([12, 16], [10, 20])
        c.check((m.mae, m.rmse) == (3.0, math.sqrt(10)), f"MAE {m.mae}, RMSE {m.rmse}")
        c.check(all(abs(v - 20.0) <= 1e-12 for v in (m.pct_mae, m.pct_rmse, m.pct_rmae)),
                f"%MAE/%RMSE/%RMAE {m.pct_mae}/{m.pct_rmse}/{m.pct_rmae}")
        s = compute_metrics([90], [100])
        c.check((s.mae, s.rmse, s.pct_mae, s.pct_rmse, s.pct_rmae) == (10, 10, 10, 10, 10), "single-image example")
        z = compute_metrics([4, 7], [4, 7])
        c.check(all(v == 0 for v in z.as_row().values()), "perfect predictions give zeros")
        rng = np.random.default_rng(5)
        bad_order = bad_perm = 0
        for _ in range(1000):
            n = int(rng.integers(1, 50))
            y = rng.integers(1, 200, n).astype(float)
            p = y + rng.normal(0, rng.uniform(0.1, 30), n)
            a = compute_metrics(p, y)
            bad_order += a.mae > a.rmse * (1 + 1e-12)
            perm = rng.permutation(n)
            b = compute_metrics(p[perm], y[perm])
            bad_perm += any(abs(u - v) > 1e-12 * max(1.0, abs(u)) for u, v in zip(a.as_row().values(),
                                                                                   b.as_row().values()))
        c.check(bad_order == 0, f"MAE <= RMSE on 1000 vectors ({bad_order} violations)")
        c.check(bad_perm == 0, f"permutation invariant on 1000 vectors ({bad_perm} violations)")


def test_criterion_6_generalization(generalization):
    r = generalization
    with criterion(6, "patch-trained GSP generalizes; GAP underestimates large images") as c:
        gsp, gap_ps = r.gsp_full.metrics, r.gap_tiled.patch_metrics
        c.check(gsp.pct_rmae <= 15.0, f"(a) GSP %RMAE {gsp.pct_rmae:.2f}% <= 15%")
        ratio = r.ratio_at(384)
        c.check(ratio <= 0.5, f"(b) GAP full-image pred/gt at 384px {ratio:.3f} <= 0.5")
        c.check(gsp.mae < gap_ps.mae, f"(c) GSP MAE {gsp.mae:.3f} < GAP-PS MAE {gap_ps.mae:.3f}")
        c.check(r.seconds <= 900, f"{r.seconds:.0f} s <= 15 min")
        sizes = sorted({im.height for im in r.test_images})
        c.check(len(r.test_images) == 32 and sizes[0] == 192 and sizes[-1] == 384, f"test sizes {sizes}")


def test_criterion_7_cam_identities(generalization, tmp_path):
    with criterion(7, "CAM sum/mean identities <= 1e-9 on every test image; overlays sized like images") as c:
        worst = 0.0
        bad_shapes = 0
        for model in (generalization.gsp_model, generalization.gap_model):
            for im in generalization.test_images:
                cam = compute_cam(model, im)
                reference = evaluate_suite(model, [im], "full", split=None).preds[0]
                worst = max(worst, cam.identity_error(), abs(cam.prediction - reference) / max(1.0, abs(reference)))
                if model is generalization.gsp_model:
                    heat, overlay = render_cam_overlay(cam, im, tmp_path / im.id)
                    shapes = (read_raster(heat).shape[1:], read_raster(overlay).shape[1:])
                    bad_shapes += shapes != ((im.height, im.width),) * 2
        c.check(worst <= 1e-9, f"64 maps (GSP sum, GAP mean), max rel err {worst:.1e}")
        c.check(bad_shapes == 0, f"{len(generalization.test_images)} overlays, {bad_shapes} size mismatches")


def test_criterion_8_tiling_conservation():
    with criterion(8, "tiles partition the image and DOTS labels sum to the total") as c:
        rng = np.random.default_rng(8)
        partition_fail = count_fail = 0
        total_objects = 0
        for i in range(100):
            h, w = (int(v) for v in rng.integers(64, 161, size=2))
            n = int(rng.integers(0, 12))
            spec = SceneSpec(height=h, width=w, n_min=n, n_max=n, separation=10, r_max=4)
            img = generate_image(spec, [8, i], f"t{i}")
            total_objects += img.total_count
            for size in (32, 48, 64):
                rects = tile_patches(img, size)
                cover = np.zeros((h, w), dtype=np.int32)
                for x0, y0, tw, th in rects:
                    cover[y0:y0 + th, x0:x0 + tw] += 1
                partition_fail += not np.all(cover == 1)
                count_fail += sum(count_in_rect(img, r) for r in rects) != img.total_count
        c.check(partition_fail == 0, f"300 tilings, {partition_fail} not a partition")
        c.check(count_fail == 0, f"{total_objects} objects, {count_fail} label mismatches")


def _csv_files(root: Path) -> list[Path]:
    return sorted(p.relative_to(root) for p in root.rglob("*.csv"))


def test_criterion_9_determinism(tmp_path):
    with criterion(9, "gen-data, train, eval CSVs byte-identical across two runs") as c:
        for run in ("a", "b"):
            base = tmp_path / run
            assert main(["gen-data", "--config", SMOKE, "--out", str(base / "data")]) == 0
            assert main(["train", "--config", SMOKE, "--dataset", str(base / "data"), "--out", str(base / "train")]) == 0
            assert main(["eval", "--config", SMOKE, "--checkpoint", str(base / "train" / "model.ckpt"),
                         "--dataset", str(base / "data"), "--out", str(base / "eval")]) == 0
        for stage in ("data", "train", "eval"):
            a, b = tmp_path / "a" / stage, tmp_path / "b" / stage
            files = _csv_files(a)
            same = files == _csv_files(b) and all(filecmp.cmp(a / f, b / f, shallow=False) for f in files)
            c.check(bool(files) and same, f"{stage}: {len(files)} CSVs identical")
        ckpt = [tmp_path / r / "train" / "model.ckpt" for r in ("a", "b")]
        c.check(filecmp.cmp(*ckpt, shallow=False), "checkpoints identical")
        c.check(bool(read_tiles_csv(tmp_path / "a" / "eval" / "tiles.csv")), "tiled report non-empty")
