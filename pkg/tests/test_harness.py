import json
from dataclasses import asdict

import numpy as np
import pytest
from hypothesis import given, strategies as st
from PIL import Image

from conftest import tiny_config
from wildsplat.cli import main
from wildsplat.evaluate import EvalReport, centroid_fraction, evaluate
from wildsplat.metrics import boundary_f, iou, psnr, ssim_np
from wildsplat.scene import (OccluderSpec, SceneSpec, SceneSpecError, generate_scene, read_cameras, save_scene,
                             write_cameras)
from wildsplat.splat import Camera
from wildsplat.trainer import init_state
from wildsplat.transient import per_view_baseline_bytes, transient_memory_bytes


# scene generation ----------------------------------------------------------

def test_zero_coverage_leaves_images_clean():
    sc = generate_scene(SceneSpec(n_views=5, width=24, height=24, occluders=OccluderSpec(coverage=0.0)), 1)
    assert np.array_equal(sc.images, sc.clean)
    assert not sc.masks.any()


def test_coverage_quarter_in_band():
    sc = generate_scene(SceneSpec(n_views=20, occluders=OccluderSpec(coverage=0.25)), 0)
    frac = sc.masks.mean()
    print(f"mean masked fraction {frac:.4f}")
    assert 0.20 <= frac <= 0.30
    per_view = sc.masks.mean(axis=(1, 2))
    assert np.all(np.abs(per_view - 0.25) <= 0.05)


def test_masks_pixel_exact():
    sc = generate_scene(SceneSpec(n_views=8, width=32, height=32,
                                  occluders=OccluderSpec(coverage=0.2, color_mode="textured")), 4)
    differ = np.any(sc.images != sc.clean, axis=3)
    assert np.array_equal(differ, sc.masks)


def test_every_pixel_visible_somewhere():
    sc = generate_scene(SceneSpec(n_views=6, width=24, height=24, occluders=OccluderSpec(coverage=0.3)), 2)
    assert not np.logical_and.reduce(sc.masks).any()


def test_same_seed_byte_identical(tmp_path):
    spec = SceneSpec(n_views=4, width=16, height=16, n_gaussians=30, n_points=20)
    save_scene(generate_scene(spec, 9), tmp_path / "a")
    save_scene(generate_scene(spec, 9), tmp_path / "b")
    for f in sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file()):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


@pytest.mark.parametrize("bad", [dict(n_views=3), dict(occluders=OccluderSpec(coverage=0.6)),
                                 dict(occluders=OccluderSpec(coverage=0.45, max_count=1, size_range=(0.1, 0.2))),
                                 dict(occluders=OccluderSpec(coverage=0.02, size_range=(0.5, 0.6))),
                                 dict(occluders=OccluderSpec(color_mode="plaid"))])
def test_invalid_specs_rejected(bad):
    with pytest.raises(SceneSpecError):
        generate_scene(SceneSpec(**bad), 0)


def test_unreachable_coverage_explains():
    with pytest.raises(SceneSpecError, match="unreachable"):
        SceneSpec(occluders=OccluderSpec(coverage=0.45, max_count=1, size_range=(0.1, 0.2))).validate()


def test_spec_and_camera_round_trip(tmp_path):
    spec = SceneSpec(n_views=7, occluders=OccluderSpec(coverage=0.1, size_range=(0.2, 0.3), color_mode="textured"))
    assert asdict(SceneSpec.from_lines(spec.to_lines())) == asdict(spec)
    cams = [Camera.look_at([3, 1, 0.5 * i], [0, 0, 0], [0, 0, 1], 50, 51, 64, 48) for i in range(3)]
    write_cameras(tmp_path / "c.txt", cams)
    back = read_cameras(tmp_path / "c.txt")
    for a, b in zip(cams, back):
        assert np.array_equal(a.world_to_camera, b.world_to_camera)
        assert (a.fx, a.fy, a.cx, a.cy, a.width, a.height) == (b.fx, b.fy, b.cx, b.cy, b.width, b.height)


def test_dataset_layout_and_split(tiny_scene_dir, tiny_data):
    for name in ("cameras.txt", "spec.txt", "points.txt"):
        assert (tiny_scene_dir / name).read_text().startswith("format_version=")
    assert tiny_data.n_views == 8
    assert tiny_data.test_ids == [0]
    assert tiny_data.train_ids == list(range(1, 8))
    assert tiny_data.images.shape == (8, 32, 32, 3) and tiny_data.masks.dtype == bool


# metrics -------------------------------------------------------------------

def test_psnr_examples():
    a = np.full((4, 4, 3), 0.5)
    assert psnr(a, a) == float("inf")
    assert psnr(a, a + 0.1) == pytest.approx(20.0)
    assert psnr(a, a + 0.01) == pytest.approx(40.0)


@given(st.integers(0, 2 ** 16))
def test_metric_symmetry_and_channel_permutation(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(12, 12, 3)), rng.uniform(size=(12, 12, 3))
    perm = rng.permutation(3)
    assert psnr(a, b) == psnr(b, a)
    assert ssim_np(a, b) == pytest.approx(ssim_np(b, a), abs=1e-12)
    assert psnr(a[..., perm], b[..., perm]) == pytest.approx(psnr(a, b), abs=1e-9)
    assert ssim_np(a[..., perm], b[..., perm]) == pytest.approx(ssim_np(a, b), abs=1e-12)


def test_ssim_identity():
    a = np.random.default_rng(0).uniform(size=(16, 16, 3))
    assert ssim_np(a, a) == pytest.approx(1.0)


def test_iou_and_boundary():
    m = np.zeros((20, 20), bool)
    m[5:15, 5:15] = True
    assert iou(m, m) == 1.0 and boundary_f(m, m) == 1.0
    assert iou(np.zeros_like(m), np.zeros_like(m)) == 1.0
    assert iou(m, ~m) == 0.0
    shifted = np.roll(m, 1, axis=1)
    assert iou(m, shifted) == pytest.approx(90 / 110)
    assert boundary_f(m, shifted) == 1.0          # within the 2 px tolerance
    far = np.roll(m, 5, axis=0)
    assert boundary_f(m, far) < 0.6
    assert boundary_f(m, np.zeros_like(m)) == 0.0


# evaluation ----------------------------------------------------------------

def test_centroid_fraction_oracle():
    cam = Camera(np.eye(4), 10.0, 10.0, 4.5, 4.5, 10, 10)
    mask = np.zeros((1, 10, 10), bool)
    mask[0, :, :5] = True
    mu = np.array([[-0.2, 0.0, 1.0], [0.2, 0.0, 1.0], [0.0, 0.0, -1.0], [5.0, 0.0, 1.0]])
    # behind the camera and off-image points are ignored
    assert centroid_fraction(mu, [cam], mask, [0]) == 0.5


def test_report_round_trip():
    rep = EvalReport({0: 21.5, 8: 23.25}, {0: 0.8, 8: 0.9}, {1: 0.7}, {1: 0.6}, {1: 0.55},
                     123, 456, 7890, 0.125, 42)
    back = EvalReport.from_csv(rep.to_csv())
    assert back == rep
    assert back.psnr == pytest.approx(22.375)
    assert "22.375" in rep.summary()


def test_report_rejects_bad_version():
    with pytest.raises(ValueError):
        EvalReport.from_csv("format_version,99\n")


def test_evaluate_untrained_state(tiny_data):
    state = init_state(tiny_config(), tiny_data)
    rep = evaluate(state, tiny_data)
    print(f"untrained held-out PSNR {rep.psnr:.2f} dB")
    assert set(rep.view_psnr) == set(tiny_data.test_ids)
    assert set(rep.mask_iou) == set(tiny_data.train_ids)
    assert rep.psnr == pytest.approx(np.mean(list(rep.view_psnr.values())))
    assert rep.transient_bytes == transient_memory_bytes(16, 8, 16, state.nets.n_params())
    assert rep.baseline_bytes == per_view_baseline_bytes(16, 8)
    assert 0.0 <= rep.centroid_fraction <= 1.0


def test_evaluate_rejects_size_mismatch(tiny_data):
    state = init_state(tiny_config(), tiny_data)
    tiny_data.clean = tiny_data.clean[:, :16]
    with pytest.raises(ValueError):
        evaluate(state, tiny_data)


# CLI -----------------------------------------------------------------------

@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["genscene", "--out", str(root / "scene"), "--seed", "5", "--views", "8", "--size", "24",
                 "--preset", "medium"]) == 0
    cfg = asdict(tiny_config(total_steps=8))
    (root / "cfg.json").write_text(json.dumps(cfg))
    assert main(["train", "--scene", str(root / "scene"), "--out", str(root / "run"),
                 "--config", str(root / "cfg.json")]) == 0
    return root


def test_cli_train_outputs(cli_run):
    run = cli_run / "run"
    for name in ("checkpoint.bin", "metrics.csv", "config.json"):
        assert (run / name).exists()


def test_cli_render_eval_maskviz(cli_run, capsys):
    scene, ck = str(cli_run / "scene"), str(cli_run / "run" / "checkpoint.bin")
    assert main(["render", "--scene", scene, "--checkpoint", ck, "--out", str(cli_run / "r")]) == 0
    assert len(list((cli_run / "r").glob("*.png"))) == 8
    assert main(["eval", "--scene", scene, "--checkpoint", ck, "--out", str(cli_run / "e")]) == 0
    assert EvalReport.from_csv((cli_run / "e" / "report.csv").read_text()).view_psnr
    assert (cli_run / "e" / "heldout.png").exists() and (cli_run / "e" / "psnr.png").exists()
    assert main(["maskviz", "--scene", scene, "--checkpoint", ck, "--out", str(cli_run / "m")]) == 0
    m_s = np.asarray(Image.open(cli_run / "m" / "m_s_0001.png"))
    assert set(np.unique(m_s)) <= {0, 255}
    assert np.asarray(Image.open(cli_run / "m" / "labels_0001.png")).shape == (24, 24, 3)
    assert np.asarray(Image.open(cli_run / "m" / "m_o_0001.png")).ndim == 2
    assert (cli_run / "m" / "masks.png").exists()


def test_cli_resume(cli_run):
    scene, ck = str(cli_run / "scene"), str(cli_run / "run" / "checkpoint.bin")
    assert main(["train", "--scene", scene, "--out", str(cli_run / "more"), "--checkpoint", ck,
                 "--steps", "10"]) == 0


def test_cli_config_dump(capsys):
    assert main(["config", "--dump", "--preset", "benchmark", "--seed", "3"]) == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["seed"] == 3 and cfg["mid_complement"] is False


def test_cli_exit_codes(tmp_path, cli_run, capsys):
    assert main(["config"]) == 2                                   # nothing to do
    assert main(["bogus"]) == 2                                    # argparse error
    assert main(["train", "--scene", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 2
    (tmp_path / "bad.json").write_text('{"total_steps": 5, "stage_fractions": [1, 1, 1]}')
    assert main(["config", "--dump", "--config", str(tmp_path / "bad.json")]) == 2
    (tmp_path / "junk.bin").write_bytes(b"junk")
    assert main(["eval", "--scene", str(cli_run / "scene"), "--checkpoint", str(tmp_path / "junk.bin"),
                 "--out", str(tmp_path / "e")]) == 2
    assert main(["genscene", "--out", str(tmp_path / "s"), "--coverage", "0.9"]) == 2
    capsys.readouterr()


def test_cli_runtime_failure_exit_code(cli_run, tmp_path, monkeypatch, capsys):
    import wildsplat.trainer as trainer_mod

    def boom(self):
        raise trainer_mod.TrainingError("non-finite loss at step 0 (view 1)")

    monkeypatch.setattr(trainer_mod.Trainer, "step", boom)
    code = main(["train", "--scene", str(cli_run / "scene"), "--out", str(tmp_path / "o"),
                 "--config", str(cli_run / "cfg.json")])
    assert code == 1
    assert "non-finite loss" in capsys.readouterr().err


def test_memory_ratio_example():
    # seeds and embeddings only; network weights are a fixed cost outside the ratio
    ours = transient_memory_bytes(500, 20, 16)
    base = per_view_baseline_bytes(500, 20)
    assert (ours, base) == (29_280, 440_000)
    assert base / ours > 10
