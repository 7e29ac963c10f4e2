"""Workflow subcommands at miniature scale: artifacts, exit codes,
determinism, resume."""

import json

import numpy as np
import pytest

from camotex import io
from camotex.cli import load_detector, load_enhancer, main

TINY = {
    "seed": 0,
    "scene": {"image_size": 64, "texture_size": 16, "positions": 3,
              "views_per_position": 4, "n_textures": 4,
              "train_fraction": 0.67, "min_mask_pixels": 6},
    "enhancer": {"epochs": 2, "hidden": 4, "batch_size": 4},
    "detector": {"epochs": 2, "channels": [4, 6, 8, 8], "batch_size": 4},
    "optimize": {"max_steps": 4, "batch_size": 4, "snapshot_every": 2,
                 "epochs": 4},
}


@pytest.fixture(scope="module")
def cfg_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY), encoding="utf-8")
    return str(path)


@pytest.fixture(scope="module")
def ws(tmp_path_factory, cfg_path):
    """One workspace carried through every pipeline stage."""
    out = tmp_path_factory.mktemp("ws")
    for cmd in ("gen-dataset", "train-enhancer", "train-detector",
                "optimize"):
        assert main([cmd, "--config", cfg_path,
                     "--out-dir", str(out)]) == 0, cmd
    return out


def run(out, *argv, cfg=None):
    args = list(argv)
    if cfg:
        args += ["--config", cfg]
    return main(args + ["--out-dir", str(out)])


# ---------------------------------------------------------------------------
# stage artifacts

def test_dataset_artifacts(ws):
    manifest = io.read_json(ws / "dataset/manifest.json")
    assert len(manifest["samples"]) == 12
    wsj = io.read_json(ws / "workspace.json")
    assert wsj["paths"]["dataset"] == "dataset"
    assert wsj["config"]["scene"]["image_size"] == 64
    assert wsj["seeds"]["gen-dataset"] == 0


def test_enhancer_artifacts(ws):
    model, state, meta = load_enhancer(ws / "models/enhancer.tnsb")
    assert meta["epochs_done"] == 2
    assert len(meta["history"]) == 2
    assert state.t > 0
    lines = (ws / "models/enhancer_history.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,holdout_l1"
    assert len(lines) == 3


def test_detector_artifacts(ws):
    model, state, meta = load_detector(ws / "models/detector.tnsb")
    assert meta["kind"] == "detector"
    assert tuple(meta["channels"]) == (4, 6, 8, 8)
    lines = (ws / "models/detector_history.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss"


def test_checkpoint_kind_guard(ws):
    from camotex.errors import ConfigError
    with pytest.raises(ConfigError):
        load_detector(ws / "models/enhancer.tnsb")
    with pytest.raises(ConfigError):
        load_enhancer(ws / "models/detector.tnsb")


def test_optimize_artifacts(ws):
    run_dir = ws / "runs/optimize"
    for name in ("texture_final.tnsr", "texture_final.ppm",
                 "texture_step00002.tnsr", "texture_step00004.tnsr",
                 "loss_log.csv", "snapshot_grid.ppm"):
        assert (run_dir / name).exists(), name
    tex = io.read_tnsr(run_dir / "texture_final.tnsr")
    assert tex.shape == (16, 16, 3)
    assert tex.min() >= 0.0 and tex.max() <= 1.0
    lines = (run_dir / "loss_log.csv").read_text().splitlines()
    assert len(lines) == 1 + 4
    wsj = io.read_json(ws / "workspace.json")
    assert wsj["paths"]["adversarial_texture"] == \
        "runs/optimize/texture_final.tnsr"


# ---------------------------------------------------------------------------
# evaluate

def test_evaluate_reports(ws, cfg_path):
    extra = ws / "runs/optimize/texture_step00002.tnsr"
    assert run(ws, "evaluate", "--sweep-steps", "2", "--saliency-count", "1",
               "--loss-ablation", "--texture", f"warm={extra}",
               cfg=cfg_path) == 0
    reports = ws / "reports"
    table = (reports / "texture_comparison.csv").read_text().splitlines()
    names = [line.split(",")[0] for line in table[1:]]
    assert names == ["base", "naive", "random", "adversarial", "warm"]
    for name in names:
        assert (reports / f"detections_{name}.txt").exists()
    sweep = (reports / "gamma_sweep.csv").read_text().splitlines()
    assert sweep[0] == "gamma,final_smooth,ap50,adr,max_channel_span"
    assert len(sweep) == 1 + 5
    init = (reports / "init_study.csv").read_text().splitlines()
    assert [line.split(",")[0] for line in init[1:]] == \
        ["zeros", "ones", "random", "base"]
    ablation = (reports / "loss_ablation.csv").read_text().splitlines()
    assert [line.split(",")[0] for line in ablation[1:]] == \
        ["cls_only", "cls_plus_iou"]
    assert list(reports.glob("saliency_*.ppm"))


def test_evaluate_external_dump(ws, cfg_path):
    dump = ws / "reports/detections_base.txt"
    assert run(ws, "evaluate", "--dumps", str(dump), cfg=cfg_path) == 0
    report = (ws / "reports/dump_report.csv").read_text().splitlines()
    assert report[0] == "source,ap50,adr"
    assert report[1].startswith("detections_base.txt,")


# ---------------------------------------------------------------------------
# determinism

def test_gen_dataset_deterministic(tmp_path, cfg_path):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert run(a, "gen-dataset", cfg=cfg_path) == 0
    assert run(b, "gen-dataset", cfg=cfg_path) == 0
    assert run(c, "gen-dataset", "--seed", "9", cfg=cfg_path) == 0
    assert (a / "dataset/manifest.json").read_bytes() == \
        (b / "dataset/manifest.json").read_bytes()
    ref = io.read_json(a / "dataset/manifest.json")["samples"][0]["files"]
    sample_file = sorted(ref.values())[0]
    assert (a / "dataset" / sample_file).read_bytes() == \
        (b / "dataset" / sample_file).read_bytes()
    assert (a / "dataset/manifest.json").read_bytes() != \
        (c / "dataset/manifest.json").read_bytes()


def test_optimize_deterministic(ws, cfg_path):
    for name in ("rep_a", "rep_b"):
        assert run(ws, "optimize", "--run-name", name, cfg=cfg_path) == 0
    ra, rb = ws / "runs/rep_a", ws / "runs/rep_b"
    assert (ra / "texture_final.tnsr").read_bytes() == \
        (rb / "texture_final.tnsr").read_bytes()
    assert (ra / "loss_log.csv").read_bytes() == \
        (rb / "loss_log.csv").read_bytes()
    # side runs never claim the headline texture slot
    wsj = io.read_json(ws / "workspace.json")
    assert wsj["paths"]["adversarial_texture"] == \
        "runs/optimize/texture_final.tnsr"


def test_optimize_flag_overrides(ws, cfg_path):
    assert run(ws, "optimize", "--run-name", "flags", "--init", "ones",
               "--max-steps", "2", "--no-iou-loss", cfg=cfg_path) == 0
    lines = (ws / "runs/flags/loss_log.csv").read_text().splitlines()
    assert len(lines) == 1 + 2
    iou_col = lines[0].split(",").index("iou_loss")
    assert all(float(line.split(",")[iou_col]) == 0.0 for line in lines[1:])


# ---------------------------------------------------------------------------
# resume

def test_resume_extends_detector(tmp_path, cfg_path):
    out = tmp_path / "r"
    assert run(out, "gen-dataset", cfg=cfg_path) == 0
    assert run(out, "train-detector", cfg=cfg_path) == 0
    assert run(out, "train-detector", "--resume", "--epochs", "3",
               cfg=cfg_path) == 0
    resumed, _, meta = load_detector(out / "models/detector.tnsb")
    assert meta["epochs_done"] == 3
    assert len(meta["history"]) == 3

    straight = tmp_path / "s"
    assert run(straight, "gen-dataset", cfg=cfg_path) == 0
    assert run(straight, "train-detector", "--epochs", "3",
               cfg=cfg_path) == 0
    direct, _, _ = load_detector(straight / "models/detector.tnsb")
    for key, val in direct.params().items():
        assert np.array_equal(val, resumed.params()[key]), key
    assert (out / "models/detector_history.csv").read_bytes() == \
        (straight / "models/detector_history.csv").read_bytes()


def test_resume_completed_checkpoint_fails(ws, cfg_path):
    assert run(ws, "train-detector", "--resume", cfg=cfg_path) == 2


def test_resume_without_checkpoint_fails(tmp_path, cfg_path):
    out = tmp_path / "w"
    assert run(out, "gen-dataset", cfg=cfg_path) == 0
    assert run(out, "train-enhancer", "--resume", cfg=cfg_path) == 2


# ---------------------------------------------------------------------------
# failure modes

def test_stage_order_enforced(tmp_path, cfg_path):
    empty = tmp_path / "none"
    assert run(empty, "optimize", cfg=cfg_path) == 2
    assert run(empty, "train-enhancer", cfg=cfg_path) == 2
    assert run(empty, "evaluate", cfg=cfg_path) == 2


def test_optimize_needs_models(tmp_path, cfg_path):
    out = tmp_path / "d"
    assert run(out, "gen-dataset", cfg=cfg_path) == 0
    assert run(out, "optimize", cfg=cfg_path) == 2


def test_missing_referenced_artifact(tmp_path, cfg_path):
    out = tmp_path / "m"
    assert run(out, "gen-dataset", cfg=cfg_path) == 0
    assert run(out, "train-enhancer", cfg=cfg_path) == 0
    (out / "models/enhancer.tnsb").unlink()
    assert run(out, "train-detector", cfg=cfg_path) == 2


def test_unknown_config_key(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"scene": {"imagesize": 64}}', encoding="utf-8")
    assert run(tmp_path / "x", "gen-dataset", cfg=str(bad)) == 2


def test_missing_config_file(tmp_path):
    assert run(tmp_path / "y", "gen-dataset",
               cfg=str(tmp_path / "absent.json")) == 2


def test_bad_init_choice_rejected_by_parser(ws, cfg_path):
    with pytest.raises(SystemExit):
        run(ws, "optimize", "--init", "sparkle", cfg=cfg_path)


def test_version_flag():
    with pytest.raises(SystemExit) as e:
        main(["--version"])
    assert e.value.code == 0


def test_missing_texture_file(ws, cfg_path):
    assert run(ws, "evaluate", "--no-sweep", "--no-init-study",
               "--texture", "ghost=/nonexistent.tnsr", cfg=cfg_path) == 2
