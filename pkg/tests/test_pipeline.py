"""Trainer, evaluator, checkpointing and the command-line front end.

The schedule tests script the validation metric so plateau decay, early
stopping and NaN aborts can be pinned to exact epochs without real training
dynamics.
"""

import json
import math

import numpy as np
import pytest
import torch
import yaml

import sparsedc.pipeline as pipeline
from sparsedc.cli import main
from sparsedc.depthio import DEPTH_SCALE, ManifestDataset, read_depth, write_depth
from sparsedc.metrics import MetricsReport
from sparsedc.network import ModelConfig
from sparsedc.patterns import PatternSpec
from sparsedc.pipeline import (
    Checkpoint,
    ConfigError,
    TrainConfig,
    TrainingDiverged,
    complete,
    evaluate,
    train,
)
from sparsedc.synthetic import write_demo_dataset

TINY_MODEL = dict(
    sffm_channels=8,
    local_widths=(8, 12, 16, 24, 32),
    global_dims=(8, 12, 16, 24),
    global_depths=(1, 1, 1, 1),
    global_heads=(1, 1, 2, 2),
    global_sr_ratios=(4, 2, 2, 1),
    pyramid_widths=(8, 8, 12, 16),
)


@pytest.fixture(scope="module")
def demo(tmp_path_factory):
    root = tmp_path_factory.mktemp("demo")
    return write_demo_dataset(root, count=2, val_count=1, height=24, width=32, seed=1)


def tiny_cfg(demo, out_dir, **overrides):
    base = dict(
        manifest=str(demo),
        out_dir=str(out_dir),
        model=ModelConfig(**TINY_MODEL),
        batch_size=2,
        max_epochs=2,
        train_points_min=5,
        train_points_max=40,
        val_points=30,
    )
    base.update(overrides)
    return TrainConfig(**base)


def read_log(out_dir):
    lines = (out_dir / "train_log.jsonl").read_text().splitlines()
    return [json.loads(line) for line in lines]


def fake_report(rmse):
    return MetricsReport(
        rmse=rmse, mae=rmse, irmse=0.0, imae=0.0, rel=0.1,
        delta1=1.0, delta2=1.0, delta3=1.0, n_valid=100, n_inverse=100,
    )


# ── configuration ───────────────────────────────────────────────────────


@pytest.mark.parametrize(
    "overrides",
    [
        {"lr": 0.0},
        {"lr_decay": 1.0},
        {"lr_decay": 0.0},
        {"plateau_patience": 0},
        {"early_stop_patience": 0},
        {"batch_size": 0},
        {"train_points_min": 50, "train_points_max": 10},
        {"train_points_min": 0},
    ],
)
def test_config_rejects_bad_values(overrides):
    with pytest.raises(ConfigError):
        TrainConfig(**overrides)


def test_config_dict_round_trip(demo, tmp_path):
    cfg = tiny_cfg(demo, tmp_path, lr=3e-4, row_mask_fraction=0.2)
    restored = TrainConfig.from_dict(cfg.to_dict())
    assert restored == cfg
    assert isinstance(restored.model, ModelConfig)


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learning_rate": 1e-3})
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"model": {"nonsense": 1}})


def test_config_from_yaml(demo, tmp_path):
    cfg = tiny_cfg(demo, tmp_path / "run", seed=4)
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(cfg.to_dict()), encoding="utf-8")
    assert TrainConfig.from_yaml(path) == cfg
    (tmp_path / "list.yaml").write_text("- 1\n- 2\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        TrainConfig.from_yaml(tmp_path / "list.yaml")


def test_train_requires_manifest(tmp_path):
    with pytest.raises(ConfigError):
        train(TrainConfig(manifest="", out_dir=str(tmp_path)))


# ── training loop ───────────────────────────────────────────────────────


@pytest.fixture(scope="module")
def short_run(demo, tmp_path_factory):
    out = tmp_path_factory.mktemp("short_run")
    cfg = tiny_cfg(demo, out, seed=3)
    ckpt = train(cfg)
    return cfg, ckpt, out


def test_train_writes_log_and_checkpoint(short_run):
    cfg, ckpt, out = short_run
    assert (out / "best.pt").exists()
    events = read_log(out)
    steps = [e for e in events if e["event"] == "step"]
    epochs = [e for e in events if e["event"] == "epoch"]
    assert len(steps) == 2 and len(epochs) == 2  # 2 train samples, batch 2, 2 epochs
    assert steps[0]["step"] == 1 and steps[0]["epoch"] == 0
    assert set(steps[0]) == {"event", "step", "epoch", "lr", "batch", "loss"}
    assert steps[0]["loss"]["supervised_pixels"] == 2 * 24 * 32
    assert math.isfinite(ckpt.best_val_rmse)
    assert epochs[0]["improved"] is True  # anything beats the initial infinity


def test_checkpoint_round_trip_file(short_run, tmp_path):
    _, ckpt, out = short_run
    loaded = Checkpoint.load(out / "best.pt")
    assert loaded.epoch == ckpt.epoch
    assert loaded.best_val_rmse == ckpt.best_val_rmse
    key = next(iter(loaded.model_state))
    assert torch.equal(loaded.model_state[key], ckpt.model_state[key])
    model = loaded.build_model()
    assert not model.training


def test_checkpoint_reproduces_validation_rmse(short_run):
    cfg, ckpt, out = short_run
    pattern = PatternSpec(kind="random_n", params={"n": cfg.val_points}, seed=cfg.val_seed)
    report = evaluate(out / "best.pt", cfg.manifest, pattern, split="val")
    assert report.rmse == pytest.approx(ckpt.best_val_rmse, abs=1e-6)


def test_row_mask_augmentation_runs(demo, tmp_path):
    cfg = tiny_cfg(demo, tmp_path / "rows", max_epochs=1, row_mask_fraction=0.4)
    ckpt = train(cfg)
    assert math.isfinite(ckpt.best_val_rmse)


def test_max_steps_caps_the_run(demo, tmp_path):
    cfg = tiny_cfg(demo, tmp_path / "capped", max_epochs=50, max_steps=3)
    train(cfg)
    events = read_log(tmp_path / "capped")
    steps = [e for e in events if e["event"] == "step"]
    assert len(steps) == 3
    assert events[-1]["event"] == "epoch"  # the cut epoch still validates


def test_identical_seeds_identical_logs(demo, tmp_path):
    for name in ("a", "b"):
        train(tiny_cfg(demo, tmp_path / name, seed=11))
    assert (tmp_path / "a" / "train_log.jsonl").read_bytes() == (
        tmp_path / "b" / "train_log.jsonl"
    ).read_bytes()


def test_different_seeds_diverge(demo, tmp_path):
    train(tiny_cfg(demo, tmp_path / "a", seed=1, max_epochs=1))
    train(tiny_cfg(demo, tmp_path / "b", seed=2, max_epochs=1))
    a = read_log(tmp_path / "a")[0]["loss"]["total"]
    b = read_log(tmp_path / "b")[0]["loss"]["total"]
    assert a != b


# ── plateau schedule, scripted validation ───────────────────────────────


def scripted_training(monkeypatch, demo, out_dir, rmses, **overrides):
    """Run training with evaluate_model returning a scripted rmse sequence."""
    calls = iter(rmses)
    monkeypatch.setattr(
        pipeline, "evaluate_model", lambda model, samples, pattern: fake_report(next(calls))
    )
    cfg = tiny_cfg(demo, out_dir, max_epochs=100, **overrides)
    train(cfg)
    return read_log(out_dir)


def test_lr_decays_after_five_flat_epochs(monkeypatch, demo, tmp_path):
    events = scripted_training(
        monkeypatch, demo, tmp_path / "run", [1.0] + [2.0] * 30
    )
    decays = [e for e in events if e["event"] == "lr_decay"]
    assert [d["epoch"] for d in decays] == [5]
    assert decays[0]["lr"] == pytest.approx(3e-5)
    # steps in epochs 6.. run at the decayed rate
    late = [e for e in events if e["event"] == "step" and e["epoch"] == 6]
    assert late and all(e["lr"] == pytest.approx(3e-5) for e in late)


def test_early_stop_after_ten_flat_epochs(monkeypatch, demo, tmp_path):
    events = scripted_training(
        monkeypatch, demo, tmp_path / "run", [1.0] + [2.0] * 30
    )
    stops = [e for e in events if e["event"] == "early_stop"]
    assert [s["epoch"] for s in stops] == [10]
    epochs = [e for e in events if e["event"] == "epoch"]
    assert epochs[-1]["epoch"] == 10  # epochs 0..10, nothing after the stop
    assert len([e for e in events if e["event"] == "lr_decay"]) == 1


def test_equal_rmse_is_not_improvement(monkeypatch, demo, tmp_path):
    events = scripted_training(
        monkeypatch, demo, tmp_path / "run", [1.0] * 30
    )
    epochs = [e for e in events if e["event"] == "epoch"]
    assert epochs[0]["improved"] is True
    assert all(e["improved"] is False for e in epochs[1:])
    assert epochs[-1]["epoch"] == 10


def test_recovery_resets_the_counter(monkeypatch, demo, tmp_path):
    # improves at epoch 6 after five flat epochs: decay fired once, no stop
    seq = [1.0, 2.0, 2.0, 2.0, 2.0, 2.0, 0.5] + [2.0] * 30
    events = scripted_training(monkeypatch, demo, tmp_path / "run", seq)
    decays = [e for e in events if e["event"] == "lr_decay"]
    assert [d["epoch"] for d in decays] == [5, 11]  # counter restarted after epoch 6
    epochs = {e["epoch"]: e for e in events if e["event"] == "epoch"}
    assert epochs[6]["improved"] and epochs[6]["since_improve"] == 0
    stops = [e for e in events if e["event"] == "early_stop"]
    assert [s["epoch"] for s in stops] == [16]


def test_nan_loss_aborts_with_batch_ids(monkeypatch, demo, tmp_path):
    class Boom:
        total = torch.tensor(float("nan"))

    monkeypatch.setattr(pipeline, "total_loss", lambda *a, **k: Boom())
    cfg = tiny_cfg(demo, tmp_path / "run", seed=3)
    with pytest.raises(TrainingDiverged, match="scene_00"):
        train(cfg)
    events = read_log(tmp_path / "run")
    assert events[-1]["event"] == "abort"
    assert events[-1]["reason"] == "non-finite loss"
    assert any(b.startswith("scene_") for b in events[-1]["batch"])


# ── evaluation and completion ───────────────────────────────────────────


def test_evaluate_counts_every_valid_gt_pixel(short_run):
    cfg, _, out = short_run
    gt_pixels = 24 * 32  # demo scenes are fully dense
    spec = PatternSpec(kind="big_holes", params={"n": 60, "hole_side": 5}, seed=0)
    report = evaluate(out / "best.pt", cfg.manifest, spec, split="val")
    assert report.n_valid == gt_pixels
    empty = evaluate(out / "best.pt", cfg.manifest, None, split="val")
    assert report.n_valid == empty.n_valid
    assert math.isfinite(empty.rmse)


def test_evaluate_is_deterministic(short_run):
    cfg, _, out = short_run
    spec = PatternSpec(kind="random_n", params={"n": 25}, seed=5)
    a = evaluate(out / "best.pt", cfg.manifest, spec, split="train")
    b = evaluate(out / "best.pt", cfg.manifest, spec, split="train")
    assert a == b


def test_evaluate_rejects_empty_split(short_run):
    cfg, _, out = short_run
    with pytest.raises(ConfigError):
        evaluate(out / "best.pt", cfg.manifest, None, split="test")


def test_complete_round_trip(short_run, tmp_path):
    from sparsedc.depthio import read_image, write_image
    from sparsedc.patterns import sample_random

    cfg, _, out = short_run
    ckpt = Checkpoint.load(out / "best.pt")
    sample = ManifestDataset(cfg.manifest, split="train")[0]
    image_path = tmp_path / "rgb.png"
    sparse_path = tmp_path / "sparse.png"
    write_image(image_path, sample.image)
    write_depth(sparse_path, sample_random(sample.gt, 40, seed=8))
    out_path = complete(ckpt, image_path, sparse_path, tmp_path / "dense.png")
    decoded = read_depth(out_path)
    cap = ckpt.config["model"]["depth_cap"]
    assert decoded.shape == sample.gt.shape
    assert decoded.min() >= 0 and decoded.max() <= cap

    # file round trip matches the in-memory forward up to encode quantization
    model = ckpt.build_model()
    img_np = read_image(image_path)
    sparse_np = read_depth(sparse_path)
    with torch.no_grad():
        pred = model(
            torch.from_numpy(np.ascontiguousarray(img_np.transpose(2, 0, 1))).float()[None],
            torch.from_numpy(sparse_np).float()[None, None],
        ).depth[0, 0].numpy()
    assert np.abs(np.clip(pred, 0, cap) - decoded).max() <= DEPTH_SCALE / 2 + 1e-5


def test_complete_dump_weights(short_run, tmp_path):
    cfg, _, out = short_run
    sample = ManifestDataset(cfg.manifest, split="train")[0]
    from sparsedc.depthio import write_image
    from sparsedc.patterns import sample_random

    write_image(tmp_path / "rgb.png", sample.image)
    write_depth(tmp_path / "sparse.png", sample_random(sample.gt, 30, seed=1))
    complete(
        out / "best.pt", tmp_path / "rgb.png", tmp_path / "sparse.png",
        tmp_path / "dense.png", dump_weights=True,
    )
    for factor in (8, 4, 2, 1):
        assert (tmp_path / f"dense_local_weight_x{factor}.png").exists()


def test_complete_works_with_empty_sparse(short_run, tmp_path):
    cfg, _, out = short_run
    sample = ManifestDataset(cfg.manifest, split="train")[0]
    from sparsedc.depthio import write_image

    write_image(tmp_path / "rgb.png", sample.image)
    write_depth(tmp_path / "sparse.png", np.zeros_like(sample.gt))
    out_path = complete(out / "best.pt", tmp_path / "rgb.png", tmp_path / "sparse.png",
                        tmp_path / "dense.png")
    assert np.isfinite(read_depth(out_path)).all()


def test_complete_rejects_size_mismatch(short_run, tmp_path):
    cfg, _, out = short_run
    sample = ManifestDataset(cfg.manifest, split="train")[0]
    from sparsedc.depthio import write_image

    write_image(tmp_path / "rgb.png", sample.image)
    write_depth(tmp_path / "sparse.png", np.zeros((10, 10), dtype=np.float32))
    with pytest.raises(ConfigError):
        complete(out / "best.pt", tmp_path / "rgb.png", tmp_path / "sparse.png",
                 tmp_path / "dense.png")


def test_batching_rejects_mixed_sizes(tmp_path):
    from sparsedc.depthio import ManifestEntry, write_image, write_manifest
    from sparsedc.synthetic import render_scene

    root = tmp_path / "mixed"
    (root / "images").mkdir(parents=True)
    (root / "depth").mkdir()
    entries = []
    for i, (h, w) in enumerate([(24, 32), (48, 64)]):
        image, depth = render_scene(h, w, seed=i)
        write_image(root / "images" / f"s{i}.png", image)
        write_depth(root / "depth" / f"s{i}.png", depth)
        entries.append(ManifestEntry(f"images/s{i}.png", f"depth/s{i}.png", "train"))
    write_manifest(root / "manifest.tsv", entries)
    cfg = TrainConfig(
        manifest=str(root / "manifest.tsv"), out_dir=str(tmp_path / "run"),
        model=ModelConfig(**TINY_MODEL), batch_size=2, max_epochs=1,
    )
    with pytest.raises(ConfigError, match="different sizes"):
        train(cfg)


# ── command line ────────────────────────────────────────────────────────


def test_cli_train_eval_complete(demo, tmp_path, capsys):
    cfg = tiny_cfg(demo, tmp_path / "run", max_epochs=1, max_steps=1)
    config_path = tmp_path / "config.yaml"
    config_path.write_text(yaml.safe_dump(cfg.to_dict()), encoding="utf-8")
    assert main(["train", "--config", str(config_path)]) == 0
    assert (tmp_path / "run" / "best.pt").exists()
    capsys.readouterr()

    ckpt = str(tmp_path / "run" / "best.pt")
    csv_path = tmp_path / "report.csv"
    json_path = tmp_path / "report.json"
    code = main([
        "eval", "--ckpt", ckpt, "--manifest", str(demo),
        "--pattern", "random_n:n=20,seed=3", "--split", "val",
        "--csv", str(csv_path), "--json", str(json_path),
    ])
    assert code == 0
    printed = capsys.readouterr().out.splitlines()
    assert printed[0].startswith("rmse,mae,irmse,imae,rel,")
    assert json.loads(printed[2])["n_valid"] == 24 * 32
    assert csv_path.read_text().splitlines()[0] == printed[0]
    assert json.loads(json_path.read_text())["rmse"] == pytest.approx(
        float(printed[1].split(",")[0]), abs=1e-6
    )

    dense = tmp_path / "dense.png"
    gt_file = demo.parent / "depth" / "scene_000.png"
    sparse_file = tmp_path / "sim.png"
    assert main([
        "simulate-pattern", "--gt", str(gt_file),
        "--pattern", "shift_grid:stride=4,seed=2", "--out", str(sparse_file),
    ]) == 0
    assert main([
        "complete", "--ckpt", ckpt, "--image", str(demo.parent / "images" / "scene_000.png"),
        "--sparse", str(sparse_file), "--out", str(dense), "--dump-weights",
    ]) == 0
    assert dense.exists()
    assert (tmp_path / "dense_local_weight_x1.png").exists()


def test_cli_eval_pattern_none(short_run, capsys):
    cfg, _, out = short_run
    code = main([
        "eval", "--ckpt", str(out / "best.pt"), "--manifest", cfg.manifest,
        "--pattern", "none", "--split", "val",
    ])
    assert code == 0
    assert "rmse" in capsys.readouterr().out


def test_cli_simulate_rejects_none(tmp_path, demo):
    gt_file = demo.parent / "depth" / "scene_000.png"
    with pytest.raises(SystemExit):
        main(["simulate-pattern", "--gt", str(gt_file), "--pattern", "none",
              "--out", str(tmp_path / "x.png")])


def test_cli_requires_subcommand():
    with pytest.raises(SystemExit):
        main([])
