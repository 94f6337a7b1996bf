import json
import os

import pytest

from semclip.cli import main
from semclip.imaging import load_png, save_png
from semclip.synthbench import load_manifest

from conftest import random_image


def test_partition_command(tmp_path, capsys):
    img_path = tmp_path / "photo.png"
    save_png(random_image(60, 60, seed=1), str(img_path))
    out_dir = tmp_path / "crops"
    assert main(["partition", "--image", str(img_path), "--grid-n", "3", "--out", str(out_dir)]) == 0
    names = sorted(os.listdir(out_dir))
    assert len(names) == 9
    assert "photo_r0c0.png" in names and "photo_r2c2.png" in names
    crop = load_png(str(out_dir / "photo_r1c1.png"))
    assert (crop.width, crop.height) == (20, 20)


@pytest.fixture(scope="module")
def pipeline_dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    synth_cfg = root / "synth.json"
    synth_cfg.write_text(
        json.dumps(
            {
                "count": 10,
                "seed": 13,
                "fraction_overview_solvable": 0.0,
                "templates": ["shape_of_color"],
                "target_shapes": ["circle", "square"],
                "size_range": [44, 52],
                "distractor_count_range": [1, 2],
            }
        )
    )
    data_dir = root / "data"
    assert main(["gen-synth", "--synth-config", str(synth_cfg), "--out", str(data_dir)]) == 0
    return root, data_dir


def test_gen_synth_outputs(pipeline_dirs):
    root, data_dir = pipeline_dirs
    manifest = data_dir / "manifest.jsonl"
    assert manifest.exists() and (data_dir / "scenes.jsonl").exists()
    rows = load_manifest(str(manifest))
    assert len(rows) == 10
    assert os.path.exists(rows[0].image_path)


def test_full_pipeline(pipeline_dirs, capsys):
    root, data_dir = pipeline_dirs
    manifest = str(data_dir / "manifest.jsonl")

    sup_dir = root / "sup"
    assert main(["build-supervision", "--dataset", manifest, "--out", str(sup_dir)]) == 0
    sup_path = sup_dir / "supervision.jsonl"
    assert sup_path.exists()

    train_cfg = root / "train.json"
    train_cfg.write_text(json.dumps({"learning_rate": 0.05, "epochs": 6, "batch_size": 16, "embed_dim": 8}))
    model_dir = root / "model"
    assert (
        main(
            [
                "train",
                "--dataset",
                manifest,
                "--supervision",
                str(sup_path),
                "--config",
                str(train_cfg),
                "--out",
                str(model_dir),
            ]
        )
        == 0
    )
    encoder_path = model_dir / "encoder.json"
    assert encoder_path.exists()
    doc = json.loads(encoder_path.read_text())
    assert doc["config"]["epochs"] == 6
    assert len(doc["training_log"]["epoch_losses"]) == 6

    eval_dir = root / "eval"
    assert (
        main(
            [
                "evaluate",
                "--dataset",
                manifest,
                "--strategy",
                "topk",
                "--k",
                "1",
                "--scorer",
                f"tiny:{encoder_path}",
                "--answerer",
                "toy",
                "--out",
                str(eval_dir),
            ]
        )
        == 0
    )
    metrics = json.loads((eval_dir / "metrics.json").read_text())
    assert metrics["n_instances"] == 10
    records = [json.loads(l) for l in (eval_dir / "records.jsonl").read_text().splitlines()]
    assert len(records) == 10
    assert all(r["visual_token_count"] == 1152 for r in records)

    rand_dir = root / "rand"
    assert (
        main(
            [
                "evaluate",
                "--dataset",
                manifest,
                "--strategy",
                "random",
                "--repeats",
                "2",
                "--seed",
                "5",
                "--out",
                str(rand_dir),
            ]
        )
        == 0
    )
    rand_metrics = json.loads((rand_dir / "metrics.json").read_text())
    assert len(rand_metrics["per_repeat_accuracies"]) == 2

    report_dir = root / "report"
    assert (
        main(
            [
                "report",
                "--metrics",
                str(eval_dir / "metrics.json"),
                str(rand_dir / "metrics.json"),
                "--out",
                str(report_dir),
            ]
        )
        == 0
    )
    assert (report_dir / "report.csv").exists()
    assert (report_dir / "report.md").exists()
    csv_text = (report_dir / "report.csv").read_text()
    assert "topk" in csv_text and "random" in csv_text


def test_sub_image_only_flag(pipeline_dirs):
    root, data_dir = pipeline_dirs
    manifest = str(data_dir / "manifest.jsonl")
    out = root / "ablation"
    assert (
        main(
            [
                "evaluate",
                "--dataset",
                manifest,
                "--strategy",
                "topk",
                "--scorer",
                "gt",
                "--no-overview",
                "--out",
                str(out),
            ]
        )
        == 0
    )
    records = [json.loads(l) for l in (out / "records.jsonl").read_text().splitlines()]
    assert all(r["visual_token_count"] == 576 for r in records)
