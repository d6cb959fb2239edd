from __future__ import annotations

import json

import pytest
import yaml

from conftest import tiny_train_config
from nucdet.cli import main


def synth_spec_yaml(tmp_path, n_images=2):
    spec = {
        "seed": 11,
        "datasets": [
            {"name": "cliA", "classes": ["round", "spindle"], "n_images": n_images, "image_size": 64,
             "nuclei_range": [2, 3], "radius_range": [4.0, 6.0]},
            {"name": "cliB", "classes": ["round", "dark"], "n_images": n_images, "image_size": 64,
             "nuclei_range": [2, 3], "radius_range": [4.0, 6.0]},
        ],
    }
    path = tmp_path / "synth.yaml"
    path.write_text(yaml.safe_dump(spec))
    return path


def train_config_yaml(tmp_path, manifest, iterations=3):
    cfg = tiny_train_config(manifest, iterations=iterations)
    path = tmp_path / "train.yaml"
    path.write_text(yaml.safe_dump(cfg.to_dict()))
    return path


def test_synth_command_idempotent(tmp_path, capsys):
    spec = synth_spec_yaml(tmp_path)
    assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "c1")]) == 0
    assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "c2")]) == 0
    m1 = (tmp_path / "c1" / "manifest.json").read_bytes()
    m2 = (tmp_path / "c2" / "manifest.json").read_bytes()
    assert m1 == m2
    doc = json.loads(m1)
    assert len(doc["samples"]) == 4
    img = json.loads((tmp_path / "c1" / doc["samples"][0]).read_text())["image_path"]
    a = (tmp_path / "c1" / "annotations" / img).resolve()
    b = (tmp_path / "c2" / "annotations" / img).resolve()
    assert a.read_bytes() == b.read_bytes()


def test_full_cli_pipeline(tmp_path, capsys):
    spec = synth_spec_yaml(tmp_path)
    assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "corpus")]) == 0
    manifest = tmp_path / "corpus" / "manifest.json"
    cfg_path = train_config_yaml(tmp_path, manifest)

    assert main([
        "train", "--config", str(cfg_path), "--workdir", str(tmp_path / "run"),
        "--set", "optim.iterations=4", "--seed", "1",
    ]) == 0
    ckpt = tmp_path / "run" / "checkpoint.pt"
    assert ckpt.exists()
    assert (tmp_path / "run" / "metrics.jsonl").read_text().count("\n") == 4

    assert main([
        "eval", "--checkpoint", str(ckpt), "--manifest", str(manifest), "--out", str(tmp_path / "rep"),
    ]) == 0
    out = capsys.readouterr().out
    assert "cliA" in out and "cliB" in out
    assert (tmp_path / "rep" / "summary.csv").exists()

    # golden-file reproducibility: a second eval writes identical bytes
    assert main([
        "eval", "--checkpoint", str(ckpt), "--manifest", str(manifest), "--out", str(tmp_path / "rep2"),
    ]) == 0
    assert (tmp_path / "rep" / "summary.csv").read_bytes() == (tmp_path / "rep2" / "summary.csv").read_bytes()
    assert (tmp_path / "rep" / "report_clia.json").read_bytes() == (tmp_path / "rep2" / "report_clia.json").read_bytes()

    image = next((tmp_path / "corpus" / "images").glob("clia_*.png"))
    assert main([
        "infer", "--checkpoint", str(ckpt), "--image", str(image), "--dataset", "cliA",
        "--out", str(tmp_path / "inf"), "--overlay", "--threshold", "0.0",
    ]) == 0
    preds = json.loads((tmp_path / "inf" / "predictions.json").read_text())
    assert preds, "threshold 0 keeps every query"
    assert {p["class"] for p in preds} <= {"round", "spindle"}
    assert (tmp_path / "inf" / "overlay.png").exists()

    assert main(["report", "--logdir", str(tmp_path / "run"), "--out", str(tmp_path / "plots")]) == 0
    assert (tmp_path / "plots" / "loss_curves.png").exists()
    assert (tmp_path / "plots" / "loss_summary.json").exists()


def test_ablate_command(tmp_path, capsys):
    spec = synth_spec_yaml(tmp_path)
    main(["synth", "--spec", str(spec), "--out", str(tmp_path / "corpus")])
    cfg_path = train_config_yaml(tmp_path, tmp_path / "corpus" / "manifest.json", iterations=2)
    assert main([
        "ablate", "--config", str(cfg_path), "--axis", "dataset_prompt", "--workdir", str(tmp_path / "ab"),
    ]) == 0
    out = capsys.readouterr().out
    assert "with_prompt" in out and "without_prompt" in out
    assert (tmp_path / "ab" / "ablation_dataset_prompt.csv").exists()


def test_train_help_lists_config_keys(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for key in ("dpm.mode", "cdn.lambda1", "optim.lr_backbone", "model.num_queries", "data.patch_size"):
        assert key in out


def test_exit_code_config_error(tmp_path, capsys):
    spec = synth_spec_yaml(tmp_path)
    main(["synth", "--spec", str(spec), "--out", str(tmp_path / "corpus")])
    cfg_path = train_config_yaml(tmp_path, tmp_path / "corpus" / "manifest.json")
    code = main([
        "train", "--config", str(cfg_path), "--workdir", str(tmp_path / "x"),
        "--set", "not.a.key=1",
    ])
    assert code == 2
    err = capsys.readouterr().err
    assert err.startswith("error:config:")
    assert err.count("\n") == 1  # single-line reason


def test_exit_code_data_error(tmp_path, capsys):
    code = main([
        "eval", "--checkpoint", str(tmp_path / "missing.pt"), "--manifest", "x.json", "--out", str(tmp_path / "o"),
    ])
    assert code == 3
    assert capsys.readouterr().err.startswith("error:data:")


def test_exit_code_bad_set_syntax(tmp_path, capsys):
    spec = synth_spec_yaml(tmp_path)
    main(["synth", "--spec", str(spec), "--out", str(tmp_path / "corpus")])
    cfg_path = train_config_yaml(tmp_path, tmp_path / "corpus" / "manifest.json")
    code = main(["train", "--config", str(cfg_path), "--workdir", str(tmp_path / "x"), "--set", "justakey"])
    assert code == 2
