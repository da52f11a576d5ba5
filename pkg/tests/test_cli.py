import json
import re
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from transcam import cli
from transcam.checkpoint import load_model
from transcam.cli import resolve_run_config, run
from transcam.exceptions import ConfigError
from transcam.train import RunConfig

TINY_MODEL = dict(num_blocks=2, embed_dim=8, num_heads=2, grid=4, stage_channels=[4, 8], image_size=16,
                  stem_channels=4, conv_grid=8)


def tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Tiny train/eval splits, a run config and a trained checkpoint, built through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    assert run(["gen-data", "--out", str(root / "train"), "--n", "8", "--size", "16", "--seed", "0"]) == 0
    assert run(["gen-data", "--out", str(root / "eval"), "--n", "4", "--size", "16", "--seed", "1",
                "--split", "eval"]) == 0
    config = root / "run.json"
    config.write_text(json.dumps({"model": TINY_MODEL, "epochs": 1, "batch_size": 4, "scales": [1.0]}))
    code = run(["train", "--data", str(root / "train"), "--eval-data", str(root / "eval"), "--config", str(config),
                "--out", str(root / "model.tcam"), "--metrics", str(root / "metrics.csv"), "--seed", "3"])
    assert code == 0
    return root


# ---------------------------------------------------------------- config precedence

@pytest.mark.parametrize("flag,file,base,expect", [
    (None, None, None, RunConfig.tau),
    (None, None, 0.3, 0.3),
    (None, 0.2, None, 0.2),
    (None, 0.2, 0.3, 0.2),
    (0.1, None, None, 0.1),
    (0.1, None, 0.3, 0.1),
    (0.1, 0.2, None, 0.1),
    (0.1, 0.2, 0.3, 0.1),
])
def test_precedence_matrix(tmp_path, flag, file, base, expect):
    path = None
    if file is not None:
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"tau": file}))
    cfg = resolve_run_config(str(path) if path else None, {"tau": flag}, {"tau": base} if base is not None else None)
    assert cfg.tau == expect


def test_precedence_merges_model_section(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"model": {"embed_dim": 32}, "epochs": 4}))
    cfg = resolve_run_config(str(path), {"epochs": 2, "lr": None})
    assert cfg.model.embed_dim == 32 and cfg.model.num_blocks == 4
    assert cfg.epochs == 2 and cfg.lr == RunConfig.lr


@pytest.mark.parametrize("text", ["{bad", "[1, 2]", '{"nope": 1}', '{"tau": 4}'])
def test_bad_config_files(tmp_path, text):
    path = tmp_path / "c.json"
    path.write_text(text)
    with pytest.raises(ConfigError):
        resolve_run_config(str(path), {})


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        resolve_run_config(str(tmp_path / "none.json"), {})


# ---------------------------------------------------------------- exit codes

@pytest.mark.parametrize("argv", [
    [],
    ["bogus"],
    ["gen-data", "--n", "3"],
    ["gen-data", "--out", "x", "--n", "3", "--frobnicate"],
    ["train", "--data", "d", "--out", "o", "--scales", "a,b"],
    ["export-heatmaps", "--checkpoint", "c", "--image", "i", "--out", "o", "--ref-pixel", "3"],
])
def test_usage_errors_exit_1(argv, capsys):
    assert run(argv) == 1
    err = capsys.readouterr().err
    assert "usage:" in err and "error:" in err


def test_help_exits_0(capsys):
    assert run(["--help"]) == 0
    assert "gen-data" in capsys.readouterr().out


def test_invalid_generator_config_exit_1(tmp_path, capsys):
    assert run(["gen-data", "--out", str(tmp_path), "--n", "2", "--classes", "disk,hexagon"]) == 1
    assert "hexagon" in capsys.readouterr().err


def test_threads_env_validation(tmp_path, monkeypatch):
    monkeypatch.setenv("TCAM_THREADS", "zero")
    assert run(["gen-data", "--out", str(tmp_path), "--n", "1"]) == 1
    monkeypatch.setenv("TCAM_THREADS", "2")
    assert run(["gen-data", "--out", str(tmp_path), "--n", "1"]) == 0


def test_runtime_failures_exit_2(tmp_path, workspace, capsys):
    assert run(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "m")]) == 2
    bad = tmp_path / "bad.tcam"
    bad.write_bytes(b"junk")
    assert run(["infer", "--checkpoint", str(bad), "--image", "x.png", "--out", str(tmp_path)]) == 2
    assert run(["infer", "--checkpoint", str(workspace / "model.tcam"), "--image", str(tmp_path / "no.png"),
                "--out", str(tmp_path)]) == 2
    assert "error:" in capsys.readouterr().err


# ---------------------------------------------------------------- subcommands

def test_gen_data_twice_identical(tmp_path):
    for name in ("a", "b"):
        assert run(["gen-data", "--out", str(tmp_path / name), "--n", "10", "--seed", "7"]) == 0
    assert tree(tmp_path / "a") == tree(tmp_path / "b")


def test_train_writes_checkpoint_and_metrics(workspace):
    model, bundle = load_model(workspace / "model.tcam")
    assert model.config.embed_dim == 8 and model.config.num_fg_classes == 3
    assert bundle.config["classes"] == ["disk", "rectangle", "triangle"]
    run_cfg = RunConfig.from_dict({**bundle.config["run"]})
    assert run_cfg.seed == 3 and run_cfg.epochs == 1 and run_cfg.scales == (1.0,)
    lines = (workspace / "metrics.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss,acc,iou_background,iou_disk,iou_rectangle,iou_triangle,miou,seconds"
    assert len(lines) == 2


def test_train_is_reproducible(workspace, tmp_path):
    args = ["train", "--data", str(workspace / "train"), "--eval-data", str(workspace / "eval"),
            "--config", str(workspace / "run.json"), "--seed", "3"]
    assert run(args + ["--out", str(tmp_path / "m.tcam"), "--metrics", str(tmp_path / "m.csv")]) == 0
    assert (tmp_path / "m.csv").read_bytes() == (workspace / "metrics.csv").read_bytes()
    assert (tmp_path / "m.tcam").read_bytes() == (workspace / "model.tcam").read_bytes()


def test_infer_writes_labels_and_heatmaps(workspace, tmp_path):
    image = workspace / "eval" / "images" / "eval_00000.png"
    out = tmp_path / "inf"
    code = run(["infer", "--checkpoint", str(workspace / "model.tcam"), "--image", str(image), "--tau", "0.5",
                "--mode", "transcam", "--out", str(out), "--labels", "1,1,1"])
    assert code == 0
    labels = np.asarray(Image.open(out / "labels.png"))
    assert labels.shape == (16, 16) and labels.max() <= 3
    assert sorted(p.name for p in out.glob("transcam_*.png")) == [
        "transcam_disk.png", "transcam_rectangle.png", "transcam_triangle.png"]


def test_infer_labels_gate_and_count(workspace, tmp_path):
    image = workspace / "eval" / "images" / "eval_00001.png"
    base = ["infer", "--checkpoint", str(workspace / "model.tcam"), "--image", str(image), "--tau", "0.0"]
    assert run(base + ["--out", str(tmp_path / "g"), "--labels", "0,1,0"]) == 0
    labels = np.asarray(Image.open(tmp_path / "g" / "labels.png"))
    assert set(np.unique(labels)) <= {0, 2}
    assert run(base + ["--out", str(tmp_path / "h"), "--labels", "1,0"]) == 1
    assert run(base + ["--out", str(tmp_path / "p")]) == 0


def test_sweep_tau_json(workspace, tmp_path):
    out = tmp_path / "tau.json"
    code = run(["sweep-tau", "--checkpoint", str(workspace / "model.tcam"), "--data", str(workspace / "eval"),
                "--grid", "0.1,0.3,0.5", "--out", str(out)])
    assert code == 0
    res = json.loads(out.read_text())
    assert res["best_tau"] in (0.1, 0.3, 0.5) and len(res["curve"]) == 3
    assert res["attn_range"] == RunConfig.attn_range


def test_ablate_csv(workspace, capsys):
    code = run(["ablate", "--checkpoint", str(workspace / "model.tcam"), "--data", str(workspace / "eval"),
                "--modes", "cam,transcam,AD,w=0.5"])
    assert code == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("group,method,attn_range")
    assert [line.split(",")[:2] for line in lines[1:]] == [
        ["coupling", "cam"], ["coupling", "transcam"], ["range", "transcam"], ["weights", "transcam"]]


def test_ablate_unknown_mode_exit_1(workspace):
    assert run(["ablate", "--checkpoint", str(workspace / "model.tcam"), "--data", str(workspace / "eval"),
                "--modes", "gradcam"]) == 1


def test_export_heatmaps(workspace, tmp_path):
    image = workspace / "eval" / "images" / "eval_00002.png"
    out = tmp_path / "hm"
    code = run(["export-heatmaps", "--checkpoint", str(workspace / "model.tcam"), "--image", str(image),
                "--out", str(out), "--ref-pixel", "4,10"])
    assert code == 0
    names = {p.name for p in out.iterdir()}
    assert len(names) == 4 * 3 + 3 and "attn_AS_y4_x10.png" in names
    assert run(["export-heatmaps", "--checkpoint", str(workspace / "model.tcam"), "--image", str(image),
                "--out", str(out), "--ref-pixel", "40,1"]) == 1


def test_grad_check_passes(capsys):
    assert run(["grad-check", "--seed", "3", "--coords", "1"]) == 0
    out = capsys.readouterr().out
    err = float(re.search(r"max relative error (\S+)", out).group(1))
    assert err < 1e-4 and "ok" in out


def test_grad_check_failure_exit_2(monkeypatch, capsys):
    monkeypatch.setattr(cli, "model_gradient_check", lambda **kw: 3e-4)
    assert run(["grad-check"]) == 2
    assert "FAILED" in capsys.readouterr().out


def test_console_entry_point(monkeypatch):
    monkeypatch.setattr("sys.argv", ["transcam", "--help"])
    with pytest.raises(SystemExit) as exc:
        cli.main()
    assert exc.value.code == 0
