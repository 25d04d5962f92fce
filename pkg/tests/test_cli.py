import filecmp

import pytest

from unicon.cli import DEFAULTS, parse_value, read_config, run, write_config
from unicon.report import read_csv
from unicon.training import read_metric_log

TINY = ["shape=[16,32,32]", "volumes_per_age=1", "annotated_fraction=0.125", "test_annotated_fraction=0.125"]
FAST = ["stage_channels=[8,16,32]", "steps_per_epoch=3", "epochs=1", "batch_size=2", "crop_h=16", "crop_w=16", "val_fraction=0.0"]


@pytest.fixture(scope="module")
def phantom_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_phantom")
    assert run(["gen-phantom", "--seed", "7", "--out", str(out), *TINY]) == 0
    return out


def same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    if mismatch or errors:
        return False
    return all(same_tree(a / d, b / d) for d in cmp.common_dirs)


def test_gen_phantom_is_deterministic(phantom_dir, tmp_path):
    assert run(["gen-phantom", "--seed", "7", "--out", str(tmp_path / "again"), *TINY]) == 0
    assert same_tree(phantom_dir, tmp_path / "again")
    for name in ("train.json", "test.json", "mutA.json", "mutB.json", "mutC.json", "unicon.toml"):
        assert (phantom_dir / name).exists()


def test_desk_config_points_at_generated_data(phantom_dir):
    cfg = read_config(phantom_dir / "unicon.toml")
    assert cfg["train_manifest"] == str(phantom_dir / "train.json")
    assert len(cfg["unseen_manifests"]) == 3


def test_parse_value():
    assert parse_value("true") is True
    assert parse_value(" 3 ") == 3
    assert parse_value("1e-3") == 1e-3
    assert parse_value("[8, 16]") == [8, 16]
    assert parse_value("consa+hdsc") == "consa+hdsc"
    assert parse_value("'quoted'") == "quoted"


def test_config_roundtrip(tmp_path):
    cfg = dict(DEFAULTS, lr=0.5, stage_channels=[4, 8], train_manifest=str(tmp_path / "d" / "train.json"))
    path = write_config(cfg, tmp_path / "c.toml")
    assert "train_manifest = 'd/train.json'" in path.read_text()
    back = read_config(path)
    assert back["lr"] == 0.5 and back["stage_channels"] == [4, 8]
    assert back["train_manifest"] == str(tmp_path / "d" / "train.json")
    assert set(back) == set(DEFAULTS)


def test_usage_errors(tmp_path, capsys):
    assert run([]) == 2
    assert run(["fly"]) == 2
    assert run(["train", "--out", str(tmp_path), "no_such_key=1"]) == 2
    assert "unknown config key" in capsys.readouterr().err
    assert run(["train", "--out", str(tmp_path), "notakeyvalue"]) == 2
    assert run(["train", "--out", str(tmp_path), "--mode", "consa_loc"]) == 2
    assert run(["train", "--out", str(tmp_path)]) == 2  # no manifest given
    assert run(["train", "--config", str(tmp_path / "missing.toml"), "--out", str(tmp_path)]) == 2


def test_missing_manifest_exit_1(tmp_path, capsys):
    code = run(["train", "--out", str(tmp_path), "--train-manifest", str(tmp_path / "nope.json")])
    assert code == 1
    assert "MissingFile" in capsys.readouterr().err


def test_module_error_exit_1(phantom_dir, tmp_path, capsys):
    code = run(["train", "--config", str(phantom_dir / "unicon.toml"), "--out", str(tmp_path), *FAST, "batch_size=0"])
    assert code == 1
    assert "batch_size" in capsys.readouterr().err


def test_output_dir_from_environment(phantom_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("UNICON_OUTPUT_DIR", str(tmp_path / "env_out"))
    assert run(["train", "--config", str(phantom_dir / "unicon.toml"), *FAST, "steps_per_epoch=1"]) == 0
    assert (tmp_path / "env_out" / "final.pt").exists()


@pytest.fixture(scope="module")
def trained(phantom_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_train")
    assert run(["train", "--config", str(phantom_dir / "unicon.toml"), "--out", str(out), *FAST]) == 0
    return out


def test_train_outputs(trained):
    for name in ("final.pt", "metrics.csv", "config.resolved.toml", "dice.csv", "dice.txt", "dice.png", "run.log"):
        assert (trained / name).exists(), name
    cfg = read_config(trained / "config.resolved.toml")
    assert cfg["steps_per_epoch"] == 3 and cfg["stage_channels"] == [8, 16, 32]
    header, rows = read_csv(trained / "dice.csv")
    assert len(rows) == 1 and rows[0][0] == "consa+hdsc"


def test_rerun_from_resolved_config(trained, tmp_path):
    assert run(["train", "--config", str(trained / "config.resolved.toml"), "--out", str(tmp_path)]) == 0
    a = read_metric_log(trained / "metrics.csv")
    b = read_metric_log(tmp_path / "metrics.csv")
    assert len(a) == len(b) == 3
    for ra, rb in zip(a, b):
        assert ra["loss"] == pytest.approx(rb["loss"], abs=1e-6)
        assert ra["lr"] == pytest.approx(rb["lr"], abs=1e-12)
    assert read_csv(trained / "dice.csv") == read_csv(tmp_path / "dice.csv")


def test_eval_and_predict(trained, phantom_dir, tmp_path):
    ckpt = str(trained / "final.pt")
    assert run(["eval", "--checkpoint", ckpt, "--test-manifest", str(phantom_dir / "test.json"), "--out", str(tmp_path / "e")]) == 0
    assert read_csv(tmp_path / "e" / "dice.csv")[1][0][2:] == read_csv(trained / "dice.csv")[1][0][2:]
    assert run(["predict", "--checkpoint", ckpt, "--test-manifest", str(phantom_dir / "mutA.json"), "--out", str(tmp_path / "p")]) == 0
    assert len(list((tmp_path / "p" / "predictions").rglob("pred_*.png"))) == 16


def test_zero_shot_table(trained, phantom_dir, tmp_path):
    ckpt = str(trained / "final.pt")
    code = run(["zero-shot", "--config", str(phantom_dir / "unicon.toml"), "--checkpoints", f"{ckpt},{ckpt}", "--out", str(tmp_path)])
    assert code == 0
    header, rows = read_csv(tmp_path / "zero_shot.csv")
    assert header[2:6] == ["MutA E13.5", "MutB E14.5", "MutC E15.5", "MutB E16.5"]
    assert len(rows) == 2 and rows[0] == rows[1]
    assert (tmp_path / "zero_shot.png").exists()


def test_ablate_table(phantom_dir, tmp_path):
    code = run(
        ["ablate", "--config", str(phantom_dir / "unicon.toml"), "--modes", "none,consa+hdsc", "--out", str(tmp_path), *FAST]
    )
    assert code == 0
    header, rows = read_csv(tmp_path / "ablation.csv")
    assert [r[0] for r in rows] == ["none", "consa+hdsc"]
    assert len(header) == 7 and all(len(r) == 7 for r in rows)
    assert (tmp_path / "none" / "final.pt").exists()
