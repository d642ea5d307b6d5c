import json

import numpy as np
import pytest

from unaen.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from unaen.data import read_marf, write_marf

TOY = {
    "batch_size": 2,
    "epochs": 1,
    "model": {
        "generator": {"n_groups": 1, "n_blocks_per_group": 1, "channels": 16},
        "discriminator": {"base_channels": 8, "n_units": 2},
    },
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["phantom", "--count", "20", "--size", "32", "--seed", "1", "--out", str(root / "clean")]) == 0
    assert main(["build-dataset", str(root / "clean"), "--patch", "32", "--seed", "0", "--out", str(root / "ds")]) == 0
    (root / "toy.json").write_text(json.dumps(TOY))
    return root


def test_phantom_files(workspace):
    files = sorted((workspace / "clean").glob("*.marf"))
    assert len(files) == 20 and files[0].name == "phantom_0000.marf"
    assert read_marf(files[0]).shape == (32, 32)


def test_simulate_writes_masks_and_report(workspace, tmp_path, capsys):
    assert main(["simulate", str(workspace / "clean"), "--ts-eg", "6", "--out", str(tmp_path)]) == EXIT_OK
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["motion_spec"]["ts_eg"] == 6
    assert len(report["corrupted_fraction"]) == 20
    mask = json.loads((tmp_path / "phantom_0000.mask.json").read_text())
    assert len(mask) == 32
    assert "mean corrupted fraction" in capsys.readouterr().out


def test_simulate_is_seeded(workspace, tmp_path):
    main(["simulate", str(workspace / "clean"), "--seed", "3", "--out", str(tmp_path / "a")])
    main(["simulate", str(workspace / "clean"), "--seed", "3", "--out", str(tmp_path / "b")])
    a = read_marf(tmp_path / "a" / "phantom_0003.marf")
    assert np.array_equal(a, read_marf(tmp_path / "b" / "phantom_0003.marf"))


def test_train_infer_evaluate(workspace, tmp_path, capsys):
    run = tmp_path / "run"
    rc = main(["train", str(workspace / "ds"), "--config", str(workspace / "toy.json"), "--seed", "0", "--out", str(run)])
    assert rc == EXIT_OK
    assert (run / "checkpoint.unae").exists() and (run / "model.json").exists()
    assert len((run / "train.log").read_text().splitlines()) == 2

    inp = tmp_path / "inp"
    ref = tmp_path / "ref"
    for p in sorted((workspace / "ds" / "test").glob("*.corrupt.marf")):
        stem = p.name.split(".")[0]
        write_marf(inp / f"{stem}.marf", read_marf(p))
        write_marf(ref / f"{stem}.marf", read_marf(p.with_name(f"{stem}.clean.marf")))
    out = tmp_path / "out"
    assert main(["infer", str(run), str(inp), "--out", str(out), "--config", str(workspace / "toy.json")]) == EXIT_OK
    assert len(list(out.glob("*.reduced.marf"))) == len(list(inp.glob("*.marf")))

    capsys.readouterr()
    assert main(["evaluate", str(out), str(ref)]) == EXIT_OK
    text = capsys.readouterr().out.splitlines()
    doc = json.loads(text[-1])
    assert 0 < doc["ssim"] <= 1 and doc["n_images"] == len(list(inp.glob("*.marf")))


def test_infer_refuses_mismatched_config(workspace, tmp_path, capsys):
    run = tmp_path / "run"
    main(["train", str(workspace / "ds"), "--config", str(workspace / "toy.json"), "--out", str(run)])
    other = dict(TOY, model={**TOY["model"], "generator": {"n_groups": 1, "n_blocks_per_group": 2, "channels": 16}})
    (tmp_path / "other.json").write_text(json.dumps(other))
    rc = main(["infer", str(run), str(workspace / "clean"), "--out", str(tmp_path / "o"), "--config", str(tmp_path / "other.json")])
    assert rc == EXIT_DATA
    err = capsys.readouterr().err
    assert "checkpoint:" in err and "requested:" in err


def test_toml_config(workspace, tmp_path):
    (tmp_path / "c.toml").write_text(
        "batch_size = 2\nepochs = 1\nmax_steps = 2\n"
        "[model.generator]\nn_groups = 1\nn_blocks_per_group = 1\nchannels = 16\n"
        "[model.discriminator]\nbase_channels = 8\nn_units = 2\n"
    )
    assert main(["train", str(workspace / "ds"), "--config", str(tmp_path / "c.toml"), "--out", str(tmp_path / "r")]) == 0
    manifest = json.loads((tmp_path / "r" / "model.json").read_text())
    assert manifest["train"]["max_steps"] == 2


def test_ablate_table(workspace, tmp_path, capsys):
    cfg = dict(TOY, max_steps=2)
    (tmp_path / "a.json").write_text(json.dumps(cfg))
    assert main(["ablate", str(workspace / "ds"), "--config", str(tmp_path / "a.json"), "--out", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 6 and lines[1].startswith("corrupted input")
    doc = json.loads((tmp_path / "ablation.json").read_text())
    assert len(doc["rows"]) == 4


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["nonsense"],
        ["phantom", "--count", "0", "--out", "x"],
        ["phantom", "--out"],
    ],
)
def test_usage_errors(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == EXIT_USAGE


def test_bad_config_is_usage_error(workspace, tmp_path):
    (tmp_path / "bad.json").write_text('{"lr": -1}')
    rc = main(["train", str(workspace / "ds"), "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "r")])
    assert rc == EXIT_USAGE
    (tmp_path / "junk.json").write_text("{not json")
    assert main(["train", str(workspace / "ds"), "--config", str(tmp_path / "junk.json"), "--out", str(tmp_path / "r")]) == EXIT_USAGE


def test_data_errors(tmp_path):
    assert main(["simulate", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == EXIT_DATA
    (tmp_path / "empty").mkdir()
    assert main(["simulate", str(tmp_path / "empty"), "--out", str(tmp_path / "o")]) == EXIT_DATA
    (tmp_path / "corrupt").mkdir()
    (tmp_path / "corrupt" / "x.marf").write_bytes(b"MARF\x01")
    assert main(["simulate", str(tmp_path / "corrupt"), "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert main(["train", str(tmp_path / "empty"), "--out", str(tmp_path / "r")]) == EXIT_DATA


def test_evaluate_unmatched(tmp_path):
    write_marf(tmp_path / "a" / "one.marf", np.zeros((8, 8)))
    write_marf(tmp_path / "b" / "two.marf", np.zeros((8, 8)))
    assert main(["evaluate", str(tmp_path / "a"), str(tmp_path / "b")]) == EXIT_DATA


def test_thread_env_validated(tmp_path, monkeypatch):
    monkeypatch.setenv("UNAEN_THREADS", "lots")
    assert main(["phantom", "--count", "1", "--size", "32", "--out", str(tmp_path)]) == EXIT_USAGE
    monkeypatch.setenv("UNAEN_THREADS", "1")
    assert main(["phantom", "--count", "1", "--size", "32", "--out", str(tmp_path)]) == EXIT_OK
