import csv
import json

import numpy as np
import pytest

from partseg.cli import main
from partseg.dataset import load_dataset, write_raster

TINY = {
    "generator": {"n_scans": 12, "image_size": [16, 16], "style_magnitude_px": 2},
    "split_fractions": [0.5, 0.25, 0.25],
    "alphas": [1, 2],
    "n_repeats": 1,
    "train_cfg": {"n_epochs": 1},
    "optimizer_cfg": {"eval_budget": 3, "local_search": False},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def test_gen_data_train_evaluate(tmp_path, config, capsys):
    data = tmp_path / "data"
    assert main(["gen-data", "--config", config, "--out", str(data), "--seed", "4"]) == 0
    assert len(load_dataset(data / "train")) == 6
    assert load_dataset(data / "validation").split_tag == "validation"
    (tmp_path / "g.txt").write_text("1 2 1 2 1 2\n")
    ckpt = tmp_path / "net.ckpt"
    assert main(["train", "--config", config, "--data", str(data / "train"),
                 "--genotype", str(tmp_path / "g.txt"), "--out", str(ckpt)]) == 0
    assert ckpt.read_bytes()[:4] == b"PNET"
    assert main(["evaluate", "--checkpoint", str(ckpt), "--data", str(data / "test"),
                 "--out", str(tmp_path / "rep")]) == 0
    agg = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert 0 <= agg["combined"] <= 1
    assert (tmp_path / "rep.jsonl").exists() and (tmp_path / "rep.csv").exists()


def test_optimize_and_resume(tmp_path, config, capsys):
    data = tmp_path / "data"
    main(["gen-data", "--config", config, "--out", str(data)])
    out = tmp_path / "opt"
    assert main(["optimize", "--config", config, "--data", str(data), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_trainings"] <= 3 and 0.5 <= summary["recovery"] <= 1
    assert (out / "history.csv").exists() and (out / "best_genotype.txt").exists()
    out2 = tmp_path / "opt2"
    assert main(["optimize", "--config", config, "--data", str(data), "--out", str(out2),
                 "--resume", str(out / "archive.jsonl"), "--budget", "1"]) == 0
    again = json.loads((out2 / "summary.json").read_text())
    assert again["best_fitness"] >= summary["best_fitness"]


def test_experiment_and_report(tmp_path, config):
    out = tmp_path / "exp"
    assert main(["experiment", "--config", config, "--out", str(out)]) == 0
    for name in ["results.csv", "table.md", "regions.csv", "rows.jsonl", "config.json",
                 "split_rep0.json"]:
        assert (out / name).exists()
    before = (out / "table.md").read_bytes()
    assert main(["report", "--rows", str(out / "rows.jsonl"), "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "table.md").read_bytes() == before


def test_score_masks(tmp_path):
    (tmp_path / "p").mkdir()
    (tmp_path / "r").mkdir()
    m = np.zeros((8, 8), np.uint8)
    m[2:6, 2:6] = 1
    write_raster(tmp_path / "r" / "a.pseg", m)
    write_raster(tmp_path / "p" / "a.pseg", m)
    write_raster(tmp_path / "r" / "b.pseg", m)
    write_raster(tmp_path / "p" / "b.pseg", np.roll(m, 1, axis=0))
    out = tmp_path / "scores.csv"
    assert main(["score-masks", "--pred", str(tmp_path / "p"), "--ref", str(tmp_path / "r"),
                 "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert list(rows[0]) == ["id", "dice", "sdsc_2mm", "sdsc_4mm", "combined", "base_dice",
                             "mid_dice", "apex_dice", "base_sdsc_2mm", "mid_sdsc_2mm",
                             "apex_sdsc_2mm"]
    assert float(rows[0]["combined"]) == 1.0 and float(rows[1]["dice"]) == 0.75


def test_grad_check(capsys):
    assert main(["grad-check", "--repeats", "1"]) == 0
    assert "max relative error" in capsys.readouterr().out


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"n_repeats": 0}))
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path)]) == 2
    bad.write_text("{not json")
    assert main(["gen-data", "--config", str(bad)]) == 2
    assert main(["evaluate", "--checkpoint", str(tmp_path / "missing"),
                 "--data", str(tmp_path)]) == 3
    (tmp_path / "r").mkdir()
    write_raster(tmp_path / "r" / "x.pseg", np.zeros((4, 4), np.uint8))
    assert main(["score-masks", "--pred", str(tmp_path), "--ref", str(tmp_path / "r")]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 2
