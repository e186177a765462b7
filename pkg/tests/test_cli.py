import json
import subprocess
import sys

import numpy as np
import pytest

from illidvae import cli
from illidvae.models import build_model, load_checkpoint

SMALL_RUN = {
    "model": {"kind": "il-lidmvae", "icnn": {"layers": 1, "width": 4}, "encoder": {"layers": 1, "width": 4}},
    "train": {"epochs": 2, "batch_size": 50, "eval_every": 1, "seed": 4},
    "data": {"toy": {"sigma": 2.0, "n": 60}},
    "eval": {"n_mc": 128, "n_eval_points": 8},
}


def write_cfg(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def run(tmp_path, doc, *extra):
    out = tmp_path / "out"
    code = cli.main([extra[0] if extra else "train", "--config", write_cfg(tmp_path, doc),
                     "--out", str(out), *extra[1:]])
    return code, out


@pytest.mark.parametrize("doc,pointer", [
    ({"model": {"foo": 1}}, "/model/foo"),
    ({"train": {"epochs": "ten"}}, "/train/epochs"),
    ({"train": {"anneal": {"decay": 2.0}}}, "/train/anneal"),
    ({"model": {"icnn": {"width": 1.5}}}, "/model/icnn/width"),
    ({"data": {"toy": {}, "idx": {"images": "x"}}}, "/data"),
    ({"experiment": {"L_grid": []}}, "/experiment/L_grid"),
    ({"eval": {"n_mc": 10}}, "/eval"),
])
def test_strict_parsing_reports_pointer(tmp_path, capsys, doc, pointer):
    code, _ = run(tmp_path, doc)
    assert code == cli.EXIT_CONFIG
    assert f"config error at {pointer}" in capsys.readouterr().err


def test_invalid_json_and_missing_out(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert cli.main(["train", "--config", write_cfg(tmp_path, {})]) == cli.EXIT_CONFIG
    assert "/out_dir" in capsys.readouterr().err


def test_seed_range_checked(tmp_path):
    assert run(tmp_path, SMALL_RUN, "train", "--seed", str(2 ** 64))[0] == cli.EXIT_CONFIG


def test_resolved_config_echoes_defaults(tmp_path):
    code, out = run(tmp_path, SMALL_RUN)
    assert code == cli.EXIT_OK
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["model"]["sigma_dec"] == 1.0
    assert resolved["train"]["learning_rate"] == 1e-2
    assert resolved["eval"]["n_mc"] == 128
    # the resolved file is itself a valid config
    cfg, _ = cli.load_config(str(out / "resolved_config.json"))
    assert cfg.to_dict() == resolved


def test_run_directory_contents(tmp_path):
    _, out = run(tmp_path, SMALL_RUN)
    for name in ("metrics.csv", "model.ckpt", "last_good.ckpt", "meta.json", "resolved_config.json"):
        assert (out / name).exists(), name
    meta = json.loads((out / "meta.json").read_text())
    assert meta["seed"] == 4 and "git_describe" in meta and meta["duration_s"] >= 0
    assert meta["eval_split"] == "test"


def test_zero_epochs_checkpoint_is_initialisation(tmp_path):
    doc = json.loads(json.dumps(SMALL_RUN))
    doc["train"]["epochs"] = 0
    code, out = run(tmp_path, doc)
    assert code == cli.EXIT_OK
    cfg, _ = cli.load_config(str(out / "resolved_config.json"))
    init = build_model(cfg.model, cli._model_rng(4))
    saved = load_checkpoint(out / "model.ckpt")
    assert all(np.array_equal(a, b) for a, b in zip(init.state(), saved.state()))


def test_eval_reproduces_final_training_row(tmp_path):
    code, out = run(tmp_path, SMALL_RUN)
    assert code == cli.EXIT_OK
    assert cli.main(["eval", "--config", str(out / "resolved_config.json"), "--out", str(out)]) == 0
    train_last = (out / "metrics.csv").read_text().splitlines()[-1]
    header, evaluated = (out / "eval_metrics.csv").read_text().splitlines()
    assert evaluated == train_last


def test_rerun_is_bit_identical(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    a.mkdir()
    b.mkdir()
    run(a, SMALL_RUN)
    run(b, SMALL_RUN)
    assert (a / "out" / "metrics.csv").read_bytes() == (b / "out" / "metrics.csv").read_bytes()
    assert (a / "out" / "model.ckpt").read_bytes() == (b / "out" / "model.ckpt").read_bytes()


def test_single_cell_toy_experiment(tmp_path):
    doc = {"model": {"icnn": {"layers": 1, "width": 4}, "encoder": {"layers": 1, "width": 4}},
           "train": {"epochs": 1, "batch_size": 50, "eval_every": 1},
           "data": {"toy": {"n": 50}},
           "eval": {"n_mc": 100, "n_eval_points": 8},
           "experiment": {"sigma_grid": [1.0], "L_grid": [0.5], "seeds": [7]}}
    code, out = run(tmp_path, doc, "toy-experiment")
    assert code == cli.EXIT_OK
    lines = (out / "toy_experiment.csv").read_text().splitlines()
    assert len(lines) == 2 and lines[1].startswith("sigma1_L0.5_seed7,")
    svgs = list(out.glob("*.svg"))
    assert [p.name for p in svgs] == ["sigma1_L0.5_seed7.svg"]
    assert svgs[0].read_text().startswith("<svg")
    resolved = json.loads((out / "cells" / "sigma1_L0.5_seed7" / "resolved_config.json").read_text())
    # toy defaults apply, decoder noise follows the cell's data noise
    assert resolved["model"]["kind"] == "il-lidmvae" and resolved["model"]["sigma_dec"] == 1.0
    assert resolved["model"]["L1"] == resolved["model"]["L2"] == 0.5


def test_cell_config_respects_pinned_sigma_dec():
    cfg, raw = cli.load_config(None, {"model": {"sigma_dec": 3.0}})
    assert cli.cell_config(cfg, raw, 7.5, 1.0, 0).model.sigma_dec == 3.0
    cfg, raw = cli.load_config(None, cli.TOY_DEFAULTS)
    assert cli.cell_config(cfg, raw, 7.5, 1.0, 0).model.sigma_dec == 7.5


def test_verify_passes(tmp_path, capsys):
    code = cli.main(["verify", "--out", str(tmp_path / "v")])
    table = capsys.readouterr().out
    assert code == cli.EXIT_OK
    assert ", 0 fail" in table.splitlines()[-1]
    assert (tmp_path / "v" / "verify_report.csv").exists()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "illidvae", "train", "--config",
                           write_cfg(tmp_path, {"model": {"bogus": 0}}), "--out", str(tmp_path / "o")],
                          capture_output=True, text=True)
    assert proc.returncode == cli.EXIT_CONFIG and "/model/bogus" in proc.stderr
    help_text = subprocess.run([sys.executable, "-m", "illidvae", "--help"], capture_output=True, text=True)
    assert help_text.returncode == 0
    for command in ("train", "eval", "verify", "toy-experiment"):
        assert command in help_text.stdout
