import json
import logging
import os
from pathlib import Path

import numpy as np
import pytest

from fitcarl import cli
from fitcarl.split import load_split
from fitcarl.train import Checkpoint, TrainConfig, initial_params

FAST = "d = 8\nL = 2\ncap = 8\npretrain_epochs = 0\nvalid_every = 2\nmax_queries = 40\nbeam = 5\n"

# published dataset statistics; checked only when a dataset directory is supplied
DATASET_STATS = {
    "ICEWS14-OOG": (7128, 230, 365, 385, 48, 49, 83448, 5772, 718, 705),
    "ICEWS18-OOG": (23033, 256, 304, 1268, 160, 158, 444269, 19291, 2425, 2373),
    "ICEWS0515-OOG": (10488, 251, 4017, 647, 80, 82, 448695, 10115, 1217, 1228),
}


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("split")
    assert cli.main(["make-splits", "--synthetic", "--out", str(out), "--seed", "0"]) == 0
    return out


@pytest.fixture
def fast_cfg(tmp_path):
    p = tmp_path / "fast.cfg"
    p.write_text(FAST)
    return p


def read_cfg(path):
    return dict(line.split(" = ", 1) for line in Path(path).read_text().splitlines())


def test_make_splits_writes_layout(data):
    for name in ["background.txt", "meta_train.txt", "meta_valid.txt", "meta_test.txt", "concepts.txt"]:
        assert (data / name).exists()
    split = load_split(data)
    assert split.statistics()["entities"] == 200


def test_train_zero_episodes_equals_init(data, fast_cfg, tmp_path):
    out = tmp_path / "run"
    assert cli.main(["train", "--data", str(data), "--out", str(out), "--config", str(fast_cfg),
                     "--episodes", "0", "--seeds", "1"]) == 0
    ck = Checkpoint.load(out / "best.ckpt")
    init = initial_params(load_split(data), ck.config)
    for k in init:
        assert ck.params[k].data.tobytes() == init[k].data.tobytes()
    assert (out / "curve.csv").read_text().startswith("episode,loss,valid_mrr")


def test_eval_reports_per_seed_arrays_and_mean(data, fast_cfg, tmp_path):
    run = tmp_path / "run"
    cli.main(["train", "--data", str(data), "--out", str(run), "--config", str(fast_cfg), "--episodes", "0",
              "--seeds", "1"])
    out = tmp_path / "ev"
    assert cli.main(["eval", "--data", str(data), "--checkpoint", str(run / "best.ckpt"), "--out", str(out),
                     "--seeds", "1,2,3,4,5"]) == 0
    body = json.loads((out / "metrics.json").read_text())
    for key in ("mrr", "hits1", "hits3", "hits10"):
        assert len(body["per_seed"][key]) == 5
        assert body[key] == pytest.approx(np.mean(body["per_seed"][key]), abs=1e-15)
    assert body["hits1"] <= body["hits3"] <= body["hits10"]
    rows = (out / "buckets.csv").read_text().splitlines()
    assert rows[0] == "bucket,mrr,count"
    assert sum(int(r.split(",")[2]) for r in rows[1:]) == body["n_queries"]


def test_commands_are_idempotent(data, fast_cfg, tmp_path):
    outs = []
    for i in range(2):
        run, ev = tmp_path / f"run{i}", tmp_path / f"ev{i}"
        cli.main(["train", "--data", str(data), "--out", str(run), "--config", str(fast_cfg), "--episodes", "2",
                  "--seeds", "1"])
        cli.main(["eval", "--data", str(data), "--checkpoint", str(run / "best.ckpt"), "--out", str(ev),
                  "--seeds", "1,2"])
        outs.append([(run / "best.ckpt").read_bytes(), (run / "curve.csv").read_bytes(),
                     (ev / "metrics.json").read_bytes(), (ev / "buckets.csv").read_bytes()])
    assert outs[0] == outs[1]


def test_explain_writes_trace(data, fast_cfg, tmp_path, capsys):
    run = tmp_path / "run"
    cli.main(["train", "--data", str(data), "--out", str(run), "--config", str(fast_cfg), "--episodes", "0",
              "--seeds", "1"])
    assert cli.main(["explain", "--data", str(data), "--checkpoint", str(run / "best.ckpt"),
                     "--out", str(tmp_path / "ex"), "--index", "2"]) == 0
    lines = (tmp_path / "ex" / "path.txt").read_text().splitlines()
    assert lines[0].startswith("# query") and len(lines) == 1 + 2
    assert all("-[" in ln and "p=" in ln and "conf=" in ln for ln in lines[1:])


def test_config_layering(data, fast_cfg, tmp_path):
    base = tmp_path / "a"
    cli.main(["train", "--data", str(data), "--out", str(base), "--config", str(fast_cfg), "--episodes", "0",
              "--seeds", "1"])
    assert read_cfg(base / "config.txt")["beam"] == "5"
    assert read_cfg(base / "config.txt")["gamma"] == str(TrainConfig().gamma)
    over = tmp_path / "b"
    cli.main(["train", "--data", str(data), "--out", str(over), "--config", str(fast_cfg), "--episodes", "0",
              "--seeds", "1", "--beam", "9", "--ablation", "B", "--ablation", "C"])
    cfg = read_cfg(over / "config.txt")
    assert cfg["beam"] == "9" and cfg["ablations"] == "B,C"


def test_validation_errors_exit_1(data, tmp_path, capsys):
    assert cli.main(["train", "--data", str(data), "--out", str(tmp_path), "--bogus"]) == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour = 3\n")
    assert cli.main(["train", "--data", str(data), "--out", str(tmp_path), "--config", str(bad)]) == 1
    assert "colour" in capsys.readouterr().err
    bad.write_text("gamma = 1.5\n")
    assert cli.main(["train", "--data", str(data), "--out", str(tmp_path), "--config", str(bad)]) == 1
    assert cli.main(["eval", "--data", str(data), "--checkpoint", str(tmp_path / "missing.ckpt"),
                     "--out", str(tmp_path)]) == 1
    assert cli.main(["inspect", "--data", str(tmp_path / "nowhere")]) == 1
    assert cli.main(["train", "--data", str(data), "--out", str(tmp_path), "--shots", "2"]) == 1


def test_runtime_failure_exits_2(data, tmp_path):
    ck = tmp_path / "broken.ckpt"
    ck.write_bytes(b"FITCARL1" + b"\x00" * 5)
    assert cli.main(["eval", "--data", str(data), "--checkpoint", str(ck), "--out", str(tmp_path)]) == 2


def test_help_lists_defaults(capsys):
    fmt = cli.HelpFormatter("fitcarl")
    for command in ["pretrain", "make-splits", "train", "eval", "explain", "inspect"]:
        with pytest.raises(SystemExit) as exc:
            cli.main([command, "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for action in cli.build_parser()._subparsers._group_actions[0].choices[command]._actions:
            if action.option_strings and action.dest != "help":
                assert action.option_strings[0] in text
                if not action.required:
                    assert "default" in fmt._get_help_string(action), action.dest


def test_train_help_defaults_match_config():
    sub = cli.build_parser()._subparsers._group_actions[0].choices["train"]
    helps = {a.dest: a.help for a in sub._actions}
    d = TrainConfig()
    assert f"default {d.beam}" in helps["beam"] and f"default {d.episodes}" in helps["episodes"]


def test_log_level_from_environment(monkeypatch):
    root = logging.getLogger()
    saved = (root.level, list(root.handlers))
    root.handlers[:] = []
    try:
        monkeypatch.setenv("FITCARL_LOG", "debug")
        cli.setup_logging()
        assert root.level == logging.DEBUG
    finally:
        root.setLevel(saved[0])
        root.handlers[:] = saved[1]


def test_inspect_prints_statistics(data, capsys):
    assert cli.main(["inspect", "--data", str(data)]) == 0
    head, row = capsys.readouterr().out.strip().splitlines()
    stats = load_split(data).statistics()
    assert row.split("\t")[1:] == [str(stats[c]) for c in cli.STAT_COLUMNS]


@pytest.mark.parametrize("name", sorted(DATASET_STATS))
def test_inspect_reproduces_dataset_table(name, capsys):
    root = os.environ.get("FITCARL_DATA_DIR")
    if not root or not (Path(root) / name).is_dir():
        pytest.skip(f"{name} not available; set FITCARL_DATA_DIR")
    assert cli.main(["inspect", "--data", str(Path(root) / name)]) == 0
    row = capsys.readouterr().out.strip().splitlines()[1].split("\t")[1:]
    assert tuple(int(x) for x in row) == DATASET_STATS[name]
