"""Run configuration parsing and the command-line workflow end to end."""
import hashlib
import json

import numpy as np
import pytest

from hgat import autodiff as ad
from hgat import cli
from hgat.baselines import PersistenceForecaster
from hgat.config import RunConfig, load_config
from hgat.dataset import load_frame, prepare
from hgat.errors import ConfigError
from hgat.graph import NodeType, load_graph_spec
from hgat.training import evaluate, load_checkpoint, read_history

SMALL_INI = """\
[simulate]
n_units = 2
duration = 28800
schedule_period = 900
seed = 4

[data]
w = 6
h = 2

[model]
layers = 1
d_emb = 4
hidden = 4

[train]
epochs = 2
lr = 0.003
"""


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ini = root / "small.ini"
    ini.write_text(SMALL_INI + "\n[run]\nout_dir = data\n")
    assert cli.main(["simulate", "--config", str(ini)]) == 0
    return root, root / "data"


def run_config(root, data, extra=""):
    text = SMALL_INI.replace("[data]\n", f"[data]\ncsv = {data / 'telemetry.csv'}\ngraph = {data / 'plant.graph'}\n")
    path = root / f"cfg_{hashlib.md5(extra.encode()).hexdigest()[:8]}.ini"
    path.write_text(text + extra)
    return path


# ------------------------------------------------------------------ config


def test_unknown_keys_and_sections_are_rejected(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nepoch = 3\n")
    with pytest.raises(ConfigError, match="unknown key 'epoch'"):
        load_config(bad)
    bad.write_text("[optimizer]\nlr = 1\n")
    with pytest.raises(ConfigError, match=r"unknown config section \[optimizer\]"):
        load_config(bad)
    with pytest.raises(ConfigError, match="cannot parse"):
        load_config(overrides=["train.epochs=many"])
    with pytest.raises(ConfigError, match="section.key=value"):
        load_config(overrides=["epochs=3"])


def test_resolved_config_round_trips(tmp_path):
    cfg = load_config(overrides=["model.layers=2", "data.center_diffs=yes", "simulate.constant_dispatch=0.5"])
    path = tmp_path / "resolved.ini"
    cfg.save(path)
    again = load_config(path)
    assert again == cfg
    assert again.model.layers == 2 and again.data.center_diffs and again.simulate.constant_dispatch == 0.5
    assert RunConfig().simulate.constant_dispatch is None


def test_relative_paths_resolve_against_the_config_file(tmp_path):
    (tmp_path / "sub").mkdir()
    path = tmp_path / "sub" / "c.ini"
    path.write_text("[data]\ncsv = ../t.csv\n")
    assert load_config(path).data.csv == str((tmp_path / "t.csv").resolve())


def test_invalid_values_fail_validation():
    with pytest.raises(ConfigError):
        load_config(overrides=["train.epochs=0"])
    with pytest.raises(ConfigError):
        load_config(overrides=["data.w=0"])


# ------------------------------------------------------------------ simulate


def test_default_simulation_files(tmp_path, capsys):
    assert cli.main(["simulate", "--out-dir", str(tmp_path)]) == 0
    lines = (tmp_path / "telemetry.csv").read_text().splitlines()
    cfg = RunConfig().simulate
    assert len(lines) - 1 == int(cfg.duration / cfg.sampling_period)
    g = load_graph_spec(tmp_path / "plant.graph")
    assert sum(1 for n in g.nodes_of(NodeType.ELEC) if n.id.startswith("G")) == 7
    assert (tmp_path / "config.ini").is_file()
    assert "rows" in capsys.readouterr().out


def test_simulation_is_reproducible(tmp_path):
    for name in ("a", "b", "c"):
        seed = "5" if name != "c" else "6"
        assert cli.main(["simulate", "--out-dir", str(tmp_path / name), "--seed", seed,
                         "--set", "simulate.duration=7200"]) == 0
    assert sha(tmp_path / "a" / "telemetry.csv") == sha(tmp_path / "b" / "telemetry.csv")
    assert sha(tmp_path / "a" / "plant.graph") == sha(tmp_path / "b" / "plant.graph")
    assert sha(tmp_path / "a" / "telemetry.csv") != sha(tmp_path / "c" / "telemetry.csv")


# ------------------------------------------------------------------ train / evaluate


def test_persistence_trains_instantly_and_matches_the_library(workspace, tmp_path):
    root, data = workspace
    cfg_path = run_config(root, data)
    out = tmp_path / "p"
    assert cli.main(["train", "--config", str(cfg_path), "--model", "persistence", "--out-dir", str(out)]) == 0
    assert not (out / "history.csv").exists() and not (out / "checkpoint.npz").exists()
    assert cli.main(["evaluate", "--config", str(cfg_path), "--model", "persistence", "--out-dir", str(out)]) == 0
    cli_metrics = json.loads((out / "metrics_test.json").read_text())
    cfg = load_config(cfg_path)
    graph = load_graph_spec(cfg.data.graph)
    prep = prepare(load_frame(cfg.data.csv, graph), graph, cfg.data.w, cfg.data.h)
    lib = evaluate(PersistenceForecaster(), prep, "test")
    assert cli_metrics["NRMSE"] == lib["NRMSE"] and cli_metrics["NMAE"] == lib["NMAE"]


def test_one_epoch_gives_one_history_row(workspace, tmp_path):
    root, data = workspace
    out = tmp_path / "one"
    argv = ["train", "--config", str(run_config(root, data)), "--epochs", "1", "--out-dir", str(out)]
    assert cli.main(argv) == 0
    assert len(read_history(out / "history.csv")) == 1
    assert {"config.ini", "scalers.txt", "checkpoint.npz", "metrics_val.json"} <= {p.name for p in out.iterdir()}


@pytest.fixture(scope="module")
def trained(workspace):
    root, data = workspace
    cfg_path = run_config(root, data)
    out = root / "trained"
    assert cli.main(["train", "--config", str(cfg_path), "--out-dir", str(out)]) == 0
    return cfg_path, out


def test_metrics_json_has_every_declared_key(trained):
    cfg_path, out = trained
    assert cli.main(["evaluate", "--config", str(cfg_path), "--checkpoint", str(out / "checkpoint.npz"),
                     "--out-dir", str(out)]) == 0
    m = json.loads((out / "metrics_test.json").read_text())
    nodes = {n.id for n in load_graph_spec(load_config(cfg_path).data.graph).nodes_of(NodeType.ELEC)}
    for metric in ("NMAE", "NRMSE"):
        assert set(m[metric]) == {"overall", "P", "Q", "U", "I", "nodes"}
        assert set(m[metric]["nodes"]) == nodes
        for block in m[metric]["nodes"].values():
            assert set(block) == {"overall", "P", "Q", "U", "I"}
    assert m["schema_version"] == 1 and m["split"] == "test"
    header = (out / "forecast_test.csv").read_text().splitlines()[0]
    assert header == "timestamp,channel,truth,prediction,horizon_step"
    assert (out / "nodes_test.csv").is_file()


def test_checkpoint_reproduces_the_logged_validation_score(trained):
    cfg_path, out = trained
    ck = load_checkpoint(out / "checkpoint.npz")
    assert cli.main(["evaluate", "--config", str(cfg_path), "--checkpoint", str(out / "checkpoint.npz"),
                     "--split", "val", "--out-dir", str(out / "eval")]) == 0
    m = json.loads((out / "eval" / "metrics_val.json").read_text())
    assert m["NRMSE"]["overall"] == ck.header["best_score"]
    logged = json.loads((out / "metrics_val.json").read_text())
    assert logged["training"]["best_val_nrmse"] == ck.header["best_score"]


def test_fingerprint_mismatch_is_refused(trained, capsys):
    cfg_path, out = trained
    code = cli.main(["evaluate", "--config", str(cfg_path), "--checkpoint", str(out / "checkpoint.npz"),
                     "--set", "data.w=5", "--out-dir", str(out / "x")])
    assert code == 1
    err = capsys.readouterr().err
    assert "fingerprint" in err and load_checkpoint(out / "checkpoint.npz").fingerprint in err


def test_two_seeds_record_different_results(workspace, tmp_path):
    root, data = workspace
    scores = []
    for seed in (0, 1):
        out = tmp_path / f"s{seed}"
        assert cli.main(["train", "--config", str(run_config(root, data)), "--seed", str(seed),
                         "--out-dir", str(out)]) == 0
        scores.append(json.loads((out / "metrics_val.json").read_text())["NRMSE"]["overall"])
    assert scores[0] != scores[1]


def test_identical_runs_write_identical_files(workspace, tmp_path):
    root, data = workspace
    for name in ("a", "b"):
        assert cli.main(["train", "--config", str(run_config(root, data)), "--out-dir", str(tmp_path / name)]) == 0
    for f in ("history.csv", "metrics_val.json"):
        assert sha(tmp_path / "a" / f) == sha(tmp_path / "b" / f)


def test_forecast_command(trained, tmp_path):
    cfg_path, out = trained
    assert cli.main(["forecast", "--config", str(cfg_path), "--checkpoint", str(out / "checkpoint.npz"),
                     "--split", "val", "--out-dir", str(tmp_path)]) == 0
    rows = (tmp_path / "forecast_val.csv").read_text().splitlines()[1:]
    cfg = load_config(cfg_path)
    assert {r.rsplit(",", 1)[1] for r in rows} == {str(k + 1) for k in range(cfg.data.h)}


# ------------------------------------------------------------------ ablate


def test_ablation_table(workspace, tmp_path, capsys):
    root, data = workspace
    out = tmp_path / "abl"
    argv = ["ablate", "--config", str(run_config(root, data)), "--kinds", "persistence,gru_signal",
            "--seeds", "0,1,2", "--epochs", "1", "--out-dir", str(out)]
    assert cli.main(argv) == 0
    rows = (out / "ablation.csv").read_text().splitlines()
    assert rows[0].split(",")[:4] == ["model", "n_seeds", "NRMSE_mean", "NRMSE_std"]
    table = {r.split(",")[0]: r.split(",") for r in rows[1:]}
    assert table["persistence"][1] == "1" and table["persistence"][3] == ""
    assert table["gru_signal"][1] == "3" and float(table["gru_signal"][3]) >= 0.0
    assert "x100" in capsys.readouterr().out
    assert (out / "ablation.txt").is_file() and (out / "ablation_runs.csv").is_file()


def test_single_kind_ablation_is_one_row(workspace, tmp_path):
    root, data = workspace
    out = tmp_path / "one"
    assert cli.main(["ablate", "--config", str(run_config(root, data)), "--kinds", "persistence",
                     "--out-dir", str(out)]) == 0
    assert len((out / "ablation.csv").read_text().splitlines()) == 2


def test_ablation_records_failures_and_continues(workspace, tmp_path, monkeypatch):
    root, data = workspace
    real = cli._train_one

    def flaky(kind, *a, **kw):
        if kind == "gru_signal":
            raise RuntimeError("boom")
        return real(kind, *a, **kw)

    monkeypatch.setattr(cli, "_train_one", flaky)
    cfg = load_config(run_config(root, data))
    runs, table = cli.run_ablation(cfg, ["gru_signal", "persistence"], [0, 1])
    assert [r["failures"] for r in table] == [2, 0]
    assert table[1]["n_seeds"] == 1 and all("boom" in r["error"] for r in runs if not r["ok"])


# ------------------------------------------------------------------ gradcheck


def test_gradcheck_passes_and_lists_every_op(capsys, tmp_path):
    assert cli.main(["gradcheck", "--out-dir", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    for name in ad.REGISTERED_OPS:
        assert f"PASS  {name} " in text
    assert "hgat_end_to_end" in text
    assert (tmp_path / "gradcheck.txt").read_text() == text


def test_corrupted_backward_rule_is_named(capsys, monkeypatch):
    def bad_tanh(a):
        a = ad.as_tensor(a)
        y = np.tanh(a.values)
        return ad._emit(y, (a,), lambda g: (g * (1.0 - y),))  # wrong derivative

    monkeypatch.setattr(ad, "tanh", bad_tanh)
    assert cli.main(["gradcheck"]) == 1
    fails = [line for line in capsys.readouterr().out.splitlines() if line.startswith("FAIL")]
    assert any(" tanh " in line for line in fails)


# ------------------------------------------------------------------ exit codes


def test_exit_codes(tmp_path, capsys, monkeypatch):
    assert cli.main(["--help"]) == 0
    assert cli.main(["train", "--config", str(tmp_path / "missing.ini")]) == 1
    assert "config file not found" in capsys.readouterr().err
    assert cli.main(["frobnicate"]) == 1
    assert cli.main(["evaluate", "--set", f"data.csv={tmp_path / 'nope.csv'}", "--model", "gat",
                     "--out-dir", str(tmp_path / "never")]) == 1
    assert not (tmp_path / "never").exists()

    def explode(args):
        raise RuntimeError("internal bug")

    monkeypatch.setitem(cli.COMMANDS, "gradcheck", explode)
    assert cli.main(["gradcheck"]) == 2
    assert "internal bug" in capsys.readouterr().err


def test_missing_data_file_reports_the_path(tmp_path, capsys):
    missing = tmp_path / "nope.csv"
    code = cli.main(["train", "--set", f"data.csv={missing}", "--set", f"data.graph={tmp_path / 'g.graph'}",
                     "--out-dir", str(tmp_path / "o")])
    assert code == 1
    assert str(tmp_path) in capsys.readouterr().err


def test_reference_config_lists_every_default():
    from pathlib import Path

    path = Path(__file__).resolve().parents[1] / "configs" / "reference.ini"
    cfg = load_config(path)
    default = load_config()
    for section in ("data", "simulate", "model", "train", "ablate"):
        got, want = getattr(cfg, section), getattr(default, section)
        if section == "data":
            got = type(got)(**{**vars(got), "csv": want.csv, "graph": want.graph})
        assert got == want, section
    keys = {line.split("=")[0].strip() for line in path.read_text().splitlines()
            if "=" in line and not line.lstrip().startswith("#")}
    assert keys == {k.split(" = ")[0] for k in RunConfig().to_ini().splitlines() if " = " in k}
