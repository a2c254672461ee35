import json

import numpy as np
import pytest

from fewshot_landmarks.cli import main
from fewshot_landmarks.config import (ConfigError, RunConfig, build_run_config, format_config,
                                      known_keys, load_config, parse_config_text)

# a stack small enough to train in seconds
FAST = ["--set", "base_steps=3", "--set", "n_tasks=2", "--set", "inner_steps=1",
        "--set", "train_query=2", "--set", "ft_steps=1"]


# --- config files -----------------------------------------------------------


def test_parse_config_text():
    text = "# comment\nbeta1 = 0.1  # inline\n\ninner_steps=3\n"
    assert parse_config_text(text) == {"beta1": "0.1", "inner_steps": "3"}
    with pytest.raises(ConfigError, match="line 1"):
        parse_config_text("beta1 0.1")


def test_build_run_config_types_and_shared_geometry():
    cfg = build_run_config({"beta1": "0.1", "channels": "1, 8, 8, 16, 16", "D": "16",
                            "H": "16", "W": "16", "h": "4", "w": "4", "order": "first"})
    assert cfg.meta.beta1 == 0.1 and cfg.meta.order == "first"
    assert cfg.model.channels == (1, 8, 8, 16, 16)
    assert cfg.model.H == cfg.data.H == 16 and cfg.data.h == 4


def test_config_errors():
    with pytest.raises(ConfigError, match="unknown"):
        build_run_config({"nope": "1"})
    with pytest.raises(ConfigError):
        build_run_config({"inner_steps": "many"})
    with pytest.raises(ConfigError):
        build_run_config({"inner_steps": "-2"})
    with pytest.raises(FileNotFoundError):
        load_config("/nonexistent/run.cfg")


def test_format_round_trip(tmp_path):
    cfg = build_run_config({"beta1": "0.07", "noise_sigma": "0.0", "channels": "1,4,4,8,8",
                            "D": "8"})
    p = tmp_path / "run.cfg"
    p.write_text(format_config(cfg))
    assert load_config(p) == cfg
    assert load_config(tmp_path / "run.cfg") != RunConfig()
    assert {"beta1", "gamma", "H", "noise_sigma", "D"} <= known_keys()


# --- command line -----------------------------------------------------------


def test_usage_errors(capsys):
    assert main(["--bogus"]) == 1
    assert main(["eval", "--method", "nope"]) == 1
    assert main(["eval", "--shots", "0"]) == 1
    assert main(["train-base", "--set", "beta1"]) == 1
    assert main(["train-base", "--set", "zzz=1"]) == 1


def test_missing_checkpoint_is_data_error(tmp_path, capsys):
    assert main(["eval", "--out", str(tmp_path), "--episodes", "1"]) == 2
    assert "theta0.ckpt" in capsys.readouterr().err


def test_numerical_failure_exit_code(tmp_path):
    assert main(["train-base", "--out", str(tmp_path), "--set", "base_steps=3",
                 "--set", "base_lr=1e12"]) == 3


def test_gen_data(tmp_path):
    out = tmp_path / "data"
    assert main(["gen-data", "--out", str(out), "--per-category", "1",
                 "--categories", "unseen"]) == 0
    assert (out / "samples.csv").exists()
    assert len(list(out.rglob("*.pgm"))) == 7


def test_pipeline_end_to_end(tmp_path, capsys):
    run = tmp_path / "run"
    common = ["--out", str(run), *FAST]
    assert main(["train-base", *common]) == 0
    assert main(["train-ppnet", *common]) == 0
    assert main(["meta-train", *common]) == 0
    assert main(["meta-train", "--variant", "ld_keep", *common]) == 0
    assert main(["meta-train", "--method", "maml", *common]) == 0
    for ck in ("theta0", "omega0", "phi", "theta", "theta_ld_keep", "maml"):
        assert (run / f"{ck}.ckpt").exists()

    ev = tmp_path / "eval"
    assert main(["eval", "--run-dir", str(run), "--out", str(ev), "--shots", "1,3",
                 "--episodes", "1", "--method", "metacloth,ft,maml,wg,proto", "--heatmaps",
                 *FAST]) == 0
    header = (ev / "episodes.csv").read_text().splitlines()[0]
    assert header == "method,benchmark,category,shot,episode_seed,ne"
    summary = json.loads((ev / "summary.json").read_text())
    assert {s["method"] for s in summary} == {"metacloth", "ft", "maml", "wg", "proto"}
    assert {s["shot"] for s in summary} == {1, 3, "mean"}
    assert len(list((ev / "heatmaps").iterdir())) == 7

    ab = tmp_path / "ablate"
    assert main(["ablate", "--run-dir", str(run), "--out", str(ab), "--episodes", "1",
                 *FAST]) == 0
    methods = {s["method"] for s in json.loads((ab / "summary.json").read_text())}
    assert methods == {"full", "base_fen", "base_fen_delta", "ld_keep", "ld_keep_delta"}

    sim = tmp_path / "sim"
    assert main(["similarity", "--run-dir", str(run), "--out", str(sim), "--episodes", "1",
                 *FAST]) == 0
    lines = (sim / "similarity.csv").read_text().splitlines()
    assert lines[0] == "method,category,same_landmark,different_landmark,n"
    assert len(lines) == 1 + 3 * 7
    assert "metacloth: same=" in capsys.readouterr().out


def test_config_file_and_flag_precedence(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("base_steps = 2\nbase_lr = 1e12\n")
    # the file alone diverges; a command-line override rescues it
    assert main(["train-base", "--config", str(cfg_file), "--out", str(tmp_path / "a")]) == 3
    assert main(["train-base", "--config", str(cfg_file), "--out", str(tmp_path / "b"),
                 "--set", "base_lr=0.1"]) == 0
    losses = np.loadtxt(tmp_path / "b" / "base_losses.csv", delimiter=",", skiprows=1)
    assert losses.shape == (2, 2)
