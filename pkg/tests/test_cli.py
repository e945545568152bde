import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from popmech import config as cfgmod
from popmech.cli import build_parser, main
from popmech.config import ConfigError
from popmech.datagen import load_dataset
from popmech.energy import init_params, EnergyConfig
from popmech.trainer import load_checkpoint

SMALL = {
    "sde": {"N": 24, "num_train": 4, "num_test": 2},
    "energy": {"hidden": 4, "blocks": 1, "heads": 2, "ff_inner": 8},
    "train": {"epochs": 4, "lr_theta": 1e-3},
    "loss": {"max_iters": 30, "tol": 1e-4},
}


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "exp.yaml"
    p.write_text(yaml.safe_dump(SMALL))
    return p


@pytest.fixture
def data_dir(tmp_path, cfg_file):
    out = tmp_path / "data"
    assert main(["gen-sde", "--config", str(cfg_file), "--out", str(out), "--seed", "7"]) == 0
    return out


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_gen_sde_is_deterministic(tmp_path, cfg_file, data_dir):
    again = tmp_path / "again"
    assert main(["gen-sde", "--config", str(cfg_file), "--out", str(again), "--seed", "7"]) == 0
    assert _files(data_dir) == _files(again)
    prov = json.loads((data_dir / "provenance.json").read_text())
    assert prov["seed"] == 7 and prov["command"] == "gen-sde" and len(prov["config_hash"]) == 16


def test_gen_boids_default_sizes(tmp_path):
    out = tmp_path / "boids"
    assert main(["gen-boids", "--out", str(out)]) == 0
    ds = load_dataset(out)
    train, test = ds.split()
    assert len(train) == 50 and len(test) == 50
    assert all(s.shape == (1000, 2) for s in ds.snapshots)
    assert ds.velocity(0) is not None


def test_invalid_potential_is_a_config_error(tmp_path, capsys):
    code = main(["gen-sde", "--set", "sde.potential=himmelblau", "--out", str(tmp_path / "x")])
    assert code == 2
    assert "/sde/potential" in capsys.readouterr().err


def test_unknown_key_rejected_with_pointer(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("train:\n  learning_rate: 0.1\n")
    with pytest.raises(ConfigError, match="/train/learning_rate"):
        cfgmod.load(p)
    with pytest.raises(ConfigError, match="/train/lr_theta"):
        cfgmod.validate({"train": {"lr_theta": "fast"}})
    with pytest.raises(ConfigError, match="/train/lr_theta"):
        cfgmod.validate({"train": {"lr_theta": -1.0}})


def test_committed_configs_validate():
    from pathlib import Path
    root = Path(__file__).resolve().parents[1] / "configs"
    names = sorted(p.name for p in root.glob("*.yaml"))
    assert {"gf_quadratic.yaml", "boids.yaml"} <= set(names)
    for name in names:
        cfgmod.load(root / name)


def test_train_zero_epochs_writes_initial_weights(tmp_path, cfg_file, data_dir):
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg_file), "--data", str(data_dir), "--out", str(run),
                 "--epochs", "0", "--seed", "5"]) == 0
    state = load_checkpoint(run / "checkpoint.pmk")
    ref = init_params(EnergyConfig(dim=2, **SMALL["energy"]), 5)
    assert state.epoch == 0
    assert all(np.array_equal(state.params.arrays[k], ref.arrays[k]) for k in ref.arrays)


def test_resume_continues_history(tmp_path, cfg_file, data_dir):
    full, part = tmp_path / "full", tmp_path / "part"
    base = ["train", "--config", str(cfg_file), "--data", str(data_dir)]
    assert main(base + ["--out", str(full), "--epochs", "4"]) == 0
    assert main(base + ["--out", str(part), "--epochs", "2"]) == 0
    assert main(base + ["--out", str(part), "--epochs", "4", "--resume"]) == 0
    a = [json.loads(l) for l in (full / "train_log.jsonl").read_text().splitlines()]
    b = [json.loads(l) for l in (part / "train_log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in b] == [0, 1, 2, 3]
    assert [r["loss"] for r in a] == [r["loss"] for r in b]
    summary = json.loads((part / "summary.json").read_text())
    assert summary["epochs"] == 4 and summary["gamma"] >= 0


def test_rollout_then_eval_on_own_trajectory_is_near_zero(tmp_path, cfg_file, data_dir, capsys):
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg_file), "--data", str(data_dir), "--out", str(run)]) == 0
    ck = str(run / "checkpoint.pmk")
    roll = tmp_path / "roll"
    assert main(["rollout", "--config", str(cfg_file), "--checkpoint", ck, "--data", str(data_dir),
                 "--out", str(roll)]) == 0
    traj = load_dataset(roll)
    assert traj.meta["substeps"] == 5
    out = tmp_path / "eval"
    capsys.readouterr()
    assert main(["eval", "--config", str(cfg_file), "--checkpoint", ck, "--data", str(roll), "--out", str(out)]) == 0
    printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert printed["protocol"] == "forecast"
    assert printed["train"] <= 1e-12 and printed["test"] <= 1e-12


def test_eval_is_repeatable_and_records_protocol(tmp_path, cfg_file, data_dir):
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg_file), "--data", str(data_dir), "--out", str(run)]) == 0
    outs = []
    for name in ("e1", "e2"):
        out = tmp_path / name
        args = ["eval", "--config", str(cfg_file), "--checkpoint", str(run / "checkpoint.pmk"), "--data",
                str(data_dir), "--out", str(out), "--protocol", "both", "--v-mode", "carried",
                "--formats", "csv,json,svg"]
        assert main(args) == 0
        outs.append(out)
    files = _files(outs[0])
    assert files == _files(outs[1])
    doc = json.loads(files["interpolate_summary.json"])
    assert doc["protocol"] == "interpolate" and doc["v_mode"] == "carried"
    assert [e["label"] for e in doc["entries"]] == ["heldout", "heldout"]
    assert any(name.endswith(".svg") for name in files)


def test_eval_refuses_dimension_mismatch(tmp_path, cfg_file, data_dir, capsys):
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg_file), "--data", str(data_dir), "--out", str(run),
                 "--epochs", "0"]) == 0
    d3 = tmp_path / "d3"
    assert main(["gen-sde", "--config", str(cfg_file), "--set", "sde.dim=3", "--out", str(d3)]) == 0
    code = main(["eval", "--checkpoint", str(run / "checkpoint.pmk"), "--data", str(d3), "--out", str(tmp_path / "e")])
    assert code == 3
    assert "dim 2" in capsys.readouterr().err


def test_missing_artifacts_name_expected_paths(tmp_path, capsys):
    code = main(["eval", "--checkpoint", str(tmp_path / "nope.pmk"), "--data", str(tmp_path / "nodata")])
    assert code == 3
    assert str(tmp_path) in capsys.readouterr().err
    assert main(["train", "--out", str(tmp_path / "r")]) == 3


def test_seed_fan_out_and_report(tmp_path, cfg_file, data_dir, monkeypatch):
    monkeypatch.setenv("POPMECH_THREADS", "1")
    runs = tmp_path / "runs"
    assert main(["train", "--config", str(cfg_file), "--data", str(data_dir), "--out", str(runs),
                 "--seeds", "1,2", "--epochs", "1"]) == 0
    evals = []
    for s in (1, 2):
        out = tmp_path / f"eval_{s}"
        assert main(["eval", "--config", str(cfg_file), "--checkpoint", str(runs / f"seed_{s}" / "checkpoint.pmk"),
                     "--data", str(data_dir), "--out", str(out)]) == 0
        evals.append(str(out))
    agg_dir = tmp_path / "agg"
    assert main(["report", *evals, "--out", str(agg_dir)]) == 0
    agg = json.loads((agg_dir / "aggregate.json").read_text())
    assert agg["forecast"]["train"]["num_seeds"] == 2
    assert (agg_dir / "aggregate.csv").read_text().startswith("protocol,label,mean_of_means")


def test_bad_seed_list(tmp_path, cfg_file, data_dir):
    assert main(["train", "--config", str(cfg_file), "--data", str(data_dir), "--seeds", "1,x"]) == 2


def test_help_lists_flags_with_defaults():
    text = build_parser()._subparsers._group_actions[0].choices["eval"].format_help()
    for flag in ("--substeps", "--protocol", "--v-mode", "--weights", "--formats", "--heldout", "--checkpoint"):
        assert flag in text
    assert "config default: 5" in text
    train_help = build_parser()._subparsers._group_actions[0].choices["train"].format_help()
    assert "--resume" in train_help and "--seeds" in train_help


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "popmech.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("popmech ")
