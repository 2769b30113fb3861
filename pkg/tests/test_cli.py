import json

import pytest

from conflictlab.cli import ConfigError, _schema, main, parse_config
from conflictlab.serialize import read_json

FAST = ["--set", "train.epochs=40", "--set", "train.warmup=10", "--set", "model.hidden_dim=8",
        "--set", "model.depth=2", "--set", "model.rank=4", "--set", "train.n_coll=16", "--set", "train.n_bc=4"]


def test_empty_config_gives_defaults(tmp_path):
    f = tmp_path / "empty.cfg"
    f.write_text("# nothing here\n\n")
    cfg = parse_config(f)
    for k, (_, d) in _schema().items():
        assert cfg[k] == d
    assert cfg["train.lr"] == 1e-3 and cfg["train.tau"] == 20


def test_override_beats_file(tmp_path):
    f = tmp_path / "a.cfg"
    f.write_text("train.lr = 0.01\nseed = 5\nproblem.name = heat1d\nproblem.kappa = 0.2\n")
    cfg = parse_config(f, ["train.lr=0.002"], seed=9)
    assert cfg["train.lr"] == 0.002 and cfg["seed"] == 9
    assert cfg["problem.kappa"] == 0.2


@pytest.mark.parametrize("bad", [["nope.key=1"], ["train.rho_min=0.9", "train.rho_max=0.2"],
                                 ["train.lr=fast"], ["problem.name=unknown"], ["method=magic"],
                                 ["train.warmup=5000"], ["model.hidden_dim=8"]])
def test_invalid_configs_rejected(bad):
    with pytest.raises(ConfigError):
        parse_config(None, bad)


def test_config_error_exit_code(tmp_path, capsys):
    rc = main(["train", "--out", str(tmp_path), "--set", "train.rho_min=0.9",
               "--set", "train.rho_max=0.2"])
    assert rc == 2
    assert main(["train", "--out", str(tmp_path), "--config", str(tmp_path / "missing.cfg")]) == 2


def test_bench_records_manifest_and_determinism(tmp_path):
    args = ["bench", "--seed", "1", "--set", "bench.methods=vanilla,famo,famo_uam", *FAST]
    a, b = tmp_path / "a", tmp_path / "b"
    assert main([*args, "--out", str(a)]) == 0
    assert main([*args, "--out", str(b), "--set", "bench.workers=3"]) == 0
    sa = read_json(a / "summary.json")
    assert len(sa["runs"]) == 3
    assert (a / "summary.json").read_text() == (b / "summary.json").read_text()
    man = read_json(a / "manifest.json")
    emitted = {str(p.relative_to(a)) for p in a.rglob("*") if p.is_file()} - {"manifest.json"}
    assert set(man["files"]) == emitted
    assert man["runs"] == 3 and man["failures"] == 0 and man["seed"] == 1
    assert main(["bench", "--out", str(a), "--check"]) == 0
    (a / "summary.json").write_text("{}")
    assert main(["bench", "--out", str(a), "--check"]) == 1


def test_train_outputs(tmp_path):
    assert main(["train", "--out", str(tmp_path), "--set", "method=famo_cam", *FAST]) == 0
    for name in ("train_log.csv", "result.json", "checkpoint.bin", "manifest.json"):
        assert (tmp_path / name).exists()
    assert len((tmp_path / "train_log.csv").read_text().splitlines()) == 41


def test_select_prints_decision(tmp_path, capsys):
    rc = main(["select", "--out", str(tmp_path), "--set", "problem.name=opposing_pair",
               "--set", "profile.steps=60", *FAST])
    assert rc == 0
    d = json.loads(capsys.readouterr().out)
    assert d["reason"] == "persistent" and d["table_row"]
    assert len((tmp_path / "profile.csv").read_text().splitlines()) == 61


def test_select_inverse_bypasses_profile(tmp_path, capsys):
    assert main(["select", "--out", str(tmp_path), "--set", "problem.name=inverse_poisson"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["reason"] == "inverse_k3"
    assert not (tmp_path / "profile.csv").exists()


def test_theory_csv(tmp_path):
    rc = main(["theory", "--out", str(tmp_path), "--set", "theory.K=2,4",
               "--set", "theory.trials=2000"])
    assert rc == 0
    lines = (tmp_path / "theory.csv").read_text().splitlines()
    assert lines[0].startswith("K,d,tail,E_UK,SE") and len(lines) == 3


def test_default_out_env(tmp_path, monkeypatch):
    monkeypatch.setenv("CONFLICTLAB_OUT", str(tmp_path))
    assert main(["theory", "--set", "theory.K=2", "--set", "theory.trials=1000"]) == 0
    assert (tmp_path / "theory" / "theory.csv").exists()
