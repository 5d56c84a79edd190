import json
import math
import subprocess
import sys

import numpy as np
import pytest

from hawkes_mca.cli import main
from hawkes_mca.config import ConfigError, load_config, parse_config
from hawkes_mca.presets import OUCyberParams


def write(tmp_path, text, name="run.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


# ---- config

def test_minimal_preset(tmp_path):
    cfg = load_config(write(tmp_path, 'preset = "ou-cyber-sec5"\n'))
    p = cfg.params
    assert (p.alpha, p.delta, p.vol, p.eta, p.q, p.a, p.d, p.r, p.T) == (0.5, 1, 0.1, 0.1, 1, 1, 1, 0, 1)
    assert p.insured_floor == 0.5 and p.x_max == 1.0 and p.x_min == -1.0
    model, cost = cfg.model_cost()
    assert cost.stop_payoff(0.0) == 0.5 and cost.terminal_payoff(1.0) == pytest.approx(10)
    assert float(model.jump(0.3, 1.0, 0.0)) == -1.0


def test_h_not_dividing_names_both(tmp_path):
    with pytest.raises(ConfigError) as e:
        load_config(write(tmp_path, "[lattice]\nh = 0.3\n"))
    assert e.value.key == "lattice.h" and "0.3" in str(e.value) and "1.0" in str(e.value)


def test_phi_override(tmp_path):
    cfg = load_config(write(tmp_path, 'preset = "ou-cyber-sec5"\n[cost]\nphi = 0.01\n'))
    assert cfg.params.phi == 0.01 and cfg.params.alpha == 0.5
    assert cfg.model_cost()[1].phi(0.0) == 0.01


def test_phi_inf_disables_injection():
    cfg = parse_config({"cost": {"phi": "inf"}})
    assert not cfg.model_cost()[1].injection_enabled


@pytest.mark.parametrize("raw, key", [
    ({"cost": {"phy": 1.0}}, "cost.phy"),
    ({"bogus": 1}, "bogus"),
    ({"preset": "nope"}, "preset"),
    ({"cost": {"eta": 1.5}}, "cost.eta"),
    ({"cost": {"r": -1}}, "cost.r"),
    ({"lattice": {"M": 1}}, "lattice.M"),
    ({"solver": {"h_list": [0.01, 0.02]}}, "solver.h_list"),
    ({"solver": {"lambda0_grid": [20.0]}}, "lambda0"),
    ({"seed": -1}, "seed"),
])
def test_config_errors_name_key(raw, key):
    with pytest.raises(ConfigError) as e:
        parse_config(raw)
    assert e.value.key == key


def test_config_hash_changes():
    a = parse_config({}).config_hash
    b = parse_config({"cost": {"phi": 3.0}}).config_hash
    assert a != b and a == parse_config({}).config_hash and len(a) == 16


def test_tables_override_drift():
    cfg = parse_config({"model": {"drift_table": [[-1, 1], [2.0, 0.0]]}})
    model, _ = cfg.model_cost()
    assert float(np.asarray(model.drift(0.0))) == pytest.approx(1.0)


# ---- CLI

def _csv_meta(path):
    first = path.read_text().splitlines()[0]
    assert first.startswith("# ")
    return dict(kv.split("=", 1) for kv in first[2:].split())


def test_solve_outputs(tmp_path, capsys):
    code, out, _ = run(["solve", "--h", "0.1", "--out", str(tmp_path)], capsys)
    assert code == 0
    rec = json.loads(out)
    assert rec["status"] == "ok"
    names = sorted(p.name for p in tmp_path.iterdir())
    assert "value_slice_t0.csv" in names and "probes.csv" in names and "value_path.csv" in names
    assert any(n.startswith("solution_") and n.endswith(".npz") for n in names)
    meta = _csv_meta(tmp_path / "probes.csv")
    assert {"config_hash", "seed", "version", "insured_floor"} <= meta.keys()
    assert meta["insured_floor"] == "0.5"


def test_seed_required(tmp_path, capsys):
    code, _, err = run(["simulate", "--out", str(tmp_path)], capsys)
    rec = json.loads(err)
    assert code == 2 and rec["kind"] == "config" and rec["key"] == "seed"


def test_bad_h_exit_code(tmp_path, capsys):
    code, _, err = run(["solve", "--h", "0.3", "--out", str(tmp_path)], capsys)
    assert code == 2 and "0.3" in json.loads(err)["message"]


def test_unknown_key_exit_code(tmp_path, capsys):
    cfg = write(tmp_path, "[cost]\nphy = 1\n")
    code, _, err = run(["solve", "--config", str(cfg), "--out", str(tmp_path)], capsys)
    assert code == 2 and json.loads(err)["key"] == "cost.phy"


def test_simulate_no_jumps_deterministic(tmp_path, capsys):
    cfg = write(tmp_path, "[hawkes]\nd = 0\n[simulate]\ninject_amount = 0\npaths = 1\n")
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["simulate", "--config", str(cfg), "--seed", "4", "--out", str(a)], capsys)[0] == 0
    assert run(["simulate", "--config", str(cfg), "--seed", "4", "--out", str(b)], capsys)[0] == 0
    assert (a / "simulate_paths.csv").read_bytes() == (b / "simulate_paths.csv").read_bytes()
    assert "jump_mark" in (a / "simulate_paths.csv").read_text().splitlines()[1]


def test_simulate_chain_overlay(tmp_path, capsys):
    cfg = write(tmp_path, "[simulate]\nchain_h = [0.1, 0.05]\n")
    assert run(["simulate", "--config", str(cfg), "--seed", "1", "--out", str(tmp_path / "o")], capsys)[0] == 0
    lines = (tmp_path / "o" / "simulate_chain.csv").read_text().splitlines()
    assert lines[1] == "h,t,X,lambda"


def test_sweep_csv_nonincreasing(tmp_path, capsys):
    code, _, _ = run(["sweep", "--axis", "h", "--h-list", "0.1", "0.05", "0.025", "--out", str(tmp_path)], capsys)
    assert code == 0
    rows = [r.split(",") for r in (tmp_path / "sweep_h.csv").read_text().splitlines()[2:]]
    by_probe = {}
    for h, x0, l0, v, d in rows:
        if d:
            by_probe.setdefault((x0, l0), []).append(float(d))
    for diffs in by_probe.values():
        assert all(b <= a for a, b in zip(diffs, diffs[1:]))


def test_rollout_and_stopping_and_check(tmp_path, capsys):
    cfg = write(tmp_path, "seed = 3\n[lattice]\nh = 0.1\n[solver]\npaths = 300\n")
    for verb, name in (("rollout", "rollout.csv"), ("stopping-study", "stopping_study.csv"),
                       ("check", "check.csv")):
        code, out, err = run([verb, "--config", str(cfg), "--out", str(tmp_path / verb)], capsys)
        assert code == 0, err
        assert (tmp_path / verb / name).exists()
    check = (tmp_path / "check" / "check.csv").read_text()
    assert ",fail" not in check


def test_out_dir_env(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("HAWKES_MCA_OUT", str(tmp_path / "envdir"))
    assert run(["solve", "--h", "0.25"], capsys)[0] == 0
    assert (tmp_path / "envdir" / "probes.csv").exists()


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "hawkes_mca", "rollout", "--h", "0.25", "--out", str(tmp_path)],
                       capture_output=True, text=True)
    assert r.returncode == 2 and json.loads(r.stderr)["key"] == "seed"
