import json
import os

import pytest
import yaml

from brwre.cli import main

HERE = os.path.dirname(__file__)
CONFIGS = os.path.join(HERE, "..", "configs")

BINARY = {"dim": 1, "states": [{"offspring": {"fixed": 2}, "steps": {"family": "enumerated", "vectors": [[1.0], [-1.0]]}}]}
GAUSS2 = {"dim": 1, "states": [
    {"offspring": {"fixed": 2}, "steps": {"family": "gaussian", "mean": [0.0], "var": 1.0}},
    {"offspring": {"fixed": 2}, "steps": {"family": "gaussian", "mean": [0.0], "var": 2.0}}]}
MARKOV = {"kind": "markov", "transition": [[0.8, 0.2], [0.2, 0.8]]}


def write(tmp_path, data, name="exp.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data))
    return str(p)


def run(kind, cfg, out, *extra):
    return main([kind, "--config", cfg, "--out", str(out), *extra])


def read_csv(path):
    lines = [l for l in open(path).read().splitlines() if not l.startswith("#")]
    header = lines[0].split(",")
    return header, [dict(zip(header, l.split(","))) for l in lines[1:]]


def test_rate_columns(tmp_path):
    out = tmp_path / "o"
    assert run("rate", os.path.join(CONFIGS, "rate_binary.yaml"), out) == 0
    header, rows = read_csv(out / "rate.csv")
    assert header[:3] == ["seed", "n", "replicate"]
    assert {"Lambda", "grad1", "conjugate"} <= set(header)
    assert len(rows) == 41
    mid = rows[20]
    assert float(mid["t1"]) == 0.0 and float(mid["Lambda"]) == pytest.approx(0.6931471805599453, rel=1e-15)
    assert float(rows[30]["grad1"]) == pytest.approx(0.7615941559557649, rel=1e-12)


def test_ldp_binary_summary(tmp_path):
    cfg = write(tmp_path, {"kind": "ldp", "model": BINARY, "environment": {"kind": "deterministic"},
                           "params": {"region": {"box": {"lower": [0.4], "upper": [0.6]}}, "ns": [1000]}})
    assert run("ldp", cfg, tmp_path / "o") == 0
    s = json.load(open(tmp_path / "o" / "summary.json"))
    assert abs(s["estimate"] - 0.6109) < 0.005
    assert s["target"] == pytest.approx(0.610864, abs=1e-6)


def test_invalid_kappa_exit_2(tmp_path, capsys):
    cfg = write(tmp_path, {"kind": "mdp", "model": BINARY, "environment": {"kind": "deterministic"},
                           "params": {"a_n": {"kappa": 0.4}, "region": {"box": {"lower": [0.5], "upper": [None]}},
                                      "n": 100}})
    assert run("mdp", cfg, tmp_path / "o") == 2
    err = capsys.readouterr().err
    assert "params.a_n.kappa" in err and "(1/2, 1)" in err
    assert not (tmp_path / "o").exists()


def test_unknown_key_exit_2(tmp_path, capsys):
    cfg = write(tmp_path, {"kind": "rate", "model": BINARY, "environment": {"kind": "deterministic"},
                           "params": {"t_grid": [[0.0]], "tgrid": 1}})
    assert run("rate", cfg, tmp_path / "o") == 2
    assert "tgrid" in capsys.readouterr().err


def test_cap_exhaustion_exit_3(tmp_path):
    cfg = write(tmp_path, {"kind": "simulate", "model": BINARY, "environment": {"kind": "deterministic"},
                           "params": {"n": 12}})
    out = tmp_path / "o"
    assert run("simulate", cfg, out, "--cap", "100") == 3
    _, rows = read_csv(out / "counts.csv")
    assert rows[-1]["cap_hit"] == "true"
    assert json.load(open(out / "manifest.json"))["cap_hits"] == 1


def test_validate_prints_checks(capsys):
    assert main(["validate", "--config", os.path.join(CONFIGS, "mdp_binary.yaml")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines and all(l.startswith("[pass]") for l in lines)


def test_manifest_and_atomic_outputs(tmp_path):
    out = tmp_path / "o"
    assert run("simulate", os.path.join(CONFIGS, "simulate_markov_gaussian.yaml"), out) == 0
    man = json.load(open(out / "manifest.json"))
    for key in ("config_hash", "seed", "version", "start", "end", "cap_hits", "outputs"):
        assert key in man
    assert set(man["outputs"]) == {"counts.csv", "environment.csv", "frames.csv", "summary.json"}
    assert not [f for f in os.listdir(out) if f.startswith(".tmp-")]
    for name in man["outputs"]:
        if name.endswith(".csv"):
            header, rows = read_csv(out / name)
            assert header[:3] == ["seed", "n", "replicate"] and rows


def test_full_precision_floats(tmp_path):
    out = tmp_path / "o"
    run("simulate", os.path.join(CONFIGS, "simulate_markov_gaussian.yaml"), out)
    _, rows = read_csv(out / "frames.csv")
    x = rows[-1]["S1"]
    assert float(x) == float(f"{float(x):.17g}") and len(x.replace("-", "").replace(".", "").lstrip("0")) >= 15


def test_seed_override_precedence(tmp_path, monkeypatch):
    cfg = os.path.join(CONFIGS, "spine_binary.yaml")
    monkeypatch.setenv("BRWRE_SEED", "77")
    run("spine", cfg, tmp_path / "a")
    assert json.load(open(tmp_path / "a" / "manifest.json"))["seed"] == 77
    run("spine", cfg, tmp_path / "b", "--seed", "5")
    assert json.load(open(tmp_path / "b" / "manifest.json"))["seed"] == 5
    monkeypatch.setenv("BRWRE_SEED", "x")
    assert run("spine", cfg, tmp_path / "c") == 2


@pytest.fixture
def martingale_run(tmp_path):
    cfg = write(tmp_path, {"kind": "martingale", "seed": 3, "model": GAUSS2, "environment": MARKOV,
                           "params": {"z_grid": [["0.5"], ["0.5+0.1j"]], "ns": [3, 5], "replicates": 6}})
    out = tmp_path / "orig"
    assert run("martingale", cfg, out, "--threads", "1") == 0
    return out


def test_replay_identical(martingale_run, capsys):
    man = str(martingale_run / "manifest.json")
    assert main(["replay", "--manifest", man]) == 0
    assert main(["replay", "--manifest", man, "--threads", "4"]) == 0
    assert "identical" in capsys.readouterr().out


def test_replay_altered_seed(martingale_run, capsys):
    code = main(["replay", "--manifest", str(martingale_run / "manifest.json"), "--seed", "4"])
    assert code == 4
    err = capsys.readouterr().err
    assert "first differing record" in err and "original:" in err and "replay:" in err


def test_replay_detects_tampering(martingale_run, capsys):
    p = martingale_run / "martingale.csv"
    lines = p.read_text().splitlines(True)
    lines[3] = lines[3].replace("3,", "9,", 1)
    p.write_text("".join(lines))
    assert main(["replay", "--manifest", str(martingale_run / "manifest.json")]) == 4
    assert "martingale.csv" in capsys.readouterr().err


def test_config_hash_stable_across_reordered_files(tmp_path):
    d = yaml.safe_load(open(os.path.join(CONFIGS, "rate_binary.yaml")))
    a = write(tmp_path, d, "a.yaml")
    b = tmp_path / "b.yaml"
    b.write_text(yaml.safe_dump({k: d[k] for k in reversed(list(d))}, sort_keys=False))
    run("rate", a, tmp_path / "oa")
    run("rate", str(b), tmp_path / "ob")
    ha = json.load(open(tmp_path / "oa" / "manifest.json"))["config_hash"]
    hb = json.load(open(tmp_path / "ob" / "manifest.json"))["config_hash"]
    assert ha == hb
