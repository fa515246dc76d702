import json
import math
import subprocess
import sys

import pytest

from cookiewalk.cli import SWEEP_COLUMNS, main


def run(*argv):
    return main([str(a) for a in argv])


def read(path):
    with open(path, encoding="utf-8") as fh:
        return fh.read()


# simulate


def test_simulate_header(tmp_cwd):
    assert run("simulate", "--env", "homogeneous:3,0.7", "--steps", 100000, "--seed", 1,
               "--out", "t.json") == 0
    out = json.loads(read("t.json"))
    h = out["header"]
    assert (h["M"], h["p"], h["seed"]) == (3, 0.7, 1)
    assert out["final"]["n"] == 100000 and out["reason"] == "time_horizon"
    assert out["config"]["seed"] == 1 and out["config"]["command"] == "simulate"


def test_simulate_symmetric_env(tmp_cwd):
    assert run("simulate", "--env", "homogeneous:0,0.5", "--steps", 1000, "--out", "s.json") == 0
    out = json.loads(read("s.json"))
    assert out["final"]["eaten"] == 0 and out["final"]["drift"] == 0


def test_simulate_byte_identical(tmp_cwd):
    flags = ["simulate", "--env", "homogeneous:2,0.8", "--steps", 5000, "--seed", 3,
             "--stop", "level:40", "--visits", "--leftover"]
    assert run(*flags, "--out", "a.json", "--csv", "a.csv") == 0
    assert run(*flags, "--out", "b.json", "--csv", "b.csv") == 0
    assert read("a.json") == read("b.json") and read("a.csv") == read("b.csv")
    assert read("a.csv").startswith("# config: ")


def test_simulate_roundtrip_through_config(tmp_cwd):
    assert run("simulate", "--env", '{"variant": "onesided", "M": 2, "p": 0.9}', "--steps", 3000,
               "--seed", 5, "--stop", "passage:10,0", "--out", "a.json") == 0
    assert run("simulate", "--config", "a.json", "--out", "b.json") == 0
    assert read("a.json") == read("b.json")


def test_flags_override_config(tmp_cwd):
    with open("c.json", "w") as fh:
        json.dump({"env": "homogeneous:1,0.6", "steps": 200, "seed": 4}, fh)
    assert run("simulate", "--config", "c.json", "--seed", 9, "--out", "o.json") == 0
    out = json.loads(read("o.json"))
    assert out["header"]["seed"] == 9 and out["final"]["n"] == 200 and out["header"]["M"] == 1


@pytest.mark.parametrize("env, field", [('{"variant": "homogeneous", "M": 3, "p": 1.7}', "p"),
                                        ('{"variant": "homogeneous", "M": -1, "p": 0.7}', "M"),
                                        ('{"variant": "homogeneous", "p": 0.7}', "M"),
                                        ('{"variant": "homogeneous", "M": 3, "p": 0.7', "env")])
def test_malformed_env_exit_2(tmp_cwd, capsys, env, field):
    assert run("simulate", "--env", env, "--steps", 10) == 2
    assert field in capsys.readouterr().err


def test_bad_stop_exit_2(tmp_cwd):
    assert run("simulate", "--env", "homogeneous:1,0.6", "--stop", "sideways:3") == 2


# sweep


def test_sweep_csv(tmp_cwd):
    assert run("sweep", "--points", "2,0.9;10,0.9", "--replicas", 20, "--horizons", "1000,2000",
               "--escape-budget", 10000, "--out", "s.csv") == 0
    lines = read("s.csv").splitlines()
    assert lines[0].startswith("# config: ")
    assert lines[1].split(",") == SWEEP_COLUMNS
    rows = [dict(zip(SWEEP_COLUMNS, l.split(","))) for l in lines[2:]]
    assert len(rows) == 4
    assert {(r["M"], r["delta"], r["horizon"]) for r in rows} >= {("10", "8.0", "2000"),
                                                                 ("2", "1.6", "1000")}
    fast = [r for r in rows if r["M"] == "10"][0]
    assert float(fast["speed"]) - 3 * float(fast["speed_se"]) > 0
    assert run("sweep", "--config", "s.csv", "--out", "t.csv") == 2  # a CSV is not a config file


def test_sweep_grid_delta_coverage(tmp_cwd):
    assert run("sweep", "--grid", "M=2..3", "p=0.7,0.9", "--replicas", 4, "--horizons", 200,
               "--escape-budget", 1000, "--out", "g.csv") == 0
    rows = read("g.csv").splitlines()[2:]
    deltas = sorted({float(r.split(",")[2]) for r in rows})
    assert deltas == pytest.approx([0.8, 1.2, 1.6, 2.4])


def test_sweep_roundtrip(tmp_cwd):
    assert run("sweep", "--points", "2,0.9", "--replicas", 5, "--horizons", 500,
               "--escape-budget", 1000, "--out", "a.csv") == 0
    cfg = json.loads(read("a.csv").splitlines()[0][len("# config: "):])
    with open("cfg.json", "w") as fh:
        json.dump(cfg, fh)
    assert run("sweep", "--config", "cfg.json", "--out", "b.csv") == 0
    assert read("a.csv") == read("b.csv")


def test_sweep_empty_grid_exit_2(tmp_cwd):
    assert run("sweep", "--replicas", 5) == 2
    assert run("sweep", "--grid", "M=3..2", "p=0.7") == 2


# verify


def test_verify_lemma3_zero_cookies(tmp_cwd):
    assert run("verify", "--lemma", 3, "--N", 50, "--c", 1, "--gamma", 0, "--p", 0.7,
               "--replicas", 2000, "--out", "v.json") == 0
    rep = json.loads(read("v.json"))
    assert rep["pass"] and rep["method"] == "exact" and rep["cookies"] == 0
    assert rep["empirical"] == pytest.approx(0.5, abs=1e-12) and rep["bound"] < 0.5


def test_verify_comp0(tmp_cwd):
    assert run("verify", "--lemma", "comp0", "--L", 4, "--kappa", 0.2, "--eps", 0.05,
               "--out", "c.json") == 0
    rep = json.loads(read("c.json"))
    assert rep["P_A1_min"] == pytest.approx(0.8113530290067268, abs=1e-12)
    assert len(rep["P_A1"]) == 9 and rep["pass"]


def test_verify_comp2_fail_exit_1(tmp_cwd):
    assert run("verify", "--lemma", "comp2", "--L", 2, "--kappa", 0.2, "--eps", 0.05,
               "--v", 2, "--replicas", 500, "--out", "c.json") == 1
    rep = json.loads(read("c.json"))
    assert rep["upper"] >= math.exp(-5) and not rep["pass"]


def test_verify_unknown_lemma_exit_2(tmp_cwd):
    assert run("verify", "--lemma", 7) == 2


def test_verify_missing_param_exit_2(tmp_cwd):
    assert run("verify", "--lemma", "comp0", "--L", 4) == 2


# oracle


def test_oracle_hit_right(tmp_cwd):
    env = json.dumps({"variant": "explicit", "stacks": {"-1": [0.75], "0": [0.75], "1": [0.75]}})
    assert run("oracle", "--window", -2, 2, "--start", 0, "--env", env, "--query", "hit-right",
               "--out", "o.json") == 0
    out = json.loads(read("o.json"))
    assert out["value"] == pytest.approx(25 / 32, abs=1e-12)
    assert out["residual"] <= 1e-12 and out["states"] > 0
    assert run("oracle", "--config", "o.json", "--out", "p.json") == 0
    assert read("o.json") == read("p.json")


def test_oracle_other_queries(tmp_cwd):
    for q in ("time", "visits:0", "leftover"):
        assert run("oracle", "--window", -3, 3, "--start", 0, "--env", "homogeneous:0,0.5",
                   "--query", q, "--out", "o.json") == 0
    vals = json.loads(read("o.json"))["value"]
    assert set(vals) == {"-2", "-1", "0", "1", "2"} and not any(vals.values())
    assert run("oracle", "--window", -3, 3, "--start", 0, "--env", "homogeneous:0,0.5",
               "--query", "visits:0", "--out", "o.json") == 0
    assert json.loads(read("o.json"))["value"] == pytest.approx(3.0)  # 2 * 3 * 3 / 6


def test_oracle_errors(tmp_cwd):
    assert run("oracle", "--start", 0, "--env", "homogeneous:1,0.6") == 2
    assert run("oracle", "--window", -2, 2, "--start", 0, "--env", "homogeneous:1,0.6",
               "--query", "nonsense") == 2
    assert run("oracle", "--window", -30, 30, "--start", 0, "--env", "homogeneous:3,0.7",
               "--cap", 1000) == 2


# blocks


def test_blocks_calibrate_and_couple(tmp_cwd, capsys):
    search = json.dumps({"L": [2], "kappa": [0.2], "eps": [0.05], "v": [24]})
    assert run("blocks", "calibrate", "--search", search, "--out", "cal.json") == 0
    cal = json.loads(read("cal.json"))
    assert (cal["L"], cal["kappa"], cal["eps"], cal["v"]) == (2, 0.2, 0.05, 24)
    assert cal["M0"] >= 1 and cal["c1"] > 0.05
    capsys.readouterr()
    assert run("blocks", "couple", "--config", "cal.json", "--horizon", 20000, "--seed", 7,
               "--out", "trace.csv") == 0
    flag = json.loads(capsys.readouterr().out)
    assert flag["domination_ok"] is True
    lines = read("trace.csv").splitlines()
    assert lines[0].startswith("# config: ") and lines[1].startswith("# summary: ")
    assert lines[2] == "n,tau,Z,rule_fired,l_of_n"
    assert json.loads(lines[0][len("# config: "):])["seed"] == 7
    assert run("blocks", "calibrate", "--config", "cal.json", "--out", "cal2.json") == 0
    assert read("cal.json") == read("cal2.json")


def test_blocks_calibrate_nothing_selected(tmp_cwd):
    search = json.dumps({"L": [2], "kappa": [0.2], "eps": [0.05], "v": [1]})
    assert run("blocks", "calibrate", "--search", search, "--replicas", 200,
               "--out", "cal.json") == 1


def test_blocks_couple_missing_params(tmp_cwd):
    assert run("blocks", "couple", "--L", 2) == 2


def test_console_script_entry():
    res = subprocess.run([sys.executable, "-m", "cookiewalk.cli", "verify", "--lemma", "x"],
                         capture_output=True, text=True)
    assert res.returncode == 2 and "lemma" in res.stderr
