import json
import os

import pytest

from mfrisk.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_USAGE, atomic_write, run


def call(capsys, *argv):
    code = run(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_rate_h0_shortcut(capsys):
    code, out, _ = call(capsys, "rate", "--method", "h0", "--xi0", "0.5", "--sigma", "1", "--T", "10")
    assert code == 0
    rec = json.loads(out)
    assert rec["rate"] == pytest.approx(0.05, abs=1e-15)
    assert set(rec) == {"rate", "method", "N", "log_p", "p"}


def test_xi0_implies_h0_method(capsys):
    code, out, _ = call(capsys, "rate", "--xi0", "0.5", "--sigma", "1", "--T", "10")
    assert code == 0
    assert json.loads(out)["method"] == "h0"


def test_global_flags_after_subcommand(capsys, tmp_path):
    before = call(capsys, "--seed", "4", "--out-dir", str(tmp_path / "a"), "simulate",
                  "--theta", "10", "--sigma", "1", "--h", "0.1", "--N", "5", "--T", "1", "--out", "t.csv")
    after = call(capsys, "simulate", "--theta", "10", "--sigma", "1", "--h", "0.1", "--N", "5",
                 "--T", "1", "--out", "t.csv", "--seed", "4", "--out-dir", str(tmp_path / "b"))
    assert before[0] == after[0] == 0
    assert (tmp_path / "a" / "t.csv").read_bytes() == (tmp_path / "b" / "t.csv").read_bytes()


def test_equilibrium_bistable(capsys):
    code, out, _ = call(capsys, "equilibrium", "--theta", "10", "--sigma", "1", "--h", "0.1")
    assert code == 0
    rec = json.loads(out)
    assert rec["bistable"] is True
    assert set(rec) == {"xi_b", "xi0", "xi1", "sigma_c", "bistable", "method", "residual"}


def test_missing_config_is_io_error(capsys, tmp_path):
    code, out, err = call(
        capsys, "--out-dir", str(tmp_path / "o"), "equilibrium",
        "--config", str(tmp_path / "nope.json"), "--out", "e.json",
    )
    assert code == EXIT_IO
    assert json.loads(err)["error"] == "io"
    assert not (tmp_path / "o").exists()


def test_invalid_config_exit_code(capsys):
    code, _, err = call(capsys, "equilibrium", "--theta", "10", "--sigma", "0", "--h", "0.1")
    assert code == EXIT_CONFIG
    assert "sigma must be positive" in json.loads(err)["errors"][0]


def test_usage_error(capsys):
    code, _, err = call(capsys, "equilibrium", "--nope")
    assert code == EXIT_USAGE
    assert json.loads(err)["error"] == "usage"
    assert call(capsys, "frobnicate")[0] == EXIT_USAGE


def test_numerical_error(capsys):
    code, _, err = call(capsys, "rate", "--method", "minimize", "--theta", "1", "--sigma", "1", "--h", "0.1")
    assert code == EXIT_NUMERIC
    assert json.loads(err)["error"] == "numerical"


def test_simulate_is_byte_reproducible(capsys, tmp_path):
    args = ["--seed", "5", "--out-dir", str(tmp_path), "simulate",
            "--h", "0.1", "--theta", "10", "--sigma", "1", "--N", "20", "--T", "2"]
    assert call(capsys, *args, "--out", "a.csv")[0] == 0
    assert call(capsys, *args, "--out", "b.csv")[0] == 0
    a, b = (tmp_path / "a.csv").read_bytes(), (tmp_path / "b.csv").read_bytes()
    assert a == b
    assert a.startswith(b"t,xbar\n") and b"\r" not in a
    meta = json.loads((tmp_path / "a.csv.meta.json").read_text())
    assert meta["seed"] == 5 and "Philox" in meta["rng"]["algorithm"]


def test_ensemble_json_and_threads_env(capsys, tmp_path, monkeypatch):
    args = ["--seed", "1", "--out-dir", str(tmp_path), "simulate", "--h", "0.1", "--theta", "10",
            "--sigma", "1", "--N", "10", "--T", "20", "--replicas", "300", "--initial", "minus-xib"]
    call(capsys, *args, "--out", "one.json")
    monkeypatch.setenv("MFRISK_THREADS", "4")
    call(capsys, *args, "--out", "four.json")
    one = json.loads((tmp_path / "one.json").read_text())
    four = json.loads((tmp_path / "four.json").read_text())
    assert one == four
    assert {"replicas", "transitions", "p_hat", "ci_low", "ci_high", "seed", "params"} <= set(one)


def test_config_file_roundtrip(capsys, tmp_path):
    cfg = {"h": 0.1, "theta": 10.0, "sigma": 1.0, "n_agents": 20, "horizon": 1.0, "dt": 0.02}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    code, out, _ = call(capsys, "--out-dir", str(tmp_path), "simulate", "--config", str(tmp_path / "c.json"))
    assert code == 0
    assert json.loads(out)["params"] == cfg


def test_het_and_reduced(capsys, tmp_path):
    groups = json.dumps([{"theta": 5, "fraction": 0.5}, {"theta": 15, "fraction": 0.5}])
    code, _, _ = call(capsys, "--out-dir", str(tmp_path), "simulate-het", "--h", "0.1", "--sigma", "1",
                      "--N", "20", "--T", "1", "--dt", "0.01", "--groups", groups, "--out", "h.csv")
    assert code == 0
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "t,xbar,xbar_g1,xbar_g2"
    code, _, _ = call(capsys, "--out-dir", str(tmp_path), "simulate-reduced", "--h", "0.1", "--theta", "10",
                      "--sigma", "1", "--N", "20", "--T", "1", "--out", "r.csv")
    assert code == 0


def test_diversity_scan_csv(capsys, tmp_path):
    groups = json.dumps([{"theta": 1, "fraction": 0.5}, {"theta": 3, "fraction": 0.5}])
    code, out, _ = call(capsys, "--out-dir", str(tmp_path), "diversity", "--groups", groups,
                        "--sigma", "0.5", "--N", "100", "--T", "5", "--delta-scan", "0,0.5,1")
    assert code == 0
    lines = (tmp_path / "diversity_scan.csv").read_text().splitlines()
    assert lines[0] == "delta,xi_b2_exact,xi_b2_exp,sigmaT2_exact,sigmaT2_exp,log_pT_exp"
    assert len(lines) == 4
    rec = json.loads(out)
    # delta = 1 reproduces the given groups
    assert rec["scan"][-1]["log_pT_exact"] == pytest.approx(rec["exact"]["log_p"], rel=1e-12)


def test_fluctuation_csv(capsys, tmp_path):
    code, _, _ = call(capsys, "--out-dir", str(tmp_path), "fluctuation", "--h", "0.1", "--theta", "2",
                      "--sigma", "1", "--N", "100", "--T", "10", "--t-grid", "0:10:3")
    assert code == 0
    lines = (tmp_path / "fluctuation.csv").read_text().splitlines()
    assert lines[0] == "t,var_mean_cf,var_agent_cf"
    assert lines[1] == "0.0,0.0,0.0"


def test_fokker_planck_csv(capsys, tmp_path):
    code, out, _ = call(capsys, "--out-dir", str(tmp_path), "fokker-planck", "--h", "0.1", "--theta", "10",
                        "--sigma", "1", "--t-end", "0.1", "--times", "0.05,0.1", "--cells", "100")
    assert code == 0
    lines = (tmp_path / "fokker-planck.csv").read_text().splitlines()
    assert lines[0] == "time,y,u"
    assert len(lines) == 1 + 2 * 100


def test_rate_path_csv(capsys, tmp_path):
    code, _, _ = call(capsys, "--out-dir", str(tmp_path), "rate", "--h", "0.05", "--theta", "2",
                      "--sigma", "1", "--T", "10", "--method", "minimize", "--grid", "200",
                      "--path-out", "p.csv")
    assert code == 0
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "t,a"


def test_csv_summary_format(capsys):
    code, out, _ = call(capsys, "--format", "csv", "equilibrium", "--theta", "10", "--sigma", "1", "--h", "0.1")
    assert code == 0
    assert out.splitlines()[0] == "xi_b,xi0,xi1,sigma_c,bistable,method,residual"


def test_atomic_write_leaves_no_temp(tmp_path):
    target = tmp_path / "x.txt"
    atomic_write(target, "hello\n")
    atomic_write(target, "again\n")
    assert target.read_text() == "again\n"
    assert os.listdir(tmp_path) == ["x.txt"]
