import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from latknock.cli import main
from latknock.data import save_item_bank, save_predictors, save_responses
from latknock.simstudy import desk_preset, generate_study


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_data")
    cfg = desk_preset(n=300, seed=17)
    ds, resp, truth = generate_study(cfg, 0)
    save_predictors(ds, out / "pred.csv", out / "meta.json")
    save_item_bank(truth.bank, out / "items.json")
    save_responses(resp, truth.bank, out / "resp.csv")
    return out


def run_cli(args):
    return CliRunner().invoke(main, args, catch_exceptions=False)


def read_bytes(path):
    return Path(path).read_bytes()


def test_fit_copula_smoke_and_determinism(data_dir, tmp_path):
    out1 = tmp_path / "r1"
    args = [
        "fit-copula", "--predictors", str(data_dir / "pred.csv"),
        "--meta", str(data_dir / "meta.json"), "--seed", "7",
        "--burn-in", "8", "--iters", "12",
    ]
    res = run_cli(args + ["--out", str(out1)])
    assert res.exit_code == 0
    assert (out1 / "copula.json").exists()
    assert (out1 / "fit_log.csv").exists()
    assert (out1 / "fit_log.png").exists()
    out2 = tmp_path / "r2"
    run_cli(args + ["--out", str(out2)])
    assert read_bytes(out1 / "copula.json") == read_bytes(out2 / "copula.json")
    assert read_bytes(out1 / "fit_log.csv") == read_bytes(out2 / "fit_log.csv")


def test_fit_copula_missing_meta_exit_2(data_dir, tmp_path):
    res = CliRunner().invoke(main, [
        "fit-copula", "--predictors", str(data_dir / "pred.csv"),
        "--meta", str(data_dir / "nope.json"), "--out", str(tmp_path),
    ])
    assert res.exit_code == 2
    payload = json.loads(res.stderr.strip().splitlines()[-1])
    assert "nope.json" in payload["message"]


SELECT_ARGS = [
    "--seed", "11", "--nu", "1,2", "--runs", "3", "--gibbs-sweeps", "6",
    "--em-burn-in", "2", "--em-iters", "4",
]


def _select(data_dir, out, extra=()):
    return run_cli([
        "select",
        "--predictors", str(data_dir / "pred.csv"),
        "--meta", str(data_dir / "meta.json"),
        "--responses", str(data_dir / "resp.csv"),
        "--items", str(data_dir / "items.json"),
        "--out", str(out), "--fit-copula",
        "--config", str(_cfg_file(out)),
        *SELECT_ARGS, *extra,
    ])


def _cfg_file(out):
    out.mkdir(parents=True, exist_ok=True)
    cfg = out / "cfg.toml"
    cfg.write_text("[select]\ncopula_burn_in = 6\ncopula_iters = 10\n")
    return cfg


def test_select_smoke_outputs(data_dir, tmp_path):
    out = tmp_path / "sel"
    res = _select(data_dir, out)
    assert res.exit_code == 0, res.output
    assert (out / "selection.csv").exists()
    assert (out / "selection.png").exists()
    payload = json.loads((out / "selection.json").read_text())
    # Pi denominators: multiples of 1/M with M = 3
    for nu in ("1", "2"):
        pi = np.array(payload["by_nu"][nu]["pi"])
        assert np.allclose(pi * 3, np.round(pi * 3))
    # nested selections with shared seeds
    s1 = set(payload["by_nu"]["1"]["selected_indices"])
    s2 = set(payload["by_nu"]["2"]["selected_indices"])
    assert s1 <= s2
    # csv ranked by pi at the smallest nu
    lines = (out / "selection.csv").read_text().strip().splitlines()
    header = lines[0].split(",")
    pi_col = header.index("pi_nu1")
    pis = [float(row.split(",")[pi_col]) for row in lines[1:]]
    assert pis == sorted(pis, reverse=True)


def test_select_reproducible_bytes(data_dir, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        res = _select(data_dir, out)
        assert res.exit_code == 0
        outs.append(out)
    for fname in ("selection.json", "selection.csv", "copula.json"):
        assert read_bytes(outs[0] / fname) == read_bytes(outs[1] / fname)


def test_select_bootstrap_populates_se(data_dir, tmp_path):
    out = tmp_path / "boot"
    res = _select(data_dir, out, extra=["--bootstrap", "4", "--runs", "2"])
    assert res.exit_code == 0
    lines = (out / "selection.csv").read_text().strip().splitlines()
    header = lines[0].split(",")
    se_col = header.index("se")
    for row in lines[1:]:
        val = row.split(",")[se_col]
        assert val != ""
        assert float(val) >= 0.0


def test_select_requires_copula(data_dir, tmp_path):
    out = tmp_path / "nocop"
    res = CliRunner().invoke(main, [
        "select",
        "--predictors", str(data_dir / "pred.csv"),
        "--meta", str(data_dir / "meta.json"),
        "--responses", str(data_dir / "resp.csv"),
        "--items", str(data_dir / "items.json"),
        "--out", str(out),
    ])
    assert res.exit_code == 2
    payload = json.loads(res.stderr.strip().splitlines()[-1])
    assert "copula" in payload["message"]


SIM_ARGS = [
    "--replications", "2", "--n", "150", "--runs", "2", "--nu", "1",
    "--gibbs-sweeps", "4", "--seed", "3",
]


def test_simulate_smoke_and_outputs(tmp_path):
    out = tmp_path / "sim"
    cfg = tmp_path / "sim.toml"
    cfg.write_text("[simulate]\npreset = \"desk\"\n")
    res = run_cli(["simulate", "--config", str(cfg), "--out", str(out), *SIM_ARGS])
    assert res.exit_code == 0, res.output
    table = (out / "table1.csv").read_text().strip().splitlines()
    assert table[0] == "N,nu,method,pfer,tpr,se_pfer,se_tpr"
    assert len(table) == 3  # baseline + drm
    assert (out / "report.json").exists()
    assert (out / "table1.png").exists()
    assert (out / "timings.json").exists()


def test_simulate_reproducible_bytes(tmp_path):
    outs = []
    for name in ("s1", "s2"):
        out = tmp_path / name
        res = run_cli(["simulate", "--preset", "desk", "--out", str(out),
                       "--threads", "2" if name == "s2" else "1", *SIM_ARGS])
        assert res.exit_code == 0
        outs.append(out)
    assert read_bytes(outs[0] / "table1.csv") == read_bytes(outs[1] / "table1.csv")
    assert read_bytes(outs[0] / "report.json") == read_bytes(outs[1] / "report.json")


def test_simulate_dry_run_paper(tmp_path):
    res = run_cli(["simulate", "--preset", "paper", "--dry-run", "--out", str(tmp_path)])
    assert res.exit_code == 0
    resolved = json.loads(res.output)
    assert resolved[0]["p"] == 100
    assert resolved[0]["J"] == 60
    assert not (tmp_path / "table1.csv").exists()


def test_simulate_unknown_preset(tmp_path):
    res = CliRunner().invoke(main, [
        "simulate", "--preset", "galaxy", "--out", str(tmp_path)])
    assert res.exit_code == 2


def test_unknown_config_key_rejected(data_dir, tmp_path):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[fit_copula]\nbogus = 1\n")
    res = CliRunner().invoke(main, [
        "fit-copula", "--predictors", str(data_dir / "pred.csv"),
        "--meta", str(data_dir / "meta.json"),
        "--config", str(cfg), "--out", str(tmp_path / "o"),
    ])
    assert res.exit_code == 2
    payload = json.loads(res.stderr.strip().splitlines()[-1])
    assert "bogus" in payload["message"]


def test_select_numerical_failure_exit_3(tmp_path):
    # duplicated predictor column: the augmented design stays rank deficient
    import csv as _csv

    n = 120
    rng = np.random.default_rng(0)
    x = rng.standard_normal(n)
    with open(tmp_path / "pred.csv", "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["a", "b"])
        for v in x:
            w.writerow([f"{v:.12g}", f"{v:.12g}"])
    (tmp_path / "meta.json").write_text(json.dumps([
        {"name": "a", "kind": "continuous"}, {"name": "b", "kind": "continuous"},
    ]))
    (tmp_path / "items.json").write_text(json.dumps([
        {"id": "i1", "model": "2PL", "a": 1.0, "b": [0.0]},
    ]))
    with open(tmp_path / "resp.csv", "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["i1"])
        for _ in range(n):
            w.writerow([str(int(rng.uniform() < 0.5))])
    res = CliRunner().invoke(main, [
        "select", "--predictors", str(tmp_path / "pred.csv"),
        "--meta", str(tmp_path / "meta.json"),
        "--responses", str(tmp_path / "resp.csv"),
        "--items", str(tmp_path / "items.json"),
        "--out", str(tmp_path / "out"), "--fit-copula",
        "--runs", "1", "--gibbs-sweeps", "2", "--em-burn-in", "3", "--em-iters", "4",
    ])
    assert res.exit_code == 3
    payload = json.loads(res.stderr.strip().splitlines()[-1])
    assert payload["exit_code"] == 3
