import json

import numpy as np
import pytest
import yaml

from varpolaron import cli
from varpolaron.cli import CSV_SCHEMAS, main, read_csv, write_csv
from varpolaron.config import (
    ConfigError,
    DynamicsConfig,
    OptimizerConfig,
    RatesConfig,
    build_problem,
    config_hash,
    emit_config,
    load_config,
    parse_config,
)

TRIMER = {
    "network": {
        "energies_cm": [0, 120, 260],
        "couplings_cm": [[0, 80, -30], [80, 0, 60], [-30, 60, 0]],
        "labels": ["a", "b", "c"],
    },
    "baths": {"super_ohmic": {"A_cm": 100, "wc_cm": 150}},
    "temperature_K": 300,
    "dynamics": {"t_max_ps": 0.2, "stride_ps": 0.01},
    "scan": {"A_cm": [50, 150, 300]},
    "convergence": {"p_min": 1, "p_max": 3},
    "rates": {"fit_terms": 6, "n_omega": 21},
}


def _write(tmp_path, cfg, name="run.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(cfg))
    return p


def _run(tmp_path, verb, cfg, out="out", extra=()):
    path = _write(tmp_path, cfg)
    d = tmp_path / out
    code = main([verb, str(path), "--out", str(d), *extra])
    return code, d


def _check_csvs(d):
    for f in d.glob("*.csv"):
        kind, header, rows = read_csv(f)
        if kind != "populations":
            assert header == CSV_SCHEMAS[kind]
        assert rows
        assert all(len(r) == len(header) for r in rows)


def _bodies(d):
    return {f.name: f.read_bytes() for f in sorted(d.iterdir()) if f.name != "manifest.json"}


# --------------------------------------------------------------------- config


def test_minimal_preset_defaults():
    cfg = parse_config({"network": {"preset": "fmo7"}, "temperature_K": 300})
    assert cfg.optimizer == OptimizerConfig()
    assert cfg.dynamics == DynamicsConfig()
    assert cfg.rates == RatesConfig()
    assert cfg.dynamics.rtol == 1e-8 and cfg.dynamics.atol == 1e-10
    pre = build_problem(cfg)
    assert pre.network.n_sites == 7 and len(pre.baths) == 7 and pre.temperature == 300


def test_asymmetric_couplings_name_pair():
    raw = json.loads(json.dumps(TRIMER))
    raw["network"]["couplings_cm"][0][1] = 80.001
    with pytest.raises(ConfigError) as ei:
        parse_config(raw)
    assert ei.value.key in ("network.couplings_cm[0][1]", "network.couplings_cm[1][0]")
    assert "80.001" in str(ei.value)


@pytest.mark.parametrize("raw, key", [
    ({"network": {"preset": "fmo7"}, "temprature_K": 300}, "temprature_K"),
    ({"network": {"preset": "fmo7"}, "optimizer": {"tol_": 1}}, "optimizer.tol_"),
    ({"network": {"preset": "fmo7"}, "baths": {"super_ohmic": {"A_cm": 1}}}, "baths.super_ohmic.wc_cm"),
    ({"network": {"preset": "fmo7"}, "baths": {"ohmic": {}}}, "baths.ohmic"),
    ({"network": {"preset": "fmo9"}}, "network.preset"),
    ({"network": {"preset": "fmo7"}, "temperature_K": -1}, "temperature_K"),
    ({"network": {"preset": "fmo7"}, "dynamics": {"t_max_ps": "long"}}, "dynamics.t_max_ps"),
    ({"network": {"preset": "fmo7", "energies_cm": [0]}}, "network"),
    ({"network": {"preset": "fmo7"}, "scan": {"A_cm": [3, 2]}}, "scan.A_cm"),
])
def test_strict_validation_names_key(raw, key):
    with pytest.raises(ConfigError) as ei:
        parse_config(raw)
    assert ei.value.key == key


def test_unit_named_in_error():
    with pytest.raises(ConfigError, match="cm\\^-1"):
        parse_config({"network": {"preset": "fmo7"}, "rates": {"alpha_cm": "x"}})


def test_missing_file_rejected(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        parse_config({"network": {"preset": "lh2", "mode_file": "nope.txt"}}, tmp_path)


@pytest.mark.parametrize("raw", [
    TRIMER,
    {"network": {"preset": "fmo7"}, "temperature_K": 77, "optimizer": {"p": 3, "tol": 1e-8}},
    {"network": {"preset": "lh2"}, "ablation": {"target": "B850"}, "dynamics": {"initial_site": "B800"},
     "baths": [{"sum": {"parts": [{"super_ohmic": {"A_cm": 30, "wc_cm": 100}},
                                  {"mode_comb": {"modes_cm": [[200, 0.01]], "gamma_cm": 5}}]}}] * 24},
])
def test_emit_parse_roundtrip(raw, tmp_path):
    cfg = parse_config(raw, tmp_path)
    text = emit_config(cfg)
    again = parse_config(yaml.safe_load(text), tmp_path)
    assert again == cfg
    assert config_hash(again) == config_hash(cfg)
    assert emit_config(again) == text


def test_load_config_reads_manifest(tmp_path):
    code, d = _run(tmp_path, "optimize", TRIMER)
    assert code == 0
    cfg = load_config(d / "manifest.json")
    assert cfg == load_config(tmp_path / "run.yaml")


# ---------------------------------------------------------------------- verbs


def test_optimize_outputs(tmp_path):
    code, d = _run(tmp_path, "optimize", TRIMER)
    assert code == 0
    m = json.loads((d / "manifest.json").read_text())
    assert m["status"] == "ok" and m["verb"] == "optimize"
    assert m["convergence"] == {"optimizer_converged": True}
    assert set(m["outputs"]) == {"solution.csv", "optimizer_history.csv"}
    for k in ("config_hash", "versions", "wall_time_s", "started", "csv_schemas"):
        assert k in m
    assert "numpy" in m["versions"]
    _, header, rows = read_csv(d / "solution.csv")
    assert [r[1] for r in rows] == ["a", "b", "c"]
    assert all(0 < float(r[3]) <= 1 for r in rows)
    _check_csvs(d)


@pytest.mark.parametrize("solver", ["variational", "polaron", "redfield"])
def test_propagate_outputs(tmp_path, solver):
    raw = json.loads(json.dumps(TRIMER))
    raw["dynamics"].update(solver=solver, dump_states=True)
    code, d = _run(tmp_path, "propagate", raw)
    assert code == 0
    kind, header, rows = read_csv(d / "populations.csv")
    assert header == ["t_ps", "P_a", "P_b", "P_c"]
    assert len(rows) == 21
    P = np.array(rows, dtype=float)[:, 1:]
    np.testing.assert_allclose(P.sum(axis=1), 1, atol=1e-8)
    m = json.loads((d / "manifest.json").read_text())
    states = np.frombuffer((d / "states.bin").read_bytes(), dtype="<c16").reshape(m["results"]["states_shape"])
    np.testing.assert_allclose(np.einsum("tii->ti", states).real, P, rtol=0, atol=1e-15)
    _check_csvs(d)


def test_propagate_initial_state_kinds(tmp_path):
    rho = np.eye(3, dtype=complex) / 3
    np.save(tmp_path / "rho.npy", rho)
    for initial, extra in (("eigenstate", {"initial_site": "b"}), ("eigenstate_index", {"eigenstate_index": 2}),
                           ("matrix", {"initial_file": "rho.npy"})):
        raw = json.loads(json.dumps(TRIMER))
        raw["dynamics"].update(initial=initial, solver="redfield", **extra)
        code, d = _run(tmp_path, "propagate", raw, out=f"o_{initial}")
        assert code == 0
        P0 = np.array(read_csv(d / "populations.csv")[2][0][1:], dtype=float)
        assert P0.sum() == pytest.approx(1)
        if initial == "matrix":
            np.testing.assert_allclose(P0, 1 / 3)


def test_scan_and_convergence(tmp_path):
    code, d = _run(tmp_path, "scan", TRIMER)
    assert code == 0
    kind, header, rows = read_csv(d / "scan.csv")
    assert [float(r[0]) for r in rows] == [50, 150, 300]
    code, d = _run(tmp_path, "convergence", TRIMER, out="conv")
    assert code == 0
    rows = read_csv(d / "convergence.csv")[2]
    assert [int(r[0]) for r in rows] == [2, 3]
    assert all(0 <= float(r[1]) < np.inf for r in rows)
    _check_csvs(d)


def test_rates_outputs(tmp_path):
    code, d = _run(tmp_path, "rates", TRIMER)
    assert code == 0
    m = json.loads((d / "manifest.json").read_text())
    assert m["results"]["correlation_rel_error"] < 1e-3
    e = json.loads((d / "exponentials.json").read_text())
    assert len(e["a"]) == 6
    assert len(read_csv(d / "rates.csv")[2]) == 21
    _check_csvs(d)


def test_ablate_skips_without_modes(tmp_path):
    raw = dict(TRIMER, ablation={"target": "c"})
    code, d = _run(tmp_path, "ablate", raw)
    assert code == 0
    m = json.loads((d / "manifest.json").read_text())
    assert m["status"] == "skipped" and "mode" in m["skipped"]
    assert m["outputs"] == {}


def test_ablate_with_mode_comb(tmp_path):
    raw = {
        "network": {"energies_cm": [100, 0], "couplings_cm": [[0, 60], [60, 0]]},
        "baths": {"sum": {"parts": [{"super_ohmic": {"A_cm": 30, "wc_cm": 100}},
                                    {"mode_comb": {"modes_cm": [[150, 0.02], [400, 0.02]], "gamma_cm": 20}}]}},
        "temperature_K": 300,
        "dynamics": {"t_max_ps": 1.0, "stride_ps": 0.01},
        "ablation": {"target": [1], "threshold": 0.3, "cluster_size": 1},
    }
    code, d = _run(tmp_path, "ablate", raw)
    assert code == 0
    rows = read_csv(d / "ablation.csv")[2]
    assert [int(r[0]) for r in rows] == [0, 1, 2]


# ---------------------------------------------------------------- determinism


def test_repeat_runs_byte_identical(tmp_path):
    _, a = _run(tmp_path, "propagate", TRIMER, out="a")
    _, b = _run(tmp_path, "propagate", TRIMER, out="b")
    assert _bodies(a) == _bodies(b)
    ma = json.loads((a / "manifest.json").read_text())
    mb = json.loads((b / "manifest.json").read_text())
    assert ma["outputs"] == mb["outputs"] and ma["config_hash"] == mb["config_hash"]


def test_rerun_from_manifest(tmp_path):
    _, a = _run(tmp_path, "propagate", TRIMER, out="a")
    c = tmp_path / "c"
    assert main(["propagate", str(a / "manifest.json"), "--out", str(c)]) == 0
    assert _bodies(a) == _bodies(c)


def test_write_csv_checks_columns(tmp_path):
    with pytest.raises(ValueError):
        write_csv(tmp_path / "x.csv", "ablation", ["k", "tau_ps"], [(1, 2.0, 3)])
    h = write_csv(tmp_path / "x.csv", "ablation", ["k", "tau_ps"], [(1, 0.1), (2, None)])
    assert len(h) == 64
    kind, header, rows = read_csv(tmp_path / "x.csv")
    assert kind == "ablation" and rows == [["1", "0.1"], ["2", ""]]
    assert (tmp_path / "x.csv").read_text().startswith("# varpolaron-csv v1 ablation\n")


# ---------------------------------------------------------- exit codes, env


def test_config_error_exit_and_json(tmp_path, capsys):
    raw = json.loads(json.dumps(TRIMER))
    raw["network"]["couplings_cm"][1][0] = 80.001
    code, d = _run(tmp_path, "optimize", raw)
    assert code == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["exit_code"] == 2 and err["key"].startswith("network.couplings_cm")
    code, _ = _run(tmp_path, "optimize", TRIMER, extra=("--jobs", "0"))
    assert code == 2


def test_non_convergence_exit(tmp_path):
    raw = dict(TRIMER, optimizer={"max_iter": 1, "tol": 1e-14})
    code, d = _run(tmp_path, "optimize", raw)
    assert code == 3
    m = json.loads((d / "manifest.json").read_text())
    assert m["status"] == "not_converged"
    assert m["convergence"]["optimizer_converged"] is False


def test_internal_error_exit(tmp_path, monkeypatch):
    def boom(*a):
        raise RuntimeError("kaput")

    monkeypatch.setitem(cli._VERBS, "optimize", boom)
    code, d = _run(tmp_path, "optimize", TRIMER)
    assert code == 4
    err = json.loads((d / "error.json").read_text())
    assert err["error"] == "RuntimeError" and "kaput" in err["message"]


def test_output_dir_from_environment(tmp_path, monkeypatch):
    path = _write(tmp_path, TRIMER)
    target = tmp_path / "env_out"
    monkeypatch.setenv(cli.OUTPUT_ENV, str(target))
    assert main(["optimize", str(path)]) == 0
    assert (target / "manifest.json").exists()


def test_show_config(tmp_path, capsys):
    path = _write(tmp_path, TRIMER)
    assert main(["show-config", str(path)]) == 0
    text = capsys.readouterr().out
    assert parse_config(yaml.safe_load(text), tmp_path) == load_config(path)
