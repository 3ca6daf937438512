from __future__ import annotations

import json

import numpy as np
import pytest

from fedmerge import cli
from fedmerge.baselines import BaselineConfig, FedAvgTrainer
from fedmerge.config import ConfigError, ExperimentConfig, apply_overrides, load_config, parse_config
from fedmerge.data import ClusterTruthSpec, FederationSpec, export_federation, gen_cluster_noniid
from fedmerge.experiment import (
    block_score,
    export_weights,
    fixed_weights,
    read_metrics,
    run_ablation,
    run_experiment,
    summary_from_metrics,
)
from fedmerge.gradcheck import DEFAULT_FORMULAS, failures, run_gradcheck, softmax_logits, theta_update
from fedmerge.reports import ClientMetrics, RoundReport, best_round, run_rounds, weighted_average
from fedmerge.server import FedMergeTrainer, ServerConfig

SMALL = {
    "federation": {"m": 6, "K": 3, "sizes": 60, "seed": 1},
    "model": {"kind": "logistic"},
    "server": {"d": 3, "rounds": 6, "eta_w": 0.05, "normalize_w_grad": True, "batch_size": 16},
    "snapshot_every": 2,
}


def _cfg(tmp_path, **changes) -> ExperimentConfig:
    raw = json.loads(json.dumps(SMALL))
    raw["output_dir"] = str(tmp_path / "run")
    for key, value in changes.items():
        if isinstance(value, dict):
            raw.setdefault(key, {}).update(value)
        else:
            raw[key] = value
    return parse_config(raw)


def _write_config(tmp_path, raw) -> str:
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(raw))
    return str(path)


# -- reports ---------------------------------------------------------------


def test_weighted_average_and_best_round():
    rows = [ClientMetrics(1.0, 0.5, 10), ClientMetrics(3.0, 1.0, 30)]
    assert weighted_average(rows) == {"loss": 2.5, "acc": 0.875, "n": 40}
    assert weighted_average([])["n"] == 0

    def rep(r, val):
        return RoundReport(round=r, per_client={"val": [ClientMetrics(val, 0.0, 1)]}, weighted_avg={"val": {"loss": val}})

    assert best_round([rep(0, 2.0), rep(1, 1.0), rep(2, 1.0), rep(3, 1.5)]).round == 1
    assert best_round([rep(0, float("nan")), rep(1, 3.0)]).round == 1


def test_run_rounds_evaluation_schedule(cluster_clients, logistic_spec):
    trainer = FedMergeTrainer(cluster_clients, logistic_spec, ServerConfig(d=2, rounds=5))
    reports = run_rounds(trainer, cluster_clients, 5, eval_every=2)
    assert [r.round for r in reports if r.evaluated] == [0, 2, 4, 5]
    with pytest.raises(ValueError):
        run_rounds(trainer, cluster_clients, 1, eval_every=0)


# -- config ----------------------------------------------------------------


def test_defaults_parse():
    cfg = parse_config({})
    assert cfg.method == "fedmerge" and cfg.seeds == [0] and cfg.server.eta_w == 0.01


@pytest.mark.parametrize(
    "raw, field",
    [
        ({"server": {"d": 0}}, "server"),
        ({"server": {"bogus": 1}}, "server.bogus"),
        ({"federation": {"partition": "dirichlet", "alpha": 0}}, "federation"),
        ({"model": {"kind": "cnn"}}, "model"),
        ({"seeds": []}, "seeds"),
        ({"method": "ifca"}, "baseline"),
        ({"method": "magic"}, "method"),
        ({"eval_every": 0}, "eval_every"),
        ({"extra": 1}, "extra"),
    ],
)
def test_invalid_config_names_field(raw, field):
    with pytest.raises(ConfigError, match=rf"^{field}[.:]"):
        parse_config(raw)


def test_cli_invalid_config_exit_code(tmp_path, capsys):
    path = _write_config(tmp_path, {"server": {"clients_per_round": 99}})
    assert cli.main(["run", "--config", path]) == 2
    assert "server" in capsys.readouterr().err
    bad = tmp_path / "broken.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_overrides(tmp_path, monkeypatch):
    cfg = _cfg(tmp_path)
    monkeypatch.setenv("FEDMERGE_OUTPUT_DIR", "/tmp/env-out")
    monkeypatch.setenv("FEDMERGE_THREADS", "3")
    env = apply_overrides(cfg)
    assert env.output_dir == "/tmp/env-out" and env.server.threads == 3
    flags = apply_overrides(cfg, seed=9, threads=2, out="/tmp/flag-out")
    assert flags.output_dir == "/tmp/flag-out" and flags.server.threads == 2 and flags.seeds == [9]
    monkeypatch.setenv("FEDMERGE_THREADS", "many")
    with pytest.raises(ConfigError):
        apply_overrides(cfg)


# -- run -------------------------------------------------------------------


def test_run_artifacts_and_determinism(tmp_path):
    cfg = _cfg(tmp_path, seeds=[0, 1, 2])
    summary = run_experiment(cfg)
    out = tmp_path / "run"
    first = (out / "seed_1" / "metrics.csv").read_bytes()
    assert first.startswith(b"# schema=1\nround,client,split,loss,acc,n_i\n")
    assert sorted(p.name for p in (out / "seed_0").glob("weights_round_*.csv")) == [
        f"weights_round_{r}.csv" for r in (0, 2, 4, 6)
    ]
    assert summary["test_acc"]["std"] > 0
    rerun = _cfg(tmp_path, seeds=[1], output_dir=str(tmp_path / "again"))
    run_experiment(rerun)
    assert (tmp_path / "again" / "seed_1" / "metrics.csv").read_bytes() == first
    on_disk = json.loads((out / "summary.json").read_text())
    assert on_disk["seeds"] == [0, 1, 2]
    assert (out / "federation.json").exists() and (out / "config.json").exists()


def test_summary_recomputable_from_metrics(tmp_path):
    cfg = _cfg(tmp_path, seeds=[0, 3], eval_every=2)
    summary = run_experiment(cfg)
    rebuilt = [summary_from_metrics(read_metrics(tmp_path / "run" / f"seed_{s}" / "metrics.csv"), s) for s in (0, 3)]
    for got, want in zip(rebuilt, summary["per_seed"]):
        assert got.keys() == want.keys()
        for key in got:
            assert got[key] == pytest.approx(want[key], rel=1e-12, abs=0)
    for key in ("test_acc", "test_loss", "best_val_loss", "final_test_acc"):
        vals = np.array([r[key] for r in rebuilt])
        assert summary[key]["mean"] == pytest.approx(vals.mean(), rel=1e-12)
        assert summary[key]["std"] == pytest.approx(vals.std(), rel=1e-9, abs=1e-15)


def test_checkpoint_is_min_val_loss(tmp_path):
    cfg = _cfg(tmp_path, server={"rounds": 8, "eta_loc": 0.5})
    summary = run_experiment(cfg)
    rows = read_metrics(tmp_path / "run" / "seed_0" / "metrics.csv")
    entry = summary["per_seed"][0]
    vals = {}
    for r in sorted({row["round"] for row in rows}):
        vr = [x for x in rows if x["round"] == r and x["split"] == "val"]
        vals[r] = sum(x["loss"] * x["n_i"] for x in vr) / sum(x["n_i"] for x in vr)
    assert entry["best_round"] == min(vals, key=lambda r: (vals[r], r))


def test_zero_rounds_and_single_seed(tmp_path):
    cfg = _cfg(tmp_path, server={"rounds": 0})
    summary = run_experiment(cfg)
    rows = read_metrics(tmp_path / "run" / "seed_0" / "metrics.csv")
    assert {r["round"] for r in rows} == {0}
    assert summary["per_seed"][0]["best_round"] == 0
    assert summary["test_acc"]["std"] == 0.0


@pytest.mark.parametrize("method, extra", [("fedavg", {}), ("ifca", {"d": 2}), ("fedem", {"d": 2}), ("local", {})])
def test_run_baselines(tmp_path, method, extra):
    cfg = _cfg(tmp_path, method=method, baseline=extra)
    summary = run_experiment(cfg)
    assert summary["method"] == ("fedem-lite" if method == "fedem" else method)
    assert 0.0 <= summary["test_acc"]["mean"] <= 1.0


def test_threads_do_not_change_metrics(tmp_path):
    for threads in (1, 4):
        cfg = apply_overrides(_cfg(tmp_path), threads=threads, out=str(tmp_path / f"t{threads}"))
        run_experiment(cfg)
    a = (tmp_path / "t1" / "seed_0" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "t4" / "seed_0" / "metrics.csv").read_bytes()


# -- weights export --------------------------------------------------------


def test_block_score_examples():
    ids = [0, 0, 1, 1, 2, 2]
    assert block_score(np.full((6, 3), 1 / 3), ids) == pytest.approx(0.0, abs=1e-15)
    assert block_score(np.eye(3)[ids], ids) == 1.0
    assert block_score(np.eye(3)[ids], [0] * 6) is None
    with pytest.raises(ValueError):
        block_score(np.eye(3), [0, 1])


def test_weights_export(tmp_path, capsys):
    run_experiment(_cfg(tmp_path))
    res = export_weights(tmp_path / "run", 4)
    assert res["weights"].shape == (6, 3) and res["score"] is not None
    assert export_weights(tmp_path / "run" / "seed_0")["round"] == 6
    with pytest.raises(FileNotFoundError, match=r"available rounds: \[0, 2, 4, 6\]"):
        export_weights(tmp_path / "run", 5)
    out = tmp_path / "w.csv"
    assert cli.main(["weights-export", "--run", str(tmp_path / "run"), "--round", "2", "--out", str(out)]) == 0
    assert out.read_text().startswith("client,w0,w1,w2\n")
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1])["round"] == 2
    assert cli.main(["weights-export", "--run", str(tmp_path / "run"), "--round", "3"]) == 2


# -- gradcheck -------------------------------------------------------------


def test_gradcheck_default_passes():
    worst = run_gradcheck()
    assert not failures(worst)
    assert {"weights[unconstrained]", "logits[softmax]", "theta_update[softmax]", "theta_update[unconstrained]"} <= set(worst)


@pytest.mark.parametrize("target", ["logits[softmax]", "theta_update[unconstrained]"])
def test_gradcheck_catches_sign_flip(target):
    formulas = dict(DEFAULT_FORMULAS)
    original = formulas[target]
    formulas[target] = lambda case: -original(case)
    assert failures(run_gradcheck(formulas)) == [target]
    assert softmax_logits is DEFAULT_FORMULAS["logits[softmax]"] and theta_update is DEFAULT_FORMULAS["theta_update[softmax]"]


def test_cli_gradcheck(capsys):
    assert cli.main(["gradcheck"]) == 0
    assert "all formulas within" in capsys.readouterr().out


# -- ablation, descent, gen-data ------------------------------------------


def test_fixed_weights():
    w = fixed_weights(5, 6, 0.5, seed=0)
    assert w.frozen and w.mask.sum(axis=1).tolist() == [3] * 5
    assert fixed_weights(5, 6, 0.01, seed=0).mask.sum(axis=1).tolist() == [1] * 5
    np.testing.assert_allclose(w.matrix().sum(axis=1), 1.0)
    assert not np.array_equal(w.mask, fixed_weights(5, 6, 0.5, seed=1).mask)
    with pytest.raises(ValueError):
        fixed_weights(5, 6, 0.0, seed=0)


def test_fixed_full_fraction_d1_is_fedavg(cluster_clients, logistic_spec):
    cfg = ServerConfig(d=1, rounds=5, batch_size=16, seed=2)
    fm = FedMergeTrainer(cluster_clients, logistic_spec, cfg, weights=fixed_weights(6, 1, 1.0, 2))
    fa = FedAvgTrainer(cluster_clients, logistic_spec, BaselineConfig(rounds=5, batch_size=16, seed=2))
    for r in range(1, 6):
        fm.step(r)
        fa.step(r)
        np.testing.assert_allclose(fm.soup[0].values, fa.model.values, rtol=0, atol=1e-12)


def test_ablation_rows(tmp_path):
    cfg = _cfg(tmp_path, seeds=[0])
    rows = run_ablation(cfg, [0.34, 1.0])
    assert [r["variant"] for r in rows] == ["dynamic", "fedavg", "fixed(1/3)", "fixed(3/3)"]
    assert all(r["weight_drift"] == 0.0 for r in rows if r["variant"].startswith("fixed"))
    with pytest.raises(ValueError):
        run_ablation(cfg, [1.5])


def test_cli_ablate_descent_gendata(tmp_path, capsys):
    raw = dict(SMALL, output_dir=str(tmp_path / "out"), descent_rounds=5)
    path = _write_config(tmp_path, raw)
    assert cli.main(["ablate-fixed", "--config", path, "--fractions", "0.5,1"]) == 0
    assert (tmp_path / "out" / "ablation.json").exists()
    assert cli.main(["descent", "--config", path, "--seed", "3"]) == 0
    result = json.loads((tmp_path / "out" / "descent.json").read_text())
    assert result["rounds"] == 5 and result["seed"] == 3 and result["smoothness"] > 0
    assert (tmp_path / "out" / "descent.csv").read_text().count("\n") == 6
    assert cli.main(["gen-data", "--config", path, "--out", str(tmp_path / "data")]) == 0
    assert len(list((tmp_path / "data").glob("client_*.csv"))) == 6
    assert cli.main(["run", "--config", path, "--out", str(tmp_path / "r")]) == 0
    capsys.readouterr()


def test_csv_config_source(tmp_path):
    export_federation(gen_cluster_noniid(FederationSpec(m=3, K=3, sizes=40), ClusterTruthSpec()), tmp_path / "d", 0)
    paths = sorted(str(p) for p in (tmp_path / "d").glob("client_*.csv"))
    cfg = _cfg(tmp_path, data={"csv_paths": paths}, federation={"m": 3})
    clients = cfg.build_clients()
    assert len(clients) == 3 and clients[0].n_i == 40
