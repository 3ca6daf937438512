"""Run experiments from an :class:`ExperimentConfig` and write their artifacts.

Layout of an output directory::

    config.json  federation.json  summary.json
    seed_<s>/metrics.csv  seed_<s>/diagnostics.csv  seed_<s>/weights_round_<R>.csv
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import re
from pathlib import Path
from typing import Sequence

import numpy as np

from fedmerge.baselines import make_trainer
from fedmerge.config import ExperimentConfig
from fedmerge.data import SPLITS, ClientDataset, federation_manifest
from fedmerge.diagnostics import DescentReport, descent_check, soup_smoothness
from fedmerge.params import STREAM_MISC, SeededRng
from fedmerge.reports import RoundReport, best_round, run_rounds
from fedmerge.server import FedMergeTrainer, MergeWeights, ModelSoup, WeightMode

SCHEMA = 1
METRIC_COLUMNS = ("round", "client", "split", "loss", "acc", "n_i")
_SNAPSHOT = re.compile(r"weights_round_(\d+)\.csv$")


def _fmt(x: float) -> str:
    return repr(float(x))


def metrics_csv(reports: Sequence[RoundReport]) -> str:
    buf = io.StringIO()
    buf.write(f"# schema={SCHEMA}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for rep in reports:
        if not rep.evaluated:
            continue
        for split in SPLITS:
            for i, row in enumerate(rep.per_client[split]):
                writer.writerow([rep.round, i, split, _fmt(row.loss), _fmt(row.acc), row.n])
    return buf.getvalue()


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
        if first != f"# schema={SCHEMA}":
            raise ValueError(f"{path}: expected '# schema={SCHEMA}' header, got {first!r}")
        rows = []
        for rec in csv.DictReader(fh):
            rows.append({
                "round": int(rec["round"]),
                "client": int(rec["client"]),
                "split": rec["split"],
                "loss": float(rec["loss"]),
                "acc": float(rec["acc"]),
                "n_i": int(rec["n_i"]),
            })
    return rows


def diagnostics_csv(reports: Sequence[RoundReport]) -> str:
    keys = sorted({k for rep in reports for k in rep.diagnostics})
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["round", "selected", "skipped"] + keys)
    for rep in reports:
        writer.writerow(
            [rep.round, " ".join(map(str, rep.selected_clients)), " ".join(map(str, rep.skipped))]
            + [_fmt(rep.diagnostics.get(k, float("nan"))) for k in keys]
        )
    return buf.getvalue()


def weights_csv(w: np.ndarray) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["client"] + [f"w{j}" for j in range(w.shape[1])])
    for i, row in enumerate(w):
        writer.writerow([i] + [_fmt(v) for v in row])
    return buf.getvalue()


def read_weights(path: str | Path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64)


def snapshot_rounds(run_dir: str | Path) -> list[int]:
    return sorted(int(m.group(1)) for p in Path(run_dir).iterdir() if (m := _SNAPSHOT.match(p.name)))


def seed_summary(reports: Sequence[RoundReport], seed: int) -> dict:
    best = best_round(reports)
    final = [r for r in reports if r.evaluated][-1]
    return {
        "seed": seed,
        "best_round": best.round,
        "best_val_loss": best.weighted_avg["val"]["loss"],
        "test_acc": best.weighted_avg["test"]["acc"],
        "test_loss": best.weighted_avg["test"]["loss"],
        "final_round": final.round,
        "final_test_acc": final.weighted_avg["test"]["acc"],
    }


def mean_std(values: Sequence[float]) -> dict[str, float]:
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std(ddof=0))}


def aggregate(per_seed: Sequence[dict]) -> dict:
    return {key: mean_std([s[key] for s in per_seed]) for key in ("test_acc", "test_loss", "best_val_loss", "final_test_acc")}


def fixed_weights(m: int, d: int, fraction: float, seed: int) -> MergeWeights:
    """Frozen uniform weights over a random client-specific subset of ``k`` soup models."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    k = max(1, math.floor(fraction * d + 0.5))
    base = SeededRng(seed, STREAM_MISC).child(0xAB1A7E)
    mask = np.zeros((m, d), dtype=bool)
    for i in range(m):
        mask[i, base.child(i).generator.choice(d, size=k, replace=False)] = True
    return MergeWeights(np.zeros((m, d)), WeightMode.SOFTMAX, mask=mask, frozen=True)


def build_trainer(cfg: ExperimentConfig, clients: Sequence[ClientDataset], seed: int, weights: MergeWeights | None = None):
    if cfg.method == "fedmerge":
        server = cfg.server_config(seed)
        if weights is not None and weights.mode is not server.weight_mode:
            server = dataclasses.replace(server, weight_mode=weights.mode)
        return FedMergeTrainer(clients, cfg.model, server, weights=weights)
    return make_trainer(clients, cfg.model, cfg.baseline_config(seed))


def train(cfg: ExperimentConfig, clients: Sequence[ClientDataset], seed: int, weights: MergeWeights | None = None):
    trainer = build_trainer(cfg, clients, seed, weights)
    reports = run_rounds(trainer, clients, cfg.server.rounds, cfg.eval_every)
    return trainer, reports


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def write_seed_artifacts(run_dir: Path, reports: Sequence[RoundReport], snapshot_every: int) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    _write(run_dir / "metrics.csv", metrics_csv(reports))
    _write(run_dir / "diagnostics.csv", diagnostics_csv(reports))
    last = reports[-1].round
    for rep in reports:
        if rep.weights is not None and (rep.round % snapshot_every == 0 or rep.round == last):
            _write(run_dir / f"weights_round_{rep.round}.csv", weights_csv(rep.weights))


def run_experiment(cfg: ExperimentConfig, clients: Sequence[ClientDataset] | None = None) -> dict:
    """Train every seed, write all artifacts, return the summary."""
    clients = list(clients) if clients is not None else cfg.build_clients()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "config.json", json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    _write(out / "federation.json", json.dumps(federation_manifest(clients, cfg.federation.seed), indent=1, sort_keys=True))
    per_seed = []
    for seed in cfg.seeds:
        _, reports = train(cfg, clients, seed)
        write_seed_artifacts(out / f"seed_{seed}", reports, cfg.snapshot_every)
        per_seed.append(seed_summary(reports, seed))
    # simplified FedEM is labelled as such in every report
    name = "fedem-lite" if cfg.method == "fedem" else cfg.method
    summary = {
        "schema": SCHEMA,
        "method": name,
        "rounds": cfg.server.rounds,
        "seeds": list(cfg.seeds),
        "per_seed": per_seed,
        **aggregate(per_seed),
    }
    _write(out / "summary.json", json.dumps(summary, indent=1, sort_keys=True))
    return summary


def summary_from_metrics(metrics_rows: Sequence[dict], seed: int) -> dict:
    """Rebuild one seed's summary entry from its metrics.csv rows."""
    by_round: dict[int, dict[str, list[dict]]] = {}
    for row in metrics_rows:
        by_round.setdefault(row["round"], {}).setdefault(row["split"], []).append(row)

    def avg(rows: list[dict], key: str) -> float:
        rows = [r for r in rows if r["n_i"] > 0]
        total = sum(r["n_i"] for r in rows)
        return sum(r[key] * r["n_i"] for r in rows) / total if total else float("nan")

    rounds = sorted(by_round)
    val = {r: avg(by_round[r]["val"], "loss") for r in rounds}
    best = min(rounds, key=lambda r: (math.inf if math.isnan(val[r]) else val[r], r))
    return {
        "seed": seed,
        "best_round": best,
        "best_val_loss": val[best],
        "test_acc": avg(by_round[best]["test"], "acc"),
        "test_loss": avg(by_round[best]["test"], "loss"),
        "final_round": rounds[-1],
        "final_test_acc": avg(by_round[rounds[-1]]["test"], "acc"),
    }


def block_score(w: np.ndarray, cluster_ids: Sequence[int]) -> float | None:
    """Mean intra-cluster minus mean inter-cluster cosine similarity of rows.

    Self-pairs are excluded; a zero row has similarity 0 with everything.
    Returns None when either kind of pair is absent.
    """
    w = np.asarray(w, dtype=np.float64)
    ids = np.asarray(cluster_ids)
    if ids.shape[0] != w.shape[0]:
        raise ValueError(f"{ids.shape[0]} cluster ids for {w.shape[0]} rows")
    norms = np.linalg.norm(w, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = w / safe[:, None]
    sim = unit @ unit.T
    same = ids[:, None] == ids[None, :]
    off = ~np.eye(len(ids), dtype=bool)
    intra, inter = sim[same & off], sim[~same]
    if intra.size == 0 or inter.size == 0:
        return None
    return float(intra.mean() - inter.mean())


def _resolve_run_dir(run_dir: Path, seed: int | None) -> tuple[Path, Path]:
    """Return (seed directory, experiment directory) for a path that may be either."""
    if (run_dir / "metrics.csv").exists():
        return run_dir, run_dir.parent
    seeds = sorted(int(p.name.split("_", 1)[1]) for p in run_dir.glob("seed_*") if p.is_dir())
    if not seeds:
        raise FileNotFoundError(f"{run_dir}: no seed_* runs found")
    chosen = seeds[0] if seed is None else seed
    if chosen not in seeds:
        raise FileNotFoundError(f"{run_dir}: no run for seed {chosen}; available seeds {seeds}")
    return run_dir / f"seed_{chosen}", run_dir


def export_weights(run_dir: str | Path, round_index: int | None = None, seed: int | None = None) -> dict:
    """Load one snapshot and score it against the ground-truth cluster ids."""
    seed_dir, exp_dir = _resolve_run_dir(Path(run_dir), seed)
    available = snapshot_rounds(seed_dir)
    if not available:
        raise FileNotFoundError(f"{seed_dir}: no weight snapshots")
    r = available[-1] if round_index is None else round_index
    if r not in available:
        raise FileNotFoundError(f"no snapshot for round {r}; available rounds: {available}")
    w = read_weights(seed_dir / f"weights_round_{r}.csv")
    score = None
    fed = exp_dir / "federation.json"
    if fed.exists():
        ids = json.loads(fed.read_text())["cluster_ids"]
        if all(c is not None and c >= 0 for c in ids):
            score = block_score(w, ids)
    return {"round": r, "weights": w, "score": score, "available": available}


def run_ablation(cfg: ExperimentConfig, fractions: Sequence[float], clients: Sequence[ClientDataset] | None = None) -> list[dict]:
    """Dynamic FedMerge, FedAvg and Fixed(k/d) variants under the same budget."""
    for f in fractions:
        if not 0 < f <= 1:
            raise ValueError(f"fraction must be in (0, 1], got {f}")
    clients = list(clients) if clients is not None else cfg.build_clients()
    m, d = len(clients), cfg.server.d
    base = dataclasses.replace(cfg, method="fedmerge")
    fedavg = dataclasses.replace(cfg, method="fedavg", baseline=dataclasses.replace(cfg.baseline, d=1, finetune_epochs=0))
    rows = []
    for seed in cfg.seeds:
        variants = [("dynamic", d, base, None), ("fedavg", 1, fedavg, None)]
        for f in fractions:
            w = fixed_weights(m, d, f, seed)
            variants.append((f"fixed({int(w.mask[0].sum())}/{d})", int(w.mask[0].sum()), base, w))
        for name, k, vcfg, weights in variants:
            trainer, reports = train(vcfg, clients, seed, weights)
            drift = None
            if weights is not None:
                drift = float(np.max(np.abs(trainer.weights.logits)))
            rows.append({"variant": name, "k": k, "seed": seed, **seed_summary(reports, seed), "weight_drift": drift})
    return rows


def ablation_table(rows: Sequence[dict]) -> list[dict]:
    names = list(dict.fromkeys(r["variant"] for r in rows))
    table = []
    for name in names:
        accs = [r["test_acc"] for r in rows if r["variant"] == name]
        table.append({"variant": name, "n_seeds": len(accs), **{f"test_acc_{k}": v for k, v in mean_std(accs).items()}})
    return table


def run_descent(cfg: ExperimentConfig, seed: int, clients: Sequence[ClientDataset] | None = None,
                multiplier: float | None = None, rounds: int | None = None, d: int | None = None) -> DescentReport:
    """Estimate the smoothness constant at the initial point, then check descent at ``multiplier / L``."""
    clients = list(clients) if clients is not None else cfg.build_clients()
    d = cfg.server.d if d is None else d
    soup = ModelSoup.random(cfg.model.layout, d, seed)
    weights = MergeWeights.uniform(len(clients), d, WeightMode.SOFTMAX)
    L = soup_smoothness(clients, cfg.model, soup, weights, cfg.smoothness_probes, SeededRng(seed, STREAM_MISC).child(0x5E00))
    mult = cfg.descent_multiplier if multiplier is None else multiplier
    return descent_check(clients, cfg.model, soup, weights, mult / L, cfg.descent_rounds if rounds is None else rounds, L, seed)


def descent_csv(report: DescentReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    cols = [f.name for f in dataclasses.fields(report.rounds[0])] if report.rounds else []
    writer.writerow(cols + ["running_avg", "fitted"])
    for r, avg in zip(report.rounds, report.running_avg):
        fitted = report.fit_c / (r.round * report.d) + report.fit_plateau
        writer.writerow([_cell(getattr(r, c)) for c in cols] + [_fmt(avg), _fmt(fitted)])
    return buf.getvalue()


def _cell(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return _fmt(v)
    return str(v)
