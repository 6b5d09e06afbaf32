"""Experiment orchestration behind the command line.

Every run writes per-seed artifacts first (raw CSV, JSON log, completion
marker) and then merges them single-threaded into ``summary.csv`` and
``manifest.json``. Nothing time-dependent is written, so reruns of the same
config produce identical bytes.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import platform
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import __version__
from .. import bounds
from ..clustering import adjusted_rand_index
from ..data import build_federation, normalize, split_all, true_clusters
from ..errors import ComparabilityError, ParameterError
from ..fed import RAW_COLUMNS, RunLog, fedavg, ifca, ifca_inits, lcfl_pipeline, local_only
from ..metrics import distance_matrix
from ..model import ModelSpec, init_params
from ..trainer import warmup_all
from .config import ExperimentConfig

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = ["iteration", "algorithm", "acc_mean", "acc_std"]
THREADS_ENV = "LCFL_THREADS"


def default_threads() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ParameterError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ParameterError(f"{THREADS_ENV} must be >= 1")
    return n


def _write(path: Path, text: str) -> None:
    # newline="" keeps LF endings on every platform
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


# --------------------------------------------------------------------------- one seed

def prepare_clients(cfg: ExperimentConfig, seed: int):
    """Materialize, normalize and split the federation for one run seed."""
    fed_spec = replace(cfg.federation, seed=cfg.data.data_seed(seed))
    clients = build_federation(fed_spec)
    if cfg.data.normalize:
        clients = normalize(clients)
    if cfg.data.test_fraction > 0:
        train, test = split_all(clients, cfg.data.test_fraction, cfg.data.data_seed(seed))
    else:
        train, test = list(clients), list(clients)
    return train, test


def shared_init(spec: ModelSpec, seed: int) -> np.ndarray:
    # same stream warmup_all uses, so every algorithm starts from one point
    return init_params(spec, np.random.default_rng(np.random.SeedSequence([int(seed), 0x1A17])))


def run_seed(cfg: ExperimentConfig, seed: int) -> tuple[RunLog, dict[str, str]]:
    """Train one algorithm for one seed; returns the log and extra artifacts by filename."""
    train, test = prepare_clients(cfg, seed)
    fcfg = replace(cfg.fed, seed=seed, train=replace(cfg.fed.train, seed=seed))
    w0 = shared_init(cfg.model, seed)
    extra: dict[str, str] = {}
    if cfg.algorithm == "lcfl":
        res = lcfl_pipeline(cfg.model, train, cfg.clustering, fcfg, test, w0=w0)
        runlog = res.log
        ids = [d.client_id for d in train]
        truth = true_clusters(train)
        if np.all(truth >= 0):
            runlog.metadata["ari"] = adjusted_rand_index(res.assignment, truth)
        extra[f"assignment_seed{seed}.csv"] = res.assignment.to_csv(ids)
        extra[f"distances_seed{seed}.csv"] = res.distances.to_csv(ids)
    elif cfg.algorithm == "ifca":
        _, _, runlog = ifca(cfg.model, train, cfg.ifca_k, ifca_inits(cfg.model, cfg.ifca_k, seed), fcfg, test)
    elif cfg.algorithm == "fedavg":
        _, runlog = fedavg(cfg.model, train, w0, fcfg, test)
    else:
        _, runlog = local_only(cfg.model, train, w0, fcfg, test)
    runlog.metadata["data_seed"] = cfg.data.data_seed(seed)
    return runlog, extra


def _paths(out: Path, seed: int) -> dict[str, Path]:
    return {"raw": out / f"raw_seed{seed}.csv", "json": out / f"run_seed{seed}.json",
            "done": out / f".done_seed{seed}"}


def _run_and_store(cfg: ExperimentConfig, seed: int, out: Path) -> None:
    p = _paths(out, seed)
    runlog, extra = run_seed(cfg, seed)
    for name, text in extra.items():
        _write(out / name, text)
    _write(p["raw"], runlog.to_csv())
    _write(p["json"], _json(runlog.to_dict()))
    _write(p["done"], "ok\n")


def read_raw(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and list(rows[0].keys()) != RAW_COLUMNS:
        raise ParameterError(f"{path}: unexpected raw CSV header")
    return rows


def summarize(raw_by_seed: dict[int, list[dict]], algorithm: str) -> str:
    """Per-iteration mean and population std of accuracy across seeds."""
    per_iter: dict[int, list[float]] = {}
    for seed in sorted(raw_by_seed):
        for row in raw_by_seed[seed]:
            per_iter.setdefault(int(row["iteration"]), []).append(float(row["accuracy_mean_over_clients"]))
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(SUMMARY_COLUMNS)
    for it in sorted(per_iter):
        vals = np.array(per_iter[it])
        wr.writerow([it, algorithm, repr(float(vals.mean())), repr(float(vals.std()))])
    return buf.getvalue()


def read_summary(path) -> dict[int, tuple[float, float]]:
    with open(path, encoding="utf-8", newline="") as fh:
        return {int(r["iteration"]): (float(r["acc_mean"]), float(r["acc_std"])) for r in csv.DictReader(fh)}


def manifest(cfg: ExperimentConfig) -> dict:
    return {"config": cfg.resolved(), "version": __version__,
            "software": {"python": platform.python_version(), "numpy": np.__version__}}


def run(configs: Sequence[ExperimentConfig], threads: int | None = None, resume: bool = True) -> list[Path]:
    """Run every config over its seeds; returns the output directories.

    Seeds whose completion marker exists are skipped when ``resume`` is set;
    a missing marker means the seed's files are rewritten from scratch.
    """
    threads = default_threads() if threads is None else threads
    if threads < 1:
        raise ParameterError("threads must be >= 1")
    outs = []
    for cfg in configs:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        man = out / "manifest.json"
        if man.exists() and man.read_text(encoding="utf-8") != _json(manifest(cfg)):
            # artifacts from a different config: never resume from them
            log.info("config changed since last run in %s; recomputing all seeds", out)
            resume = False
        todo = [s for s in cfg.seeds if not (resume and _paths(out, s)["done"].exists())]
        for s in todo:
            _paths(out, s)["done"].unlink(missing_ok=True)
        if threads == 1 or len(todo) <= 1:
            for s in todo:
                _run_and_store(cfg, s, out)
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                for fut in [pool.submit(_run_and_store, cfg, s, out) for s in todo]:
                    fut.result()
        raw = {s: read_raw(_paths(out, s)["raw"]) for s in cfg.seeds}
        _write(out / "summary.csv", summarize(raw, cfg.algorithm))
        _write(out / "manifest.json", _json(manifest(cfg)))
        outs.append(out)
    return outs


# --------------------------------------------------------------------------- compare

def column_label(cfg: ExperimentConfig) -> str:
    if cfg.algorithm == "lcfl" and cfg.clustering is not None and cfg.clustering.metric != "loss-gap":
        return f"lcfl[{cfg.clustering.metric}]"
    return cfg.algorithm


def compare(configs: Sequence[ExperimentConfig], iterations: Sequence[int], threads: int | None = None,
            output: str | None = None) -> str:
    """Table of mean±std test accuracy (percent): rows are iterations, columns algorithms.

    Configs whose summary is missing are run first.
    """
    if not configs:
        raise ParameterError("compare needs at least one config")
    key = configs[0].comparable_key()
    for c in configs[1:]:
        if c.comparable_key() != key:
            raise ComparabilityError(f"config {c.name!r} ({c.algorithm}) differs from {configs[0].name!r} "
                                     "in federation, data, model or seeds")
    for c in configs:
        for it in iterations:
            if not 1 <= it <= c.fed.global_iterations:
                raise ParameterError(f"iteration {it} outside 1..{c.fed.global_iterations} for {c.algorithm}")
    missing = [c for c in configs if not (Path(c.output_dir) / "summary.csv").exists()]
    if missing:
        run(missing, threads)
    labels = [column_label(c) for c in configs]
    if len(set(labels)) < len(labels):
        labels = [f"{lab}@{c.name}" for lab, c in zip(labels, configs)]
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["iteration"] + labels)
    summaries = [read_summary(Path(c.output_dir) / "summary.csv") for c in configs]
    for it in iterations:
        wr.writerow([it] + [f"{100 * s[it][0]:.2f}±{100 * s[it][1]:.2f}" for s in summaries])
    text = buf.getvalue()
    if output is not None:
        Path(output).parent.mkdir(parents=True, exist_ok=True)
        _write(Path(output), text)
    return text


# --------------------------------------------------------------------------- verify

def verify(vcfg: dict, echo=print) -> int:
    """Run the bound checks, write one JSON report each; returns the exit status."""
    out = Path(vcfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    t = vcfg["theorem1"]
    pops = bounds.linear_family_pops(t["sigma_xy"], t["noise_std"])
    dim = pops[0].dim
    spec = ModelSpec("linear-regression", dim, weight_bound=float(t["weight_bound"]))
    problem = bounds.BoundedProblem(spec, float(t["domain_bound"]), float(t["label_bound"]))
    results = []

    lo, hi = problem.check_range(20_000, seed=t["seed"])
    rep = bounds.verify_theorem1(pops[0], pops[1], problem, t["m_i"], t["m_j"], float(t["delta"]), t["trials"],
                                 seed=t["seed"], rad_sets=t["rademacher_sets"], rad_sigma=t["rademacher_sigma"])
    d = rep.to_dict()
    d["loss_range_check"] = {"min": lo, "max": hi, "ok": bool(lo >= 0 and hi <= 1)}
    _write(out / "theorem1.json", _json(d))
    results.append(("theorem1-frequency", rep.passed,
                    f"frequency {rep.frequency:.4f} (lower {rep.ci_low:.4f}) vs (1-delta)^4 = {rep.threshold:.4f}"))

    s = vcfg["sandwich"]
    rng = np.random.default_rng(np.random.SeedSequence([int(s["seed"]), 0x5A4D]))
    rows, ok = [], 0
    for _ in range(s["instances"]):
        p, q = bounds.random_centered_pair(rng, s["dim"])
        sw = bounds.loss_gap_sandwich(p, q)
        tol = s["rel_tol"] * max(1.0, abs(sw.gap))
        good = sw.lower <= sw.gap + tol and sw.gap <= sw.upper + tol
        ok += good
        rows.append({"lower": sw.lower, "gap": sw.gap, "upper": sw.upper, "ok": bool(good)})
    eye = np.eye(s["dim"])
    e0 = np.zeros(s["dim"])
    e0[0] = 1.0
    tight = bounds.loss_gap_sandwich(bounds.PopulationSpec(np.zeros(s["dim"]), eye, e0),
                                     bounds.PopulationSpec(np.zeros(s["dim"]), eye.copy(), -e0))
    tight_ok = tight.lower == tight.gap == tight.upper == 4.0
    _write(out / "sandwich.json", _json({"instances": rows, "passed": ok, "total": s["instances"],
                                         "tight_case": tight._asdict(), "tight_ok": bool(tight_ok)}))
    results.append(("sandwich", ok == s["instances"] and tight_ok,
                    f"{ok}/{s['instances']} instances, tight case {'exact' if tight_ok else 'off'}"))

    dc = vcfg["discrepancy"]
    rng = np.random.default_rng(np.random.SeedSequence([int(dc["seed"]), 0xD15C]))
    rows, ok = [], 0
    for k in range(dc["pairs"]):
        sxy = rng.uniform(-1.0, 1.0, (2, dim))
        pi, pj = bounds.linear_family_pops(sxy, t["noise_std"])
        d_hat = bounds.expected_loss_gap(problem, pi, pj)
        disc = bounds.label_discrepancy_estimate(pi, pj, problem, seed=dc["seed"] + k)
        good = d_hat <= 2 * disc + dc["tol"]
        ok += good
        rows.append({"sigma_xy": sxy.tolist(), "d_hat": d_hat, "disc": disc, "ok": bool(good)})
    _write(out / "discrepancy.json", _json({"pairs": rows, "passed": ok, "total": dc["pairs"]}))
    results.append(("discrepancy", ok == dc["pairs"], f"d_hat <= 2 disc on {ok}/{dc['pairs']} pairs"))

    for name, passed, msg in results:
        echo(f"{'PASS' if passed else 'FAIL'} {name}: {msg}")
    return 0 if all(r[1] for r in results) else 1


# --------------------------------------------------------------------------- gen-data / inspect

def gen_data(cfg: ExperimentConfig, seed: int, out_dir) -> Path:
    """Write each client's train/test arrays to ``client_<id>.npz`` plus ``federation.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test = prepare_clients(cfg, seed)
    meta = []
    for tr, te in zip(train, test):
        np.savez(out / f"client_{tr.client_id:04d}.npz", train_x=tr.features, train_y=tr.labels,
                 test_x=te.features, test_y=te.labels)
        meta.append({"client_id": tr.client_id, "true_cluster": tr.true_cluster,
                     "num_train": len(tr), "num_test": len(te)})
    doc = {"federation": cfg.resolved()["federation"], "data": cfg.resolved()["data"], "seed": seed,
           "data_seed": cfg.data.data_seed(seed), "clients": meta}
    _write(out / "federation.json", _json(doc))
    return out


def inspect_matrix(cfg: ExperimentConfig, seed: int, metric: str | None = None, digits: int = 4) -> str:
    """Warm up every client and render the resulting distance matrix as text."""
    train, _ = prepare_clients(cfg, seed)
    tcfg = replace(cfg.fed.train, seed=seed)
    if metric is None:
        metric = cfg.clustering.metric if cfg.clustering is not None else "loss-gap"
    warm = warmup_all(cfg.model, train, tcfg, w0=shared_init(cfg.model, seed))
    dm = distance_matrix(metric, cfg.model, train, warm)
    truth = true_clusters(train)
    width = max(digits + 4, 6)
    lines = [f"# {metric} distances, {dm.size} clients, seed {seed}",
             " " * 8 + "".join(f"{d.client_id:>{width}d}" for d in train)]
    for d, row, tc in zip(train, dm.values, truth):
        tag = f"{d.client_id}" + (f"/{tc}" if tc >= 0 else "")
        lines.append(f"{tag:>8}" + "".join(f"{v:>{width}.{digits}f}" for v in row))
    return "\n".join(lines) + "\n"
