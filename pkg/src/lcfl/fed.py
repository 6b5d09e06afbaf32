"""Federated engines: FedAvg, loss-based clustered FL, IFCA and the local-only baseline."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import clustering
from .clustering import ClusterAssignment
from .data import ClientDataset
from .errors import DivergenceError, ParameterError
from .metrics import DistanceMatrix, distance_matrix
from .model import ModelSpec, accuracy, check_params, init_params, loss
from .trainer import TrainConfig, local_sgd, warmup_all

log = logging.getLogger(__name__)

RAW_COLUMNS = ["iteration", "algorithm", "seed", "accuracy_mean_over_clients", "train_loss_mean", "num_clusters"]


@dataclass(frozen=True)
class FedConfig:
    participation_rate: float = 1.0
    global_iterations: int = 10
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    weighted_accuracy: bool = False

    def __post_init__(self):
        if not 0 < self.participation_rate <= 1:
            raise ParameterError("participation_rate must lie in (0, 1]")
        if self.global_iterations < 0:
            raise ParameterError("global_iterations must be >= 0")


@dataclass
class IterationRecord:
    iteration: int
    accuracy_mean: float
    train_loss_mean: float
    num_clusters: int
    cluster_sizes: list[int]
    accuracy_std_clients: float = 0.0
    wall_clock: float = 0.0


@dataclass
class RunLog:
    algorithm: str
    seed: int = 0
    records: list[IterationRecord] = field(default_factory=list)
    events: list[str] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def append(self, rec: IterationRecord) -> None:
        if self.records and rec.iteration <= self.records[-1].iteration:
            raise ValueError("iteration index must increase")
        self.records.append(rec)

    def accuracy_at(self, iteration: int) -> float:
        for r in self.records:
            if r.iteration == iteration:
                return r.accuracy_mean
        raise KeyError(iteration)

    @property
    def final_accuracy(self) -> float:
        return self.records[-1].accuracy_mean

    def rows(self) -> list[list]:
        return [[r.iteration, self.algorithm, self.seed, repr(float(r.accuracy_mean)),
                 repr(float(r.train_loss_mean)), r.num_clusters] for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(RAW_COLUMNS)
        wr.writerows(self.rows())
        return buf.getvalue()

    def to_dict(self) -> dict:
        """JSON-ready form; wall-clock is left out so files stay reproducible."""
        return {
            "algorithm": self.algorithm,
            "seed": self.seed,
            "metadata": self.metadata,
            "events": self.events,
            "records": [{"iteration": r.iteration, "accuracy_mean": r.accuracy_mean,
                         "accuracy_std_clients": r.accuracy_std_clients,
                         "train_loss_mean": r.train_loss_mean, "num_clusters": r.num_clusters,
                         "cluster_sizes": r.cluster_sizes} for r in self.records],
        }


# --------------------------------------------------------------------------- helpers

def num_participants(rate: float, group_size: int) -> int:
    return min(group_size, max(1, math.ceil(rate * group_size - 1e-12)))


def sample_participants(group_size: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Positions of ``ceil(rate * group_size)`` distinct clients, sorted."""
    k = num_participants(rate, group_size)
    if k == group_size:
        return np.arange(group_size)
    return np.sort(rng.choice(group_size, k, replace=False))


def round_rng(seed: int, round_idx: int, group_key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(round_idx), int(group_key), 0xFEDA]))


def weighted_average(params: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Weighted mean written as an offset from the first vector.

    Identical inputs therefore come back bit-for-bit.
    """
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    base = np.asarray(params[0], dtype=float)
    acc = np.zeros_like(base)
    for p, wi in zip(params[1:], w[1:]):
        acc += wi * (p - base)
    return base + acc


def _evaluate(spec: ModelSpec, models: Sequence[np.ndarray], train: Sequence[ClientDataset],
              test: Sequence[ClientDataset], weighted: bool):
    """Per-client test accuracy and train loss, each client with its own model."""
    accs, losses = [], []
    for w, tr, te in zip(models, train, test):
        losses.append(loss(spec, w, tr))
        if spec.is_classifier:
            accs.append(accuracy(spec, w, te))
        else:
            accs.append(float("nan"))
    accs = np.array(accs)
    if weighted:
        sizes = np.array([len(t) for t in test], float)
        acc_mean = float(np.sum(accs * sizes) / sizes.sum())
    else:
        acc_mean = float(np.mean(accs))
    return acc_mean, float(np.std(accs)), float(np.mean(losses)), accs


def _tests(train, test):
    return list(train) if test is None else list(test)


# --------------------------------------------------------------------------- FedAvg

def fedavg(spec: ModelSpec, train: Sequence[ClientDataset], w_init, cfg: FedConfig,
           test: Sequence[ClientDataset] | None = None, algorithm: str = "fedavg",
           log_rounds: bool = True) -> tuple[np.ndarray, RunLog]:
    """FedAvg over one client group.

    Each round samples participants, trains them locally from the current
    global model, and replaces the global model by the sample-size-weighted
    average. Accuracy is logged on every member's test split.
    """
    if not train:
        raise ParameterError("fedavg needs a nonempty client group")
    test = _tests(train, test)
    w = check_params(spec, w_init).copy()
    group_key = min(d.client_id for d in train)
    runlog = RunLog(algorithm, cfg.seed)
    t0 = time.perf_counter()
    for t in range(cfg.global_iterations):
        chosen = sample_participants(len(train), cfg.participation_rate, round_rng(cfg.seed, t, group_key))
        updates, sizes = [], []
        for pos in chosen:
            d = train[pos]
            try:
                updates.append(local_sgd(spec, w, d, cfg.train, global_iter=t))
            except DivergenceError as exc:
                raise DivergenceError(f"round {t + 1} aborted: {exc}", exc.iteration, d.client_id) from exc
            sizes.append(len(d))
        w = weighted_average(updates, sizes)
        if log_rounds:
            acc, acc_sd, tl, _ = _evaluate(spec, [w] * len(train), train, test, cfg.weighted_accuracy)
            runlog.append(IterationRecord(t + 1, acc, tl, 1, [len(train)], acc_sd, time.perf_counter() - t0))
    return w, runlog


# --------------------------------------------------------------------------- LCFL

@dataclass(frozen=True)
class ClusteringConfig:
    """Warm-up and clustering settings for the loss-based pipeline."""

    method: str = "k-medoids"
    k: int | None = 10
    metric: str = "loss-gap"
    linkage: str = "average"
    threshold: float | None = None
    eps: float | None = None
    min_pts: int = 2
    restarts: int = 5
    max_iters: int = 100
    per_client_init: bool = False

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def cluster_matrix(dm: DistanceMatrix, ccfg: ClusteringConfig, seed: int) -> ClusterAssignment:
    if ccfg.method == "k-medoids":
        k = min(ccfg.k, dm.size)
        return clustering.k_medoids(dm, k, seed=seed, max_iters=ccfg.max_iters, restarts=ccfg.restarts)
    if ccfg.method == "agglomerative":
        if ccfg.threshold is not None:
            return clustering.agglomerative(dm, ccfg.linkage, threshold=ccfg.threshold)
        return clustering.agglomerative(dm, ccfg.linkage, num_clusters=min(ccfg.k, dm.size))
    if ccfg.method == "dbscan":
        eps = ccfg.eps if ccfg.eps is not None else clustering.default_eps(dm)
        return clustering.dbscan(dm, eps, ccfg.min_pts)
    raise ParameterError(f"unknown clustering method {ccfg.method!r}")


@dataclass
class LcflResult:
    assignment: ClusterAssignment
    models: list[np.ndarray]
    log: RunLog
    distances: DistanceMatrix
    warmup: list[np.ndarray]

    def __iter__(self):
        return iter((self.assignment, self.models, self.log))


def lcfl_pipeline(spec: ModelSpec, train: Sequence[ClientDataset], ccfg: ClusteringConfig,
                  fcfg: FedConfig, test: Sequence[ClientDataset] | None = None, w0=None,
                  force_assignment: ClusterAssignment | None = None) -> LcflResult:
    """Warm-up, pairwise distances, clustering, then FedAvg inside every cluster.

    Warm-up runs ``fcfg.train.local_iterations`` full-batch steps at step size
    ``fcfg.train.warmup_step``. Each cluster model starts from the size-weighted
    average of its members' warm-up parameters. DBSCAN noise clients become
    singleton clusters. Unpacks as ``(assignment, models, log)``.
    """
    if len(train) < 2:
        raise ParameterError("clustered training needs at least 2 clients")
    test = _tests(train, test)
    warm = warmup_all(spec, train, fcfg.train, w0=w0, per_client_init=ccfg.per_client_init)
    order = np.argsort([d.client_id for d in train], kind="stable")
    warm_by_pos = [None] * len(train)
    for rank, pos in enumerate(order):
        warm_by_pos[pos] = warm[rank]
    dm = distance_matrix(ccfg.metric, spec, train, warm_by_pos)
    runlog = RunLog("lcfl", fcfg.seed)
    if force_assignment is not None:
        assign = force_assignment
    else:
        assign = cluster_matrix(dm, ccfg, fcfg.seed)
    if assign.noise_mask.any():
        runlog.events.append(f"dbscan noise clients {np.flatnonzero(assign.noise_mask).tolist()} "
                             "trained as singleton clusters")
        assign = assign.with_noise_as_singletons()
    runlog.metadata.update({"metric": ccfg.metric, "clustering": ccfg.to_dict(),
                            "cluster_labels": assign.labels.tolist()})
    if ccfg.metric == "grad-cosine":
        runlog.metadata["grad_cosine_reference"] = "mean of warm-up parameters"

    models: list[np.ndarray] = []
    logs: list[RunLog] = []
    groups = [assign.members(c) for c in range(assign.num_clusters)]
    for c, mem in enumerate(groups):
        g_train = [train[i] for i in mem]
        g_test = [test[i] for i in mem]
        start = weighted_average([warm_by_pos[i] for i in mem], [len(train[i]) for i in mem])
        w_c, lg = fedavg(spec, g_train, start, fcfg, g_test, algorithm="lcfl")
        models.append(w_c)
        logs.append(lg)

    sizes = assign.sizes
    if fcfg.weighted_accuracy:
        weights = np.array([sum(len(test[i]) for i in mem) for mem in groups], float)
    else:
        weights = np.array([len(mem) for mem in groups], float)
    weights /= weights.sum()
    counts = np.array([len(mem) for mem in groups], float)
    for t in range(fcfg.global_iterations):
        recs = [lg.records[t] for lg in logs]
        acc_c = np.array([r.accuracy_mean for r in recs])
        sd_c = np.array([r.accuracy_std_clients for r in recs])
        loss_c = np.array([r.train_loss_mean for r in recs])
        acc = float(np.sum(weights * acc_c))
        # pooled spread over all clients from per-cluster means and spreads
        mu = float(np.sum(counts * acc_c) / counts.sum())
        sd = float(np.sqrt(np.sum(counts * (sd_c ** 2 + (acc_c - mu) ** 2)) / counts.sum()))
        tl = float(np.sum(counts * loss_c) / counts.sum())
        runlog.append(IterationRecord(t + 1, acc, tl, assign.num_clusters, list(sizes), sd,
                                      max(r.wall_clock for r in recs)))
    return LcflResult(assign, models, runlog, dm, warm_by_pos)


# --------------------------------------------------------------------------- IFCA

def ifca(spec: ModelSpec, train: Sequence[ClientDataset], k: int, w_inits: Sequence, cfg: FedConfig,
         test: Sequence[ClientDataset] | None = None) -> tuple[ClusterAssignment, list[np.ndarray], RunLog]:
    """Iterative federated clustering.

    Every round each participant picks the cluster model with the lowest loss
    on its train split (lowest index on ties), trains from it, and the server
    averages the returns per cluster. Untouched clusters keep their model.
    """
    if k < 1:
        raise ParameterError("ifca needs k >= 1")
    if len(w_inits) != k:
        raise ParameterError(f"{len(w_inits)} initial models for k={k}")
    test = _tests(train, test)
    models = [check_params(spec, w).copy() for w in w_inits]
    group_key = min(d.client_id for d in train)
    runlog = RunLog("ifca", cfg.seed)
    t0 = time.perf_counter()

    def choose(d: ClientDataset) -> int:
        return int(np.argmin([loss(spec, w, d) for w in models]))

    for t in range(cfg.global_iterations):
        chosen = sample_participants(len(train), cfg.participation_rate, round_rng(cfg.seed, t, group_key))
        buckets: dict[int, tuple[list, list]] = {}
        for pos in chosen:
            d = train[pos]
            j = choose(d) if k > 1 else 0
            try:
                w_new = local_sgd(spec, models[j], d, cfg.train, global_iter=t)
            except DivergenceError as exc:
                raise DivergenceError(f"round {t + 1} aborted: {exc}", exc.iteration, d.client_id) from exc
            ups, sz = buckets.setdefault(j, ([], []))
            ups.append(w_new)
            sz.append(len(d))
        for j, (ups, sz) in buckets.items():
            models[j] = weighted_average(ups, sz)
        labels = np.array([choose(d) if k > 1 else 0 for d in train])
        acc, acc_sd, tl, _ = _evaluate(spec, [models[j] for j in labels], train, test, cfg.weighted_accuracy)
        sizes = [int(np.sum(labels == j)) for j in range(k)]
        runlog.append(IterationRecord(t + 1, acc, tl, int(np.count_nonzero(sizes)), sizes, acc_sd,
                                      time.perf_counter() - t0))
    labels = np.array([choose(d) if k > 1 else 0 for d in train])
    assign = ClusterAssignment(clustering.relabel_by_appearance(labels), len(np.unique(labels)))
    runlog.metadata["cluster_models_of_clients"] = labels.tolist()
    return assign, models, runlog


def ifca_inits(spec: ModelSpec, k: int, seed: int) -> list[np.ndarray]:
    return [init_params(spec, np.random.default_rng(np.random.SeedSequence([int(seed), j, 0x1FCA])))
            for j in range(k)]


# --------------------------------------------------------------------------- local only

def local_only(spec: ModelSpec, train: Sequence[ClientDataset], w_init, cfg: FedConfig,
               test: Sequence[ClientDataset] | None = None) -> tuple[list[np.ndarray], RunLog]:
    """Every client trains alone; one log record per equivalent global iteration.

    A diverging client is dropped from the averages and noted in the log events.
    """
    test = _tests(train, test)
    models = [check_params(spec, w_init).copy() for _ in train]
    alive = np.ones(len(train), bool)
    runlog = RunLog("local", cfg.seed)
    t0 = time.perf_counter()
    for t in range(cfg.global_iterations):
        for pos, d in enumerate(train):
            if not alive[pos]:
                continue
            try:
                models[pos] = local_sgd(spec, models[pos], d, cfg.train, global_iter=t)
            except DivergenceError as exc:
                alive[pos] = False
                runlog.events.append(f"client {d.client_id} diverged in iteration {t + 1}: {exc}")
        idx = np.flatnonzero(alive)
        acc, acc_sd, tl, _ = _evaluate(spec, [models[i] for i in idx], [train[i] for i in idx],
                                       [test[i] for i in idx], cfg.weighted_accuracy)
        runlog.append(IterationRecord(t + 1, acc, tl, len(train), [1] * len(train), acc_sd,
                                      time.perf_counter() - t0))
    runlog.metadata["excluded_clients"] = [train[i].client_id for i in np.flatnonzero(~alive)]
    return models, runlog
