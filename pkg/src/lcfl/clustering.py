"""Clustering from a precomputed distance matrix.

Only algorithms that need nothing but pairwise distances are offered; a
centroid cannot be formed from distances alone.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from math import comb

import numpy as np

from .errors import ParameterError, ShapeError


@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    labels: np.ndarray
    num_clusters: int
    medoids: list[int] | None = None
    noise_mask: np.ndarray | None = None
    objective: float | None = None
    history: list = field(default_factory=list)

    def __post_init__(self):
        lab = np.asarray(self.labels, dtype=int)
        object.__setattr__(self, "labels", lab)
        noise = np.zeros(lab.size, bool) if self.noise_mask is None else np.asarray(self.noise_mask, bool)
        object.__setattr__(self, "noise_mask", noise)
        core = lab[~noise]
        if core.size and (core.min() < 0 or set(np.unique(core)) != set(range(self.num_clusters))):
            raise ParameterError("cluster ids must be contiguous from 0")
        if self.medoids is not None:
            if len(self.medoids) != self.num_clusters:
                raise ParameterError("one medoid per cluster required")
            for c, m in enumerate(self.medoids):
                if lab[m] != c:
                    raise ParameterError(f"medoid {m} is not in its own cluster {c}")

    def members(self, c: int) -> np.ndarray:
        return np.flatnonzero((self.labels == c) & ~self.noise_mask)

    @property
    def sizes(self) -> list[int]:
        return [int(np.sum((self.labels == c) & ~self.noise_mask)) for c in range(self.num_clusters)]

    def to_csv(self, client_ids=None) -> str:
        ids = range(self.labels.size) if client_ids is None else client_ids
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["client_id", "cluster_id", "is_noise"])
        for cid, lab, nz in zip(ids, self.labels, self.noise_mask):
            wr.writerow([int(cid), int(lab), int(bool(nz))])
        return buf.getvalue()

    def with_noise_as_singletons(self) -> "ClusterAssignment":
        """Give every noise point its own cluster (ids continue after the real ones)."""
        lab = self.labels.copy()
        nxt = self.num_clusters
        for i in np.flatnonzero(self.noise_mask):
            lab[i] = nxt
            nxt += 1
        return ClusterAssignment(lab, nxt)


def _matrix(dm) -> np.ndarray:
    d = np.asarray(getattr(dm, "values", dm), dtype=float)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ShapeError(f"distance matrix must be square, got {d.shape}")
    return d


def relabel_by_appearance(labels) -> np.ndarray:
    """Map arbitrary ids to 0..k-1 in order of first appearance (noise -1 kept)."""
    lab = np.asarray(labels)
    out = np.full(lab.size, -1, dtype=int)
    mapping: dict = {}
    for i, v in enumerate(lab):
        if v == -1:
            continue
        out[i] = mapping.setdefault(v, len(mapping))
    return out


# --------------------------------------------------------------------------- k-medoids

def medoid_objective(d: np.ndarray, medoids) -> float:
    return float(d[:, list(medoids)].min(axis=1).sum())


def _assign(d: np.ndarray, medoids: np.ndarray) -> np.ndarray:
    # nearest medoid, lowest medoid index on ties; medoids always own themselves
    order = np.argsort(medoids, kind="stable")
    sorted_med = medoids[order]
    lab = order[np.argmin(d[:, sorted_med], axis=1)]
    lab[medoids] = np.arange(medoids.size)
    return lab


def _kmedoids_once(d: np.ndarray, init: np.ndarray, max_iters: int):
    med = init.copy()
    obj = medoid_objective(d, med)
    trace = [obj]
    for _ in range(max_iters):
        changed = False
        # alternating step: each cluster's member with minimal total in-cluster distance
        lab = _assign(d, med)
        for c in range(med.size):
            mem = np.flatnonzero(lab == c)
            best = mem[np.argmin(d[np.ix_(mem, mem)].sum(axis=1))]
            cand = med.copy()
            cand[c] = best
            if best != med[c] and medoid_objective(d, cand) < obj:
                med, obj, changed = cand, medoid_objective(d, cand), True
        # swap step: best single medoid/non-medoid exchange
        best_obj, best_swap = obj, None
        non = np.setdiff1d(np.arange(d.shape[0]), med)
        for c in range(med.size):
            for h in non:
                cand = med.copy()
                cand[c] = h
                o = medoid_objective(d, cand)
                if o < best_obj - 1e-15 * max(1.0, abs(best_obj)):
                    best_obj, best_swap = o, (c, h)
        if best_swap is not None:
            med[best_swap[0]] = best_swap[1]
            obj, changed = best_obj, True
        if trace[-1] < obj:
            raise AssertionError("k-medoids objective increased")
        trace.append(obj)
        if not changed:
            break
    return med, obj, trace


def k_medoids(dm, k: int, seed: int = 0, max_iters: int = 100, restarts: int = 5) -> ClusterAssignment:
    """PAM-style k-medoids: seeded random medoids, alternating updates plus swap refinement.

    The best of ``restarts`` runs is kept. The objective is the summed
    distance of each client to its medoid and never increases within a run.
    """
    d = _matrix(dm)
    n = d.shape[0]
    if not 1 <= k <= n:
        raise ParameterError(f"k={k} must lie in [1, {n}]")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x3ED0]))
    best = None
    for _ in range(max(1, restarts)):
        init = np.sort(rng.choice(n, k, replace=False))
        med, obj, trace = _kmedoids_once(d, init, max_iters)
        if best is None or obj < best[1]:
            best = (med, obj, trace)
    med, obj, trace = best
    # canonical cluster order: by smallest member index
    lab = _assign(d, med)
    first = [np.flatnonzero(lab == c).min() for c in range(k)]
    order = np.argsort(first)
    remap = np.empty(k, int)
    remap[order] = np.arange(k)
    return ClusterAssignment(remap[lab], k, [int(med[c]) for c in order], objective=obj, history=trace)


# --------------------------------------------------------------------------- agglomerative

LINKAGES = ("single", "complete", "average")


def agglomerative(dm, linkage: str = "average", num_clusters: int | None = None,
                  threshold: float | None = None) -> ClusterAssignment:
    """Bottom-up merging with Lance-Williams distance updates.

    Stop at ``num_clusters`` clusters, or once the closest pair is farther than
    ``threshold``. Ties pick the lexicographically smallest (i, j) slot pair;
    the merged cluster keeps slot i. ``history`` lists (i, j, distance) merges.
    """
    if linkage not in LINKAGES:
        raise ParameterError(f"linkage must be one of {LINKAGES}")
    if (num_clusters is None) == (threshold is None):
        raise ParameterError("give exactly one of num_clusters or threshold")
    if threshold is not None and threshold < 0:
        raise ParameterError("threshold must be >= 0")
    d = _matrix(dm).copy()
    n = d.shape[0]
    if num_clusters is not None and not 1 <= num_clusters <= n:
        raise ParameterError(f"num_clusters must lie in [1, {n}]")
    active = np.ones(n, bool)
    size = np.ones(n)
    slot = np.arange(n)
    history = []
    np.fill_diagonal(d, np.inf)
    while active.sum() > 1:
        if num_clusters is not None and active.sum() <= num_clusters:
            break
        sub = np.where(active[:, None] & active[None, :], d, np.inf)
        sub = np.triu(sub, 1) + np.tril(np.full_like(sub, np.inf))
        flat = int(np.argmin(sub))  # row-major: lowest (i, j) on ties
        i, j = divmod(flat, n)
        dist = sub[i, j]
        if threshold is not None and dist > threshold:
            break
        history.append((i, j, float(dist)))
        ni, nj = size[i], size[j]
        if linkage == "single":
            new = np.minimum(d[i], d[j])
        elif linkage == "complete":
            new = np.maximum(d[i], d[j])
        else:
            new = (ni * d[i] + nj * d[j]) / (ni + nj)
        d[i, :] = new
        d[:, i] = new
        d[i, i] = np.inf
        active[j] = False
        size[i] += nj
        slot[slot == j] = i
    lab = relabel_by_appearance(slot)
    return ClusterAssignment(lab, int(lab.max()) + 1, history=history)


# --------------------------------------------------------------------------- DBSCAN

def default_eps(dm) -> float:
    """Median of the lower quartile of off-diagonal distances."""
    d = _matrix(dm)
    vals = np.sort(d[np.triu_indices(d.shape[0], 1)])
    if vals.size == 0:
        return 1.0
    low = vals[vals <= np.quantile(vals, 0.25)]
    eps = float(np.median(low))
    return eps if eps > 0 else float(vals[vals > 0].min()) if np.any(vals > 0) else 1.0


def dbscan(dm, eps: float, min_pts: int) -> ClusterAssignment:
    """Classic DBSCAN over a distance matrix; scan order is client id order.

    A point is core when at least ``min_pts`` points (itself included) lie
    within ``eps``. Noise points carry label -1 and are flagged in ``noise_mask``.
    """
    if not eps > 0:
        raise ParameterError("eps must be > 0")
    if min_pts < 1:
        raise ParameterError("min_pts must be >= 1")
    d = _matrix(dm)
    n = d.shape[0]
    neigh = [np.flatnonzero(d[i] <= eps) for i in range(n)]
    core = np.array([nb.size >= min_pts for nb in neigh])
    lab = np.full(n, -1)
    c = 0
    for i in range(n):
        if lab[i] != -1 or not core[i]:
            continue
        lab[i] = c
        queue = list(neigh[i])
        while queue:
            q = queue.pop(0)
            if lab[q] == -1:
                lab[q] = c
                if core[q]:
                    queue.extend(p for p in neigh[q] if lab[p] == -1)
        c += 1
    noise = lab == -1
    return ClusterAssignment(lab, c, noise_mask=noise)


# --------------------------------------------------------------------------- ARI

def adjusted_rand_index(pred, truth, noise: str = "singletons") -> float:
    """Adjusted Rand index between a predicted assignment and ground-truth labels.

    ``noise`` decides what happens to DBSCAN noise in ``pred``: "singletons"
    (each its own cluster) or "exclude" (dropped from both sides).
    """
    if isinstance(pred, ClusterAssignment):
        if noise == "exclude":
            keep = ~pred.noise_mask
            p = pred.labels[keep]
            truth = np.asarray(truth)
            if truth.size != pred.labels.size:
                raise ShapeError("pred and truth lengths differ")
            truth = truth[keep]
        elif noise == "singletons":
            p = pred.with_noise_as_singletons().labels
        else:
            raise ParameterError("noise must be 'singletons' or 'exclude'")
    else:
        p = np.asarray(pred)
    t = np.asarray(truth)
    if p.shape != t.shape:
        raise ShapeError(f"pred has {p.size} entries, truth has {t.size}")
    n = p.size
    if n < 2:
        return 1.0
    _, pi = np.unique(p, return_inverse=True)
    _, ti = np.unique(t, return_inverse=True)
    table = np.zeros((pi.max() + 1, ti.max() + 1), dtype=np.int64)
    np.add.at(table, (pi, ti), 1)
    sum_cells = sum(comb(int(v), 2) for v in table.ravel())
    sum_rows = sum(comb(int(v), 2) for v in table.sum(axis=1))
    sum_cols = sum(comb(int(v), 2) for v in table.sum(axis=0))
    total = comb(n, 2)
    expected = sum_rows * sum_cols / total
    max_index = (sum_rows + sum_cols) / 2
    if max_index == expected:
        # both partitions trivial in the same way
        return 1.0 if sum_rows == sum_cols else 0.0
    return float((sum_cells - expected) / (max_index - expected))
