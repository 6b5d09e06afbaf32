"""Client-similarity metrics and the server-side distance matrix.

The loss-gap metric is assembled through a split-and-sum exchange: client i
only ever evaluates parameters on its own data and reports the scalar
``|L_i(w_j) - L_i(w_i)|``; the server adds the two halves of each pair.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .data import ClientDataset
from .errors import EvaluationError, IncompleteProtocolError, ShapeError
from .model import ModelSpec, check_params, gradient, loss

log = logging.getLogger(__name__)

METRIC_KINDS = ("loss-gap", "param-norm", "grad-cosine", "loss-exchange")


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    values: np.ndarray
    metric_kind: str = "loss-gap"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ShapeError(f"distance matrix must be square, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise EvaluationError("distance matrix has non-finite entries")
        if np.any(v < 0):
            raise EvaluationError("distance matrix has negative entries")
        if np.any(np.diag(v) != 0):
            raise EvaluationError("distance matrix diagonal must be zero")
        if not np.array_equal(v, v.T):
            raise EvaluationError("distance matrix is not symmetric")
        object.__setattr__(self, "values", v)

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def to_csv(self, client_ids: Sequence[int] | None = None) -> str:
        ids = list(range(self.size)) if client_ids is None else list(client_ids)
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["client_id", *ids])
        for cid, row in zip(ids, self.values):
            wr.writerow([cid, *(repr(float(v)) for v in row)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, metric_kind: str = "loss-gap") -> "DistanceMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        return cls(np.array([[float(v) for v in r[1:]] for r in rows[1:]]), metric_kind)


def _symmetric(upper_plus_lower: np.ndarray) -> np.ndarray:
    # one value per unordered pair, mirrored so symmetry is exact
    iu = np.triu_indices(upper_plus_lower.shape[0], 1)
    out = np.zeros_like(upper_plus_lower)
    out[iu] = upper_plus_lower[iu]
    return out + out.T


# --------------------------------------------------------------------------- loss gap

@dataclass(frozen=True)
class HalfDistance:
    from_client: int
    about_client: int
    value: float


def half_distance(spec: ModelSpec, dataset_i: ClientDataset, w_i, w_j,
                  about_client: int | None = None) -> HalfDistance:
    """Client i's share ``|L_i(w_j) - L_i(w_i)|``, computed on its own data only."""
    li_own = loss(spec, w_i, dataset_i)
    li_other = loss(spec, w_j, dataset_i)
    if not (np.isfinite(li_own) and np.isfinite(li_other)):
        raise EvaluationError(f"non-finite loss on client {dataset_i.client_id}")
    about = -1 if about_client is None else int(about_client)
    return HalfDistance(int(dataset_i.client_id), about, abs(li_other - li_own))


def assemble_loss_gap(halves: Iterable[HalfDistance], num_clients: int) -> DistanceMatrix:
    """Server reduction ``d(i,j) = d(i,j)_i + d(j,i)_j`` over all ordered pairs."""
    h = np.full((num_clients, num_clients), np.nan)
    for hd in halves:
        h[hd.from_client, hd.about_client] = hd.value
    np.fill_diagonal(h, 0.0)
    missing = [(int(i), int(j)) for i, j in zip(*np.nonzero(np.isnan(h)))]
    if missing:
        raise IncompleteProtocolError(missing)
    return DistanceMatrix(_symmetric(h + h.T), "loss-gap")


def cross_loss_matrix(spec: ModelSpec, datasets: Sequence[ClientDataset], params: Sequence) -> np.ndarray:
    """``L[i, j] = L_i(w_j)``: every model evaluated on every client's data."""
    return np.array([[loss(spec, w, d) for w in params] for d in datasets])


def loss_gap_matrix(spec: ModelSpec, datasets: Sequence[ClientDataset], params: Sequence) -> DistanceMatrix:
    """Run the full exchange: each client reports its halves, the server sums them.

    ``datasets[i]`` and ``params[i]`` must belong to client i (ids 0..M-1 by position).
    """
    m = len(datasets)
    if len(params) != m:
        raise ShapeError(f"{len(params)} parameter vectors for {m} clients")
    halves = []
    for i, d in enumerate(datasets):
        own = loss(spec, params[i], d)
        for j in range(m):
            if j == i:
                continue
            other = loss(spec, params[j], d)
            if not (np.isfinite(own) and np.isfinite(other)):
                raise EvaluationError(f"non-finite loss on client {i}")
            halves.append(HalfDistance(i, j, abs(other - own)))
    return assemble_loss_gap(halves, m)


def direct_loss_gap(cross: np.ndarray) -> np.ndarray:
    """Two-sided formula straight from a cross-loss matrix (reference path)."""
    own = np.diag(cross)
    return np.abs(cross - own[:, None]) + np.abs(cross.T - own[None, :])


def loss_exchange_matrix(spec: ModelSpec, datasets: Sequence[ClientDataset], params: Sequence) -> DistanceMatrix:
    """``|L_i(w_i) - L_j(w_i)| + |L_i(w_j) - L_j(w_j)|``.

    Debug-only alternative: it compares losses across clients and so needs an
    extra round trip of loss values. Kept for A/B comparison with the loss gap.
    """
    c = cross_loss_matrix(spec, datasets, params)
    own = np.diag(c)
    # c[i, j] = L_i(w_j): |L_i(w_i) - L_j(w_i)| + |L_i(w_j) - L_j(w_j)|
    d = np.abs(own[:, None] - c.T) + np.abs(c - own[None, :])
    return DistanceMatrix(_symmetric(d), "loss-exchange")


# --------------------------------------------------------------------------- parameter norm

def param_norm_matrix(params: Sequence) -> DistanceMatrix:
    """Euclidean distance between parameter vectors."""
    arrs = [np.asarray(p, dtype=float) for p in params]
    shapes = {a.shape for a in arrs}
    if len(shapes) != 1 or arrs[0].ndim != 1:
        raise ShapeError(f"parameter vectors must share one 1-D shape, got {sorted(shapes)}")
    w = np.stack(arrs)
    diff = w[:, None, :] - w[None, :, :]
    return DistanceMatrix(_symmetric(np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))), "param-norm")


# --------------------------------------------------------------------------- gradient cosine

def grad_cosine_matrix(spec: ModelSpec, datasets: Sequence[ClientDataset], reference_w) -> DistanceMatrix:
    """``(1 - cos(grad_i, grad_j)) / 2`` with all gradients taken at one shared point.

    A client whose gradient vanishes gets cosine 0 (distance 1/2) with everyone.
    """
    ref = check_params(spec, reference_w)
    g = np.stack([gradient(spec, ref, (d.features, d.labels)) for d in datasets])
    norms = np.linalg.norm(g, axis=1)
    zero = norms == 0
    if zero.any():
        log.warning("zero gradient at reference point for clients %s", np.flatnonzero(zero).tolist())
    safe = np.where(zero, 1.0, norms)
    u = g / safe[:, None]
    cos = np.clip(u @ u.T, -1.0, 1.0)
    cos[zero, :] = 0.0
    cos[:, zero] = 0.0
    dist = (1.0 - cos) / 2.0
    return DistanceMatrix(_symmetric(dist), "grad-cosine")


def triangle_violations(dm, rtol: float = 1e-12) -> tuple[int, int]:
    """(violating, total) ordered triples with d(i,k) > d(i,j) + d(j,k).

    Measured, not enforced: the loss gap is not guaranteed to be a metric.
    """
    d = np.asarray(getattr(dm, "values", dm), dtype=float)
    n = d.shape[0]
    if n < 3:
        return 0, 0
    # lhs[i, j, k] = d(i,k); rhs[i, j, k] = d(i,j) + d(j,k)
    lhs = np.broadcast_to(d[:, None, :], (n, n, n))
    rhs = d[:, :, None] + d[None, :, :]
    idx = np.arange(n)
    distinct = (idx[:, None, None] != idx[None, :, None]) & (idx[None, :, None] != idx[None, None, :]) \
        & (idx[:, None, None] != idx[None, None, :])
    bad = (lhs > rhs * (1 + rtol)) & distinct
    return int(bad.sum()), int(distinct.sum())


def mean_params(params: Sequence) -> np.ndarray:
    return np.mean(np.stack([np.asarray(p, dtype=float) for p in params]), axis=0)


def distance_matrix(kind: str, spec: ModelSpec, datasets: Sequence[ClientDataset], params: Sequence) -> DistanceMatrix:
    """Dispatch on metric kind; grad-cosine uses the mean of ``params`` as reference."""
    if kind == "loss-gap":
        return loss_gap_matrix(spec, datasets, params)
    if kind == "param-norm":
        return param_norm_matrix(params)
    if kind == "grad-cosine":
        return grad_cosine_matrix(spec, datasets, mean_params(params))
    if kind == "loss-exchange":
        return loss_exchange_matrix(spec, datasets, params)
    raise ValueError(f"unknown metric kind {kind!r}")
