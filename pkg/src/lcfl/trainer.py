"""Local optimization on a single client."""
from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from .data import ClientDataset
from .errors import DivergenceError, ParameterError, SingularityError
from .model import ModelSpec, augment, check_params, gradient, init_params, loss

MAX_CONDITION = 1e12


@dataclass(frozen=True)
class TrainConfig:
    """Local solver settings.

    ``local_epochs``/``batch_size``/``lr_decay`` drive federated rounds;
    ``local_iterations`` (T) with constant step ``warmup_lr`` (falling back to
    ``init_lr``) drives the full-batch warm-up.
    """

    init_lr: float = 0.02
    lr_decay: float = 0.99
    batch_size: int = 20
    local_epochs: int = 1
    local_iterations: int = 10
    seed: int = 0
    warmup_lr: float | None = None

    def __post_init__(self):
        if not self.init_lr > 0:
            raise ParameterError("init_lr must be > 0")
        if not 0 < self.lr_decay <= 1:
            raise ParameterError("lr_decay must lie in (0, 1]")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be positive")
        if self.local_epochs < 0 or self.local_iterations < 0:
            raise ParameterError("epoch and iteration counts must be >= 0")
        if self.warmup_lr is not None and not self.warmup_lr > 0:
            raise ParameterError("warmup_lr must be > 0")

    @property
    def warmup_step(self) -> float:
        return self.init_lr if self.warmup_lr is None else self.warmup_lr

    def lr_at(self, global_iter: int) -> float:
        return self.init_lr * self.lr_decay ** global_iter

    def to_dict(self) -> dict:
        return asdict(self)


def epoch_rng(seed: int, client_id: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(client_id), int(epoch), 0xE90C]))


def local_sgd(spec: ModelSpec, w_init, dataset: ClientDataset, cfg: TrainConfig,
              global_iter: int = 0, client_id: int | None = None) -> np.ndarray:
    """Mini-batch SGD for ``cfg.local_epochs`` passes at step ``init_lr * decay**global_iter``.

    Batch order is reshuffled every epoch from a stream keyed on
    (seed, client, global epoch index), so it does not depend on scheduling.
    """
    if global_iter < 0:
        raise ParameterError("global_iter must be >= 0")
    cid = dataset.client_id if client_id is None else client_id
    w = check_params(spec, w_init).copy()
    x, y = dataset.features, dataset.labels
    n = x.shape[0]
    bs = min(cfg.batch_size, n)
    lr = cfg.lr_at(global_iter)
    step = 0
    for e in range(cfg.local_epochs):
        perm = epoch_rng(cfg.seed, cid, global_iter * cfg.local_epochs + e).permutation(n)
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            w -= lr * gradient(spec, w, (x[idx], y[idx]))
            step += 1
            if not np.all(np.isfinite(w)):
                raise DivergenceError("non-finite parameters", step, cid)
        if not np.isfinite(loss(spec, w, dataset)):
            raise DivergenceError("non-finite loss", step, cid)
    return w


def gradient_descent(spec: ModelSpec, w_init, dataset: ClientDataset, steps: int, lr: float,
                     client_id: int | None = None) -> np.ndarray:
    """``steps`` full-batch gradient steps with a constant step size."""
    cid = dataset.client_id if client_id is None else client_id
    w = check_params(spec, w_init).copy()
    batch = (dataset.features, dataset.labels)
    for t in range(steps):
        w -= lr * gradient(spec, w, batch)
        if not np.all(np.isfinite(w)):
            raise DivergenceError("non-finite parameters during warm-up", t + 1, cid)
    if steps and not np.isfinite(loss(spec, w, dataset)):
        raise DivergenceError("non-finite loss after warm-up", steps, cid)
    return w


def closed_form_linear(dataset: ClientDataset) -> np.ndarray:
    """Exact least-squares minimizer (bias last) from the empirical second moments."""
    xa = augment(dataset.features)
    y = np.asarray(dataset.labels, dtype=float)
    n = xa.shape[0]
    a = xa.T @ xa / n
    b = xa.T @ y / n
    cond = np.linalg.cond(a)
    if not np.isfinite(cond) or cond >= MAX_CONDITION:
        raise SingularityError(f"second-moment matrix is singular or ill-conditioned (cond={cond:.3g})")
    return np.linalg.solve(a, b)


def warmup_all(spec: ModelSpec, datasets: Sequence[ClientDataset], cfg: TrainConfig,
               w0=None, per_client_init: bool = False) -> list[np.ndarray]:
    """Train every client independently for ``cfg.local_iterations`` full-batch steps.

    All clients start from one seeded ``w0`` unless ``per_client_init`` is set,
    in which case each client draws its own init from (seed, client_id).
    Results are ordered by client_id.
    """
    if w0 is None and not per_client_init:
        w0 = init_params(spec, np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0x1A17])))
    out = []
    for d in sorted(datasets, key=lambda d: d.client_id):
        start = w0
        if per_client_init:
            start = init_params(spec, np.random.default_rng(
                np.random.SeedSequence([int(cfg.seed), int(d.client_id), 0x1A17])))
        out.append(gradient_descent(spec, start, d, cfg.local_iterations, cfg.warmup_step))
    return out
