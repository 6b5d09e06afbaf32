"""Numerical checks around the loss-gap concentration bound.

Everything here works with linear least squares, where expected losses and
population optimizers have closed forms. Losses are rescaled into [0, 1]
through :class:`BoundedProblem` so that Hoeffding-type terms apply.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import stats

from .data import ClientDataset
from .errors import ContractError, ParameterError, ShapeError
from .model import ModelSpec, augment

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------- populations

@dataclass(frozen=True, eq=False)
class PopulationSpec:
    """Gaussian regression population described by its first two moments.

    ``noise_var`` is the variance of y left over after the best linear
    predictor, so ``Var(y) = sigma_xy' sigma_xx^-1 sigma_xy + noise_var``.
    """

    mu_x: np.ndarray
    sigma_xx: np.ndarray
    sigma_xy: np.ndarray
    mu_y: float = 0.0
    noise_var: float = 0.0

    def __post_init__(self):
        sxx = np.atleast_2d(np.asarray(self.sigma_xx, dtype=float))
        d = sxx.shape[0]
        mu = np.zeros(d) if self.mu_x is None else np.asarray(self.mu_x, dtype=float)
        sxy = np.asarray(self.sigma_xy, dtype=float)
        if sxx.shape != (d, d) or mu.shape != (d,) or sxy.shape != (d,):
            raise ShapeError("population moments have inconsistent dimensions")
        if not np.allclose(sxx, sxx.T, rtol=0, atol=1e-12):
            raise ContractError("sigma_xx must be symmetric")
        if np.linalg.eigvalsh(sxx).min() <= 0:
            raise ContractError("sigma_xx must be positive definite")
        if self.noise_var < 0:
            raise ParameterError("noise_var must be >= 0")
        object.__setattr__(self, "sigma_xx", sxx)
        object.__setattr__(self, "mu_x", mu)
        object.__setattr__(self, "sigma_xy", sxy)

    @property
    def dim(self) -> int:
        return self.sigma_xx.shape[0]

    @property
    def beta(self) -> np.ndarray:
        return np.linalg.solve(self.sigma_xx, self.sigma_xy)

    @property
    def second_moment_y(self) -> float:
        return float(self.sigma_xy @ self.beta + self.noise_var + self.mu_y ** 2)

    def moments(self, bias: bool):
        """(E[x x'], E[x y]) for raw or bias-augmented features."""
        exx = self.sigma_xx + np.outer(self.mu_x, self.mu_x)
        exy = self.sigma_xy + self.mu_y * self.mu_x
        if not bias:
            return exx, exy
        d = self.dim
        a = np.empty((d + 1, d + 1))
        a[:d, :d] = exx
        a[:d, d] = a[d, :d] = self.mu_x
        a[d, d] = 1.0
        return a, np.append(exy, self.mu_y)

    def is_centered(self, tol: float = 1e-12) -> bool:
        return bool(np.all(np.abs(self.mu_x) <= tol) and abs(self.mu_y) <= tol)

    def sample(self, m: int, rng: np.random.Generator, domain_bound: float | None = None,
               label_bound: float | None = None) -> tuple[ClientDataset, int]:
        """Draw ``m`` samples, redrawing any row outside the bounded domain.

        Returns the dataset and the number of rejected draws.
        """
        chol = np.linalg.cholesky(self.sigma_xx)
        beta = self.beta
        noise_sd = math.sqrt(self.noise_var)
        xs, ys, rejected = [], [], 0
        need = m
        while need > 0:
            x = self.mu_x + rng.standard_normal((need, self.dim)) @ chol.T
            y = self.mu_y + (x - self.mu_x) @ beta + noise_sd * rng.standard_normal(need)
            ok = np.ones(need, bool)
            if domain_bound is not None:
                ok &= np.linalg.norm(x, axis=1) <= domain_bound
            if label_bound is not None:
                ok &= np.abs(y) <= label_bound
            rejected += int(need - ok.sum())
            xs.append(x[ok])
            ys.append(y[ok])
            need -= int(ok.sum())
        return ClientDataset(np.vstack(xs), np.concatenate(ys)), rejected


def population_optimizer(pop: PopulationSpec, bias: bool = True) -> np.ndarray:
    """Minimizer of the expected squared loss: E[xx']^-1 E[xy]."""
    a, b = pop.moments(bias)
    return np.linalg.solve(a, b)


def expected_linear_loss(pop: PopulationSpec, w) -> float:
    """Exact ``E (w'x - y)^2``; ``w`` may carry a trailing bias entry."""
    w = np.asarray(w, dtype=float)
    if w.shape == (pop.dim,):
        a, b = pop.moments(False)
    elif w.shape == (pop.dim + 1,):
        a, b = pop.moments(True)
    else:
        raise ShapeError(f"w has shape {w.shape}; population has dimension {pop.dim}")
    return float(w @ a @ w - 2.0 * w @ b + pop.second_moment_y)


class Sandwich(NamedTuple):
    lower: float
    gap: float
    upper: float


def loss_gap_sandwich(pop: PopulationSpec, pop_hat: PopulationSpec) -> Sandwich:
    """Excess loss on ``pop`` of the other population's optimizer, with its eigenvalue bounds.

    Requires centered populations with a shared feature covariance; then
    ``||d||^2 / lmax <= gap <= ||d||^2 / lmin`` for ``d`` the sigma_xy difference.
    """
    if not (pop.is_centered() and pop_hat.is_centered()):
        raise ContractError("both populations must be centered (mu_x = 0, mu_y = 0)")
    if pop.sigma_xx.shape != pop_hat.sigma_xx.shape or not np.array_equal(pop.sigma_xx, pop_hat.sigma_xx):
        raise ContractError("populations must share the same sigma_xx")
    w_star = population_optimizer(pop, bias=False)
    w_hat = population_optimizer(pop_hat, bias=False)
    gap = expected_linear_loss(pop, w_hat) - expected_linear_loss(pop, w_star)
    eig = np.linalg.eigvalsh(pop.sigma_xx)
    diff2 = float(np.sum((pop_hat.sigma_xy - pop.sigma_xy) ** 2))
    return Sandwich(float(diff2 / eig[-1]), float(gap), float(diff2 / eig[0]))


# --------------------------------------------------------------------------- bounded problems

@dataclass(frozen=True)
class BoundedProblem:
    """Linear least squares on a bounded domain, rescaled to losses in [0, 1].

    Parameters live in the ball ``||w|| <= spec.weight_bound`` (bias
    included), features in ``||x|| <= domain_bound`` and labels in
    ``|y| <= label_bound``. Then ``(w'[x,1] - y)^2 <= loss_scale``.
    """

    spec: ModelSpec
    domain_bound: float
    label_bound: float

    def __post_init__(self):
        if self.spec.kind != "linear-regression":
            raise ContractError("bounded problems are defined for linear regression")
        if self.spec.weight_bound is None:
            raise ContractError("a bounded problem needs spec.weight_bound")
        if self.domain_bound <= 0 or self.label_bound < 0:
            raise ParameterError("domain and label bounds must be positive")

    @property
    def weight_bound(self) -> float:
        return float(self.spec.weight_bound)

    @property
    def feature_norm_bound(self) -> float:
        return math.sqrt(self.domain_bound ** 2 + 1.0)

    @property
    def loss_scale(self) -> float:
        return (self.weight_bound * self.feature_norm_bound + self.label_bound) ** 2

    def rescaled_losses(self, w, x, y) -> np.ndarray:
        r = augment(np.asarray(x, dtype=float)) @ np.asarray(w, dtype=float) - np.asarray(y, dtype=float)
        return r ** 2 / self.loss_scale

    def empirical_loss(self, w, dataset: ClientDataset) -> float:
        return float(np.mean(self.rescaled_losses(w, dataset.features, dataset.labels)))

    def expected_loss(self, pop: PopulationSpec, w) -> float:
        return expected_linear_loss(pop, w) / self.loss_scale

    def project(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        n = np.linalg.norm(w)
        return w if n <= self.weight_bound else w * (self.weight_bound / n)

    def constrained_minimizer(self, dataset: ClientDataset) -> np.ndarray:
        """Empirical least squares restricted to the weight ball (ridge bisection when active)."""
        xa = augment(dataset.features)
        a = xa.T @ xa / len(dataset)
        b = xa.T @ np.asarray(dataset.labels, float) / len(dataset)
        return _ball_lstsq(a, b, self.weight_bound)

    def population_minimizer(self, pop: PopulationSpec) -> np.ndarray:
        a, b = pop.moments(True)
        return _ball_lstsq(a, b, self.weight_bound)

    def check_range(self, num_draws: int = 100_000, seed: int = 0) -> tuple[float, float]:
        """Spot-check that rescaled losses stay in [0, 1] on random in-domain points."""
        rng = np.random.default_rng(seed)
        d = self.spec.input_dim + 1
        w = _uniform_ball(rng, num_draws, d, self.weight_bound)
        x = _uniform_ball(rng, num_draws, d - 1, self.domain_bound)
        # push half the draws onto the boundary where the bound is tight
        x[::2] *= self.domain_bound / np.maximum(np.linalg.norm(x[::2], axis=1, keepdims=True), 1e-300)
        y = rng.uniform(-self.label_bound, self.label_bound, num_draws)
        vals = (np.sum(augment(x) * w, axis=1) - y) ** 2 / self.loss_scale
        return float(vals.min()), float(vals.max())


def _uniform_ball(rng, n: int, d: int, radius: float) -> np.ndarray:
    v = rng.standard_normal((n, d))
    v /= np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-300)
    return v * radius * rng.random((n, 1)) ** (1.0 / d)


def _ball_lstsq(a: np.ndarray, b: np.ndarray, radius: float) -> np.ndarray:
    w = np.linalg.lstsq(a, b, rcond=None)[0]
    if np.linalg.norm(w) <= radius:
        return w
    eye = np.eye(a.shape[0])
    lo, hi = 0.0, max(1.0, np.linalg.norm(b) / max(radius, 1e-300))
    while np.linalg.norm(np.linalg.solve(a + hi * eye, b)) > radius:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.linalg.norm(np.linalg.solve(a + mid * eye, b)) > radius:
            lo = mid
        else:
            hi = mid
    return np.linalg.solve(a + hi * eye, b)


# --------------------------------------------------------------------------- Hoeffding / C_delta

def hoeffding_epsilon(m: int, delta: float) -> float:
    """Deviation ``sqrt(log(2/delta) / (2m))`` for means of [0, 1] variables."""
    if m < 1:
        raise ParameterError("sample count m must be >= 1")
    if not 0 < delta < 1:
        raise ParameterError(f"delta must lie in (0, 1), got {delta}")
    return math.sqrt(math.log(2.0 / delta) / (2.0 * m))


def _count(x) -> int:
    return len(x) if hasattr(x, "__len__") else int(x)


def c_delta(dataset_i, dataset_j, rad_i: float, rad_j: float, delta: float) -> float:
    """Concentration radius for the loss gap: two Hoeffding terms per client plus both complexities.

    ``dataset_i``/``dataset_j`` may be datasets or plain sample counts.
    """
    if rad_i < 0 or rad_j < 0:
        raise ParameterError("Rademacher terms must be >= 0")
    mi, mj = _count(dataset_i), _count(dataset_j)
    return 2 * hoeffding_epsilon(mi, delta) + 2 * hoeffding_epsilon(mj, delta) + rad_i + rad_j


# --------------------------------------------------------------------------- Rademacher

def rademacher_estimate(problem: BoundedProblem, dataset: ClientDataset, num_sigma: int = 64,
                        starts: int = 16, steps: int = 200, seed: int = 0,
                        function_class: str = "loss") -> tuple[float, float]:
    """Monte-Carlo empirical Rademacher complexity over the weight ball.

    For each sign vector the supremum is approximated by projected gradient
    ascent from ``starts`` random points, so the result is a lower estimate
    of the true quantity. ``function_class`` is "loss" (rescaled squared
    loss, the class the bound needs) or "linear" (``x -> w'[x,1]``).
    Returns (mean, standard error) over the sign draws.
    """
    if num_sigma < 2:
        raise ParameterError("num_sigma must be >= 2")
    if function_class not in ("loss", "linear"):
        raise ParameterError("function_class must be 'loss' or 'linear'")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5A0E]))
    xa = augment(dataset.features)
    y = np.asarray(dataset.labels, float)
    m, d = xa.shape
    B = problem.weight_bound
    scale = problem.loss_scale
    vals = np.empty(num_sigma)
    for s in range(num_sigma):
        sig = rng.choice([-1.0, 1.0], m)
        if function_class == "linear":
            # objective w . g is linear; ascent still used so both classes share one code path
            g = xa.T @ sig / m
            a, b, c = np.zeros((d, d)), -0.5 * g, 0.0
        else:
            a = (xa.T * sig) @ xa / (m * scale)
            b = (xa.T * sig) @ y / (m * scale)
            c = float(sig @ y ** 2 / (m * scale))
        vals[s] = _maximize_quadratic(a, b, c, B, rng, starts, steps)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(num_sigma))


def _maximize_quadratic(a, b, c, radius, rng, starts, steps, extra=()) -> float:
    """max of ``w'Aw - 2w'b + c`` over ``||w|| <= radius`` by multi-start projected ascent."""
    d = a.shape[0]
    if radius == 0:
        return float(c)
    w = _uniform_ball(rng, starts, d, radius)
    if extra:
        w = np.vstack([w, np.atleast_2d(np.asarray(extra, float))])
    lip = 2.0 * max(np.abs(np.linalg.eigvalsh(a)).max(), 1e-12)
    lr = 1.0 / lip
    for _ in range(steps):
        grad = 2.0 * w @ a - 2.0 * b
        w = w + lr * grad
        n = np.linalg.norm(w, axis=1, keepdims=True)
        w = np.where(n > radius, w * (radius / np.maximum(n, 1e-300)), w)
        if not np.any(np.isfinite(w)):
            break
    vals = np.einsum("ij,jk,ik->i", w, a, w) - 2.0 * w @ b + c
    return float(vals.max())


def average_rademacher(problem: BoundedProblem, pop: PopulationSpec, m: int, num_sets: int = 4,
                       num_sigma: int = 64, starts: int = 16, steps: int = 200, seed: int = 0) -> tuple[float, float]:
    """Expectation over sample sets of size m of the empirical estimate."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xA7E0]))
    ests = []
    for k in range(num_sets):
        ds, _ = pop.sample(m, rng, problem.domain_bound, problem.label_bound)
        ests.append(rademacher_estimate(problem, ds, num_sigma, starts, steps, seed=seed * 1000 + k)[0])
    ests = np.array(ests)
    se = float(ests.std(ddof=1) / math.sqrt(num_sets)) if num_sets > 1 else 0.0
    return float(ests.mean()), se


# --------------------------------------------------------------------------- discrepancy

def expected_loss_gap(problem: BoundedProblem, pop_i: PopulationSpec, pop_j: PopulationSpec,
                      w_i=None, w_j=None) -> float:
    """``|L_Di(w_j) - L_Di(w_i)| + |L_Dj(w_i) - L_Dj(w_j)|`` in rescaled units.

    Defaults to the two population minimizers within the weight ball.
    """
    w_i = problem.population_minimizer(pop_i) if w_i is None else w_i
    w_j = problem.population_minimizer(pop_j) if w_j is None else w_j
    li = problem.expected_loss
    return abs(li(pop_i, w_j) - li(pop_i, w_i)) + abs(li(pop_j, w_i) - li(pop_j, w_j))


def label_discrepancy_estimate(pop_i: PopulationSpec, pop_j: PopulationSpec, problem: BoundedProblem,
                               starts: int = 16, steps: int = 500, seed: int = 0) -> float:
    """``sup_w |L_Di(w) - L_Dj(w)|`` over the weight ball, in rescaled units.

    The difference of expected losses is a quadratic in w, maximized in both
    signs by multi-start projected ascent (the two population minimizers are
    added as starting points).
    """
    ai, bi = pop_i.moments(True)
    aj, bj = pop_j.moments(True)
    s = problem.loss_scale
    a, b, c = (ai - aj) / s, (bi - bj) / s, (pop_i.second_moment_y - pop_j.second_moment_y) / s
    extra = [problem.population_minimizer(pop_i), problem.population_minimizer(pop_j)]
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xD15C]))
    up = _maximize_quadratic(a, b, c, problem.weight_bound, rng, starts, steps, extra)
    down = _maximize_quadratic(-a, -b, -c, problem.weight_bound, rng, starts, steps, extra)
    return max(up, down, 0.0)


def kl_divergence(p, q) -> float:
    """``sum p log(p/q)`` for discrete histograms (normalized here); inf when q misses mass of p."""
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    if p.shape != q.shape:
        raise ShapeError("histograms must have the same shape")
    if np.any(p < 0) or np.any(q < 0) or p.sum() <= 0 or q.sum() <= 0:
        raise ParameterError("histograms must be nonnegative with positive mass")
    p, q = p / p.sum(), q / q.sum()
    mask = p > 0
    if np.any(q[mask] == 0):
        return float("inf")
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


# --------------------------------------------------------------------------- frequency check

@dataclass
class TheoremReport:
    config: dict
    d_hat: float
    c_delta: float
    rad_i: float
    rad_j: float
    deviations: list[float]
    within: int
    trials: int
    threshold: float
    ci_low: float
    ci_high: float
    p_value: float
    rejection_rate: float
    confidence: float = 0.99
    extra: dict = field(default_factory=dict)

    @property
    def frequency(self) -> float:
        return self.within / self.trials

    @property
    def passed(self) -> bool:
        """One-sided binomial test: the frequency significantly exceeds the threshold."""
        return self.p_value < 1 - self.confidence or self.ci_low >= self.threshold

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "d_hat": self.d_hat,
            "c_delta": self.c_delta,
            "rademacher": {"i": self.rad_i, "j": self.rad_j},
            "trials": self.trials,
            "within_bound": self.within,
            "frequency": self.frequency,
            "threshold": self.threshold,
            "binomial": {"confidence": self.confidence, "one_sided_lower": self.ci_low,
                         "upper": self.ci_high, "p_value_vs_threshold": self.p_value},
            "passed": self.passed,
            "rejection_rate": self.rejection_rate,
            "per_trial_abs_deviation": self.deviations,
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def verify_theorem1(pop_i: PopulationSpec, pop_j: PopulationSpec, problem: BoundedProblem,
                    m_i: int, m_j: int, delta: float, trials: int, seed: int = 0,
                    rad: tuple[float, float] | None = None, rad_sets: int = 4,
                    rad_sigma: int = 64, confidence: float = 0.99) -> TheoremReport:
    """How often ``|d - d_hat| <= C_delta`` holds across independent sample draws.

    ``d_hat`` uses exact expected losses at the population minimizers; each
    trial draws fresh samples, takes exact empirical minimizers and evaluates
    the empirical loss gap ``d``. The observed frequency is tested against
    ``(1 - delta)^4``.
    """
    if not 0 < delta < 1:
        raise ParameterError(f"delta must lie in (0, 1), got {delta}")
    if trials < 1:
        raise ParameterError("trials must be >= 1")
    if rad is None:
        rad_i = average_rademacher(problem, pop_i, m_i, rad_sets, rad_sigma, seed=seed)[0]
        rad_j = average_rademacher(problem, pop_j, m_j, rad_sets, rad_sigma, seed=seed + 1)[0]
        rad = (max(rad_i, 0.0), max(rad_j, 0.0))
    c = c_delta(m_i, m_j, rad[0], rad[1], delta)
    wi_pop = problem.population_minimizer(pop_i)
    wj_pop = problem.population_minimizer(pop_j)
    d_hat = expected_loss_gap(problem, pop_i, pop_j, wi_pop, wj_pop)

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x7E01]))
    devs, devs_same_w, rejected, drawn = [], [], 0, 0
    for _ in range(trials):
        di, ri = pop_i.sample(m_i, rng, problem.domain_bound, problem.label_bound)
        dj, rj = pop_j.sample(m_j, rng, problem.domain_bound, problem.label_bound)
        rejected += ri + rj
        drawn += m_i + m_j + ri + rj
        wi = problem.constrained_minimizer(di)
        wj = problem.constrained_minimizer(dj)
        el = problem.empirical_loss
        d = abs(el(wj, di) - el(wi, di)) + abs(el(wi, dj) - el(wj, dj))
        devs.append(abs(d - d_hat))
        devs_same_w.append(abs(d - expected_loss_gap(problem, pop_i, pop_j, wi, wj)))
    devs = np.array(devs)
    within = int(np.sum(devs <= c))
    threshold = (1 - delta) ** 4
    ci_low = float(stats.beta.ppf(1 - confidence, within, trials - within + 1)) if within > 0 else 0.0
    ci_high = float(stats.beta.ppf(confidence, within + 1, trials - within)) if within < trials else 1.0
    p_value = float(stats.binomtest(within, trials, threshold, alternative="greater").pvalue)
    rate = rejected / drawn if drawn else 0.0
    if rate > 0:
        log.info("domain truncation rejected %.3g of draws", rate)
    config = {"m_i": m_i, "m_j": m_j, "delta": delta, "trials": trials, "seed": seed,
              "weight_bound": problem.weight_bound, "domain_bound": problem.domain_bound,
              "label_bound": problem.label_bound, "loss_scale": problem.loss_scale,
              "pop_i": _pop_dict(pop_i), "pop_j": _pop_dict(pop_j)}
    extra = {"same_minimizer_variant": {
        "description": "d_hat re-evaluated at each trial's empirical minimizers",
        "frequency": float(np.mean(np.array(devs_same_w) <= c))}}
    return TheoremReport(config, d_hat, c, rad[0], rad[1], devs.tolist(), within, trials, threshold,
                         ci_low, ci_high, p_value, rate, confidence, extra)


def _pop_dict(pop: PopulationSpec) -> dict:
    return {"mu_x": pop.mu_x.tolist(), "sigma_xx": pop.sigma_xx.tolist(), "sigma_xy": pop.sigma_xy.tolist(),
            "mu_y": pop.mu_y, "noise_var": pop.noise_var}


def linear_family_pops(sigma_xy_set, noise_std: float, sigma_xx=None) -> list[PopulationSpec]:
    """Centered populations matching :func:`lcfl.data.gen_linear_family`."""
    sxy = np.atleast_2d(np.asarray(sigma_xy_set, float))
    d = sxy.shape[1]
    sxx = np.eye(d) if sigma_xx is None else np.asarray(sigma_xx, float)
    return [PopulationSpec(np.zeros(d), sxx, row, 0.0, noise_std ** 2) for row in sxy]


def random_centered_pair(rng: np.random.Generator, dim: int) -> tuple[PopulationSpec, PopulationSpec]:
    """Two centered populations with one shared random SPD covariance."""
    q = rng.standard_normal((dim, dim))
    sxx = q @ q.T + 0.1 * np.eye(dim)
    sxx = (sxx + sxx.T) / 2
    return (PopulationSpec(np.zeros(dim), sxx, rng.standard_normal(dim), 0.0, rng.random()),
            PopulationSpec(np.zeros(dim), sxx.copy(), rng.standard_normal(dim), 0.0, rng.random()))
