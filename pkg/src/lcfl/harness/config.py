"""Experiment configuration: YAML documents, shipped profiles, validation.

A document either names one ``algorithm`` or lists several under
``algorithms``; the latter expands into one :class:`ExperimentConfig` per
algorithm, each carrying only the sections that algorithm needs.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from ..data import FederationSpec
from ..errors import ConfigError, LcflError
from ..fed import ClusteringConfig, FedConfig
from ..model import ModelSpec
from ..trainer import TrainConfig

ALGORITHMS = ("lcfl", "ifca", "fedavg", "local")
METRICS = ("loss-gap", "param-norm", "grad-cosine")
DEBUG_METRICS = ("loss-exchange",)
CLUSTERERS = ("k-medoids", "agglomerative", "dbscan")
PROFILES = ("rotmnist-mini", "femnist-mini", "linear-k2")


@dataclass
class DataOptions:
    normalize: bool = True
    test_fraction: float = 0.2
    fixed_seed: int | None = None

    def data_seed(self, run_seed: int) -> int:
        return run_seed if self.fixed_seed is None else self.fixed_seed


@dataclass
class ExperimentConfig:
    name: str
    federation: FederationSpec
    data: DataOptions
    model: ModelSpec
    algorithm: str
    fed: FedConfig
    seeds: list[int]
    output_dir: str
    clustering: ClusteringConfig | None = None
    ifca_k: int | None = None
    debug_metrics: bool = False
    raw: dict = field(default_factory=dict, repr=False)

    def resolved(self) -> dict:
        """Every value the run will use, defaults included."""
        fed = self.fed
        out = {
            "name": self.name,
            "algorithm": self.algorithm,
            "federation": {"num_clients": self.federation.num_clients, "generator": self.federation.generator,
                           "params": self.federation.params},
            "data": {"normalize": self.data.normalize, "test_fraction": self.data.test_fraction,
                     "fixed_seed": self.data.fixed_seed},
            "model": self.model.to_dict(),
            "fed": {"participation_rate": fed.participation_rate, "global_iterations": fed.global_iterations,
                    "weighted_accuracy": fed.weighted_accuracy, "train": _train_dict(fed.train)},
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
        }
        if self.clustering is not None:
            out["lcfl"] = self.clustering.to_dict()
        if self.ifca_k is not None:
            out["ifca"] = {"k": self.ifca_k}
        return out

    def comparable_key(self) -> tuple:
        r = self.resolved()
        return (repr(r["federation"]), repr(r["data"]), repr(r["model"]), tuple(self.seeds))


def _train_dict(t: TrainConfig) -> dict:
    d = t.to_dict()
    d.pop("seed")
    return d


# --------------------------------------------------------------------------- loading

def load_yaml(path) -> dict:
    try:
        doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError("<document>", f"YAML parse error: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("<document>", "top level must be a mapping")
    return doc


def profile_path(name: str) -> Path:
    if name not in PROFILES:
        raise ConfigError("profile", f"unknown profile {name!r}; shipped: {', '.join(PROFILES)}")
    return Path(str(resources.files("lcfl.harness") / "profiles" / f"{name}.yaml"))


def load_profile(name: str) -> dict:
    return load_yaml(profile_path(name))


def _get(doc: dict, key: str, path: str, kind=None, required=True, default=None):
    if key not in doc or doc[key] is None:
        if required:
            raise ConfigError(f"{path}{key}", "missing required key")
        return default
    val = doc[key]
    if kind is float and isinstance(val, int) and not isinstance(val, bool):
        return float(val)
    if kind is not None and (not isinstance(val, kind) or (kind is int and isinstance(val, bool))):
        raise ConfigError(f"{path}{key}", f"expected {kind.__name__}, got {type(val).__name__}")
    return val


def _wrap(path: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ConfigError:
        raise
    except (LcflError, TypeError, ValueError, KeyError) as exc:
        raise ConfigError(path, str(exc)) from exc


_ALLOWED_TOP = {"name", "federation", "data", "model", "algorithm", "algorithms", "lcfl", "ifca", "fed",
                "seeds", "output_dir", "debug"}


def parse_document(doc: dict, output_dir: str | None = None,
                   seeds: list[int] | None = None) -> list[ExperimentConfig]:
    """Validate a config document and expand it into one config per algorithm."""
    unknown = set(doc) - _ALLOWED_TOP
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown top-level key")
    if ("algorithm" in doc) == ("algorithms" in doc):
        raise ConfigError("algorithm", "give exactly one of 'algorithm' or 'algorithms'")
    algs = [doc["algorithm"]] if "algorithm" in doc else list(doc["algorithms"])
    if not algs:
        raise ConfigError("algorithms", "empty list")
    for i, a in enumerate(algs):
        if a not in ALGORITHMS:
            key = "algorithm" if "algorithm" in doc else f"algorithms[{i}]"
            raise ConfigError(key, f"unknown algorithm {a!r}; expected one of {ALGORITHMS}")
    if "algorithm" in doc:
        # single-algorithm documents carry exactly the sections they need
        if algs[0] != "lcfl" and "lcfl" in doc:
            raise ConfigError("lcfl", f"section only valid for algorithm lcfl, not {algs[0]}")
        if algs[0] != "ifca" and "ifca" in doc:
            raise ConfigError("ifca", f"section only valid for algorithm ifca, not {algs[0]}")
    return [_parse_one(doc, a, output_dir, seeds, len(algs) > 1) for a in algs]


def _parse_one(doc: dict, algorithm: str, output_dir, seeds, multi: bool) -> ExperimentConfig:
    name = str(doc.get("name", "experiment"))
    fd = _get(doc, "federation", "", dict)
    fed_spec = _wrap("federation", FederationSpec, _get(fd, "num_clients", "federation.", int),
                     _get(fd, "generator", "federation.", str), dict(_get(fd, "params", "federation.", dict)),
                     int(fd.get("seed") or 0))
    dd = doc.get("data") or {}
    tf = float(dd.get("test_fraction", 0.2))
    if not 0 <= tf < 1:
        raise ConfigError("data.test_fraction", "must lie in [0, 1)")
    data = DataOptions(bool(dd.get("normalize", True)), tf, dd.get("fixed_seed"))

    md = _get(doc, "model", "", dict)
    model = _wrap("model", ModelSpec, _get(md, "kind", "model.", str), _get(md, "input_dim", "model.", int),
                  md.get("num_classes"), tuple(md.get("hidden_dims") or ()), md.get("weight_bound"))

    fdoc = _get(doc, "fed", "", dict)
    tdoc = dict(fdoc.get("train") or {})
    for k in tdoc:
        if k not in ("init_lr", "lr_decay", "batch_size", "local_epochs", "local_iterations", "warmup_lr"):
            raise ConfigError(f"fed.train.{k}", "unknown key")
    train = _wrap("fed.train", TrainConfig, **tdoc)
    fcfg = _wrap("fed", FedConfig, float(fdoc.get("participation_rate", 1.0)),
                 int(_get(fdoc, "global_iterations", "fed.", int)), train, 0,
                 bool(fdoc.get("weighted_accuracy", False)))

    seeds_v = seeds if seeds is not None else _get(doc, "seeds", "", list)
    if not seeds_v:
        raise ConfigError("seeds", "at least one seed required")
    for i, s in enumerate(seeds_v):
        if not isinstance(s, int) or isinstance(s, bool) or s < 0:
            raise ConfigError(f"seeds[{i}]", "seeds must be unsigned integers")
    out = output_dir if output_dir is not None else str(doc.get("output_dir") or f"runs/{name}")
    if multi:
        out = str(Path(out) / algorithm)

    debug = bool((doc.get("debug") or {}).get("allow_loss_exchange_metric", False))
    clus = None
    ifca_k = None
    if algorithm == "lcfl":
        ld = _get(doc, "lcfl", "", dict)
        metric = ld.get("metric", "loss-gap")
        if metric not in METRICS and not (debug and metric in DEBUG_METRICS):
            raise ConfigError("lcfl.metric", f"unknown metric {metric!r}; expected one of {METRICS}")
        cd = dict(ld.get("clusterer") or {"method": "k-medoids", "k": 10})
        method = cd.pop("method", "k-medoids")
        if method not in CLUSTERERS:
            raise ConfigError("lcfl.clusterer.method", f"expected one of {CLUSTERERS}")
        if method == "k-medoids" and "k" not in cd:
            raise ConfigError("lcfl.clusterer.k", "k-medoids needs k")
        if method == "agglomerative" and ("k" in cd) == ("threshold" in cd):
            raise ConfigError("lcfl.clusterer", "agglomerative needs exactly one of k or threshold")
        allowed = {"k", "linkage", "threshold", "eps", "min_pts", "restarts", "max_iters", "per_client_init"}
        for key in cd:
            if key not in allowed:
                raise ConfigError(f"lcfl.clusterer.{key}", "unknown key")
        if cd.get("threshold") is not None and cd["threshold"] < 0:
            raise ConfigError("lcfl.clusterer.threshold", "must be >= 0")
        if cd.get("eps") is not None and not cd["eps"] > 0:
            raise ConfigError("lcfl.clusterer.eps", "must be > 0")
        if cd.get("k") is not None and not 1 <= cd["k"]:
            raise ConfigError("lcfl.clusterer.k", "must be >= 1")
        if method != "k-medoids" and "k" not in cd:
            cd["k"] = None
        clus = ClusteringConfig(method=method, metric=metric, **cd)
    elif algorithm == "ifca":
        idoc = _get(doc, "ifca", "", dict)
        ifca_k = _get(idoc, "k", "ifca.", int)
        if ifca_k < 1:
            raise ConfigError("ifca.k", "must be >= 1")
    return ExperimentConfig(name, fed_spec, data, model, algorithm, fcfg, list(seeds_v), out, clus, ifca_k,
                            debug, copy.deepcopy(doc))


def load_config(path=None, profile: str | None = None, output_dir: str | None = None,
                seeds: list[int] | None = None) -> list[ExperimentConfig]:
    if (path is None) == (profile is None):
        raise ConfigError("config", "give exactly one of a config path or a profile name")
    doc = load_profile(profile) if profile is not None else load_yaml(path)
    return parse_document(doc, output_dir, seeds)


# --------------------------------------------------------------------------- verifier config

DEFAULT_VERIFY: dict[str, Any] = {
    "theorem1": {"sigma_xy": [[1.0, 0.0], [-1.0, 0.0]], "noise_std": 0.5, "weight_bound": 2.0,
                 "domain_bound": 5.0, "label_bound": 6.0, "m_i": 200, "m_j": 200, "delta": 0.1,
                 "trials": 1000, "seed": 0, "rademacher_sets": 4, "rademacher_sigma": 64},
    "sandwich": {"instances": 100, "dim": 4, "seed": 0, "rel_tol": 1e-8},
    "discrepancy": {"pairs": 10, "seed": 0, "tol": 1e-6},
    "output_dir": "runs/verify",
}


def parse_verify(doc: dict | None, output_dir: str | None = None) -> dict:
    """Merge a verifier document over the defaults and validate it."""
    cfg = copy.deepcopy(DEFAULT_VERIFY)
    for sec, val in (doc or {}).items():
        if sec not in cfg:
            raise ConfigError(sec, "unknown verifier section")
        if sec == "output_dir":
            cfg[sec] = str(val)
            continue
        if not isinstance(val, dict):
            raise ConfigError(sec, "expected a mapping")
        for k, v in val.items():
            if k not in cfg[sec]:
                raise ConfigError(f"{sec}.{k}", "unknown key")
            cfg[sec][k] = v
    t = cfg["theorem1"]
    if not isinstance(t["delta"], (int, float)) or not 0 < t["delta"] < 1:
        raise ConfigError("theorem1.delta", f"must lie in (0, 1), got {t['delta']}")
    for k in ("m_i", "m_j", "trials"):
        if not isinstance(t[k], int) or t[k] < 1:
            raise ConfigError(f"theorem1.{k}", "must be a positive integer")
    if not t["weight_bound"] > 0:
        raise ConfigError("theorem1.weight_bound", "must be > 0")
    if cfg["sandwich"]["instances"] < 1:
        raise ConfigError("sandwich.instances", "must be >= 1")
    if output_dir is not None:
        cfg["output_dir"] = output_dir
    return cfg
