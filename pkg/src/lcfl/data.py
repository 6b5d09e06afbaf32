"""Client datasets with controlled heterogeneity, plus IDX ingestion."""
from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import (
    DegenerateFamilyError,
    EmptyInputError,
    FormatError,
    InsufficientPoolError,
    ParameterError,
    ShapeError,
    UnsupportedRotationError,
)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class ClientDataset:
    features: np.ndarray
    labels: np.ndarray
    client_id: int = 0
    true_cluster: int | None = None

    def __post_init__(self):
        x = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels)
        if x.ndim != 2:
            raise ShapeError(f"features must be 2-D, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise ShapeError(f"labels shape {y.shape} does not match {x.shape[0]} rows")
        if x.shape[0] < 1:
            raise EmptyInputError(f"client {self.client_id} has no samples")
        if not np.all(np.isfinite(x)):
            raise ParameterError(f"client {self.client_id} has non-finite features")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def num_samples(self) -> int:
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True, eq=False)
class SamplePool:
    """Unpartitioned samples a federation is carved from."""

    features: np.ndarray
    labels: np.ndarray
    image_shape: tuple[int, int] | None = None

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class FederationSpec:
    num_clients: int
    generator: str
    params: dict[str, Any] = field(default_factory=dict)
    seed: int = 0

    GENERATORS = ("linear-family", "rotated-classification", "label-shard", "idx-import")

    def __post_init__(self):
        if self.num_clients < 2:
            raise ParameterError("a federation needs at least 2 clients")
        if self.generator not in self.GENERATORS:
            raise ParameterError(f"unknown generator {self.generator!r}")
        k = self.params.get("k")
        if k is not None and k > self.num_clients:
            raise ParameterError(f"cluster count k={k} exceeds num_clients={self.num_clients}")


def _client_rng(seed: int, client_id: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(client_id), int(stream)]))


def round_robin(num_clients: int, k: int) -> np.ndarray:
    return np.arange(num_clients) % k


# --------------------------------------------------------------------------- linear family

def gen_linear_family(k: int, num_clients: int, m_per_client: int, input_dim: int,
                      sigma_xy_set, noise_std: float, seed: int,
                      sigma_xx=None) -> list[ClientDataset]:
    """Regression clients whose clusters differ only in the feature/label covariance.

    Features are zero-mean Gaussian with shared covariance ``sigma_xx`` (identity
    by default). A client of cluster c gets ``y = x . beta_c + noise`` with
    ``beta_c = sigma_xx^-1 sigma_xy[c]``.
    """
    sxy = np.atleast_2d(np.asarray(sigma_xy_set, dtype=float))
    if sxy.shape != (k, input_dim):
        raise ShapeError(f"sigma_xy_set must have shape ({k}, {input_dim}), got {sxy.shape}")
    if noise_std < 0:
        raise ParameterError("noise_std must be >= 0")
    for a, b in itertools.combinations(range(k), 2):
        if np.array_equal(sxy[a], sxy[b]):
            raise DegenerateFamilyError(f"clusters {a} and {b} share the same sigma_xy vector")
    sxx = np.eye(input_dim) if sigma_xx is None else np.asarray(sigma_xx, dtype=float)
    chol = np.linalg.cholesky(sxx)
    betas = np.linalg.solve(sxx, sxy.T).T
    clusters = round_robin(num_clients, k)
    out = []
    for cid in range(num_clients):
        rng = _client_rng(seed, cid)
        c = int(clusters[cid])
        x = rng.standard_normal((m_per_client, input_dim)) @ chol.T
        y = x @ betas[c] + noise_std * rng.standard_normal(m_per_client)
        out.append(ClientDataset(x, y, cid, c))
    return out


# --------------------------------------------------------------------------- rotations

def rotate_features(features, degrees: float, image_shape: tuple[int, int] | None = None) -> np.ndarray:
    """Rotate each row: grid images by multiples of 90 degrees, 2-D points by any angle."""
    x = np.asarray(features, dtype=float)
    if image_shape is not None:
        quarter, rem = divmod(degrees, 90)
        if rem != 0:
            raise UnsupportedRotationError(f"grid rotation must be a multiple of 90 degrees, got {degrees}")
        h, w = image_shape
        if x.shape[1] != h * w:
            raise ShapeError(f"rows of length {x.shape[1]} are not {h}x{w} images")
        imgs = x.reshape(-1, h, w)
        return np.rot90(imgs, k=int(quarter) % 4, axes=(1, 2)).reshape(x.shape[0], -1).copy()
    if x.shape[1] != 2:
        raise UnsupportedRotationError("non-grid rotation needs 2-D features")
    t = np.deg2rad(degrees)
    rot = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    return x @ rot.T


def rotation_angles(k: int, grid: bool) -> list[float]:
    if grid and k not in (2, 4):
        raise UnsupportedRotationError(f"grid rotation supports k in {{2, 4}}, got {k}")
    if k < 1:
        raise ParameterError("need at least one rotation")
    return [360.0 * r / k for r in range(k)]


def gen_rotated(k: int, num_clients: int, m_per_client: int, base_task: SamplePool,
                seed: int) -> list[ClientDataset]:
    """Clients sharing one base task, each seeing it under its cluster's rotation.

    Clients of the same rotation get disjoint random slices of the pool.
    """
    grid = base_task.image_shape is not None
    angles = rotation_angles(k, grid)
    clusters = round_robin(num_clients, k)
    members = [np.flatnonzero(clusters == c) for c in range(k)]
    need = max(len(m) for m in members) * m_per_client
    if need > len(base_task):
        raise InsufficientPoolError(f"pool of {len(base_task)} samples cannot give {need} disjoint samples per rotation")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5107]))
    out: list[ClientDataset | None] = [None] * num_clients
    for c in range(k):
        order = rng.permutation(len(base_task))
        for slot, cid in enumerate(members[c]):
            idx = np.sort(order[slot * m_per_client:(slot + 1) * m_per_client])
            x = rotate_features(base_task.features[idx], angles[c], base_task.image_shape)
            out[cid] = ClientDataset(x, base_task.labels[idx].copy(), int(cid), c)
    return out


def synthetic_grid_task(num_samples: int, side: int, num_classes: int, seed: int,
                        label_noise: float = 0.0) -> SamplePool:
    """Gaussian ``side x side`` images labeled by a fixed random linear teacher.

    The input distribution is rotation invariant, so rotating the grid changes
    only the input-to-label map. That is the property a rotated federation needs.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x7EAC]))
    d = side * side
    teacher = rng.standard_normal((d, num_classes))
    x = rng.standard_normal((num_samples, d))
    y = np.argmax(x @ teacher, axis=1)
    if label_noise > 0:
        flip = rng.random(num_samples) < label_noise
        y[flip] = rng.integers(0, num_classes, flip.sum())
    return SamplePool(x, y.astype(int), (side, side))


# --------------------------------------------------------------------------- label shards

def subset_rank(subset: Sequence[int]) -> int:
    """Colexicographic rank of a subset among all subsets of the same size (combinadic)."""
    s = sorted(int(c) for c in subset)
    return sum(math.comb(c, i + 1) for i, c in enumerate(s))


def gen_label_shard(num_classes_total: int, classes_per_client: int, num_clients: int,
                    m_per_client: int, base_pool: SamplePool, seed: int) -> list[ClientDataset]:
    """Each client only sees a random subset of ``classes_per_client`` classes.

    ``true_cluster`` is a canonical id of the client's sorted class subset.
    """
    if not 1 <= classes_per_client <= num_classes_total:
        raise ParameterError("classes_per_client must lie in [1, num_classes_total]")
    by_class = {c: np.flatnonzero(base_pool.labels == c) for c in range(num_classes_total)}
    out = []
    for cid in range(num_clients):
        rng = _client_rng(seed, cid, 1)
        classes = np.sort(rng.choice(num_classes_total, classes_per_client, replace=False))
        counts = np.full(classes_per_client, m_per_client // classes_per_client)
        counts[: m_per_client % classes_per_client] += 1
        picks = []
        for c, n in zip(classes, counts):
            avail = by_class[int(c)]
            if avail.size == 0:
                raise InsufficientPoolError(f"pool has no samples of class {c}")
            if avail.size < n:
                raise InsufficientPoolError(f"class {c} has {avail.size} samples, client {cid} needs {n}")
            picks.append(rng.choice(avail, n, replace=False))
        idx = np.sort(np.concatenate(picks))
        out.append(ClientDataset(base_pool.features[idx].copy(), base_pool.labels[idx].copy(),
                                 cid, subset_rank(classes)))
    return out


def synthetic_class_pool(n_per_class: int, num_classes: int, input_dim: int, seed: int,
                         separation: float = 2.0) -> SamplePool:
    """Gaussian blobs, one per class, with unit within-class variance."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xB10B]))
    centers = separation * rng.standard_normal((num_classes, input_dim))
    y = np.repeat(np.arange(num_classes), n_per_class)
    x = centers[y] + rng.standard_normal((y.size, input_dim))
    return SamplePool(x, y)


# --------------------------------------------------------------------------- IDX format

def _parse_idx(buf: bytes, expected_magic: int, path=None) -> np.ndarray:
    if len(buf) < 4:
        raise FormatError("file shorter than the 4-byte magic number", 0, path)
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise FormatError(f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0, path)
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(buf) < header_end:
        raise FormatError(f"truncated header: need {header_end} bytes, have {len(buf)}", len(buf), path)
    dims = struct.unpack(f">{ndim}I", buf[4:header_end])
    size = int(np.prod(dims, dtype=np.int64))
    if len(buf) < header_end + size:
        raise FormatError(f"truncated data: expected {size} bytes after header", len(buf), path)
    if len(buf) > header_end + size:
        raise FormatError("trailing bytes after data", header_end + size, path)
    return np.frombuffer(buf, dtype=np.uint8, count=size, offset=header_end).reshape(dims)


def load_idx(images_path, labels_path) -> SamplePool:
    """Read an IDX image/label file pair (unsigned-byte data) into a pool scaled to [0, 1]."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    imgs = _parse_idx(images_path.read_bytes(), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(labels_path.read_bytes(), IDX_LABELS_MAGIC, labels_path)
    if imgs.shape[0] != labels.shape[0]:
        # offset of the count field in the labels header
        raise FormatError(f"{imgs.shape[0]} images but {labels.shape[0]} labels", 4, labels_path)
    h, w = imgs.shape[1:]
    x = imgs.reshape(imgs.shape[0], h * w).astype(float) / 255.0
    return SamplePool(x, labels.astype(int), (int(h), int(w)))


def write_idx(path, array) -> None:
    """Write an unsigned-byte IDX file (1-D labels or 3-D images)."""
    a = np.asarray(array)
    if a.dtype != np.uint8:
        if a.min() < 0 or a.max() > 255:
            raise ParameterError("IDX unsigned-byte data must lie in [0, 255]")
        a = a.astype(np.uint8)
    if a.ndim not in (1, 3):
        raise ShapeError("write_idx handles label vectors and image stacks only")
    magic = 0x00000800 | a.ndim
    header = struct.pack(f">I{a.ndim}I", magic, *a.shape)
    Path(path).write_bytes(header + a.tobytes(order="C"))


# --------------------------------------------------------------------------- preprocessing

def normalize(datasets: Sequence[ClientDataset]) -> list[ClientDataset]:
    """Center and scale features with statistics pooled over all clients.

    Constant features end up as zero columns.
    """
    if not datasets:
        raise EmptyInputError("normalize needs at least one dataset")
    stacked = np.vstack([d.features for d in datasets])
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    scale = np.where(std > 0, std, 1.0)
    return [replace(d, features=(d.features - mean) / scale) for d in datasets]


def train_test_split(dataset: ClientDataset, test_fraction: float = 0.2,
                     seed: int = 0) -> tuple[ClientDataset, ClientDataset]:
    """Seeded per-client split; the train part always keeps at least one sample."""
    n = len(dataset)
    if n < 2:
        return dataset, dataset
    n_test = min(max(1, int(round(test_fraction * n))), n - 1)
    perm = _client_rng(seed, dataset.client_id, 2).permutation(n)
    te, tr = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    return (replace(dataset, features=dataset.features[tr], labels=dataset.labels[tr]),
            replace(dataset, features=dataset.features[te], labels=dataset.labels[te]))


def split_all(datasets: Sequence[ClientDataset], test_fraction: float = 0.2, seed: int = 0):
    pairs = [train_test_split(d, test_fraction, seed) for d in datasets]
    return [p[0] for p in pairs], [p[1] for p in pairs]


def true_clusters(datasets: Sequence[ClientDataset]) -> np.ndarray:
    return np.array([-1 if d.true_cluster is None else d.true_cluster for d in datasets])


def build_federation(fed: FederationSpec) -> list[ClientDataset]:
    """Materialize a federation from its declarative spec."""
    p = dict(fed.params)
    M, seed = fed.num_clients, fed.seed
    if fed.generator == "linear-family":
        return gen_linear_family(p["k"], M, p["m_per_client"], p["input_dim"], p["sigma_xy"],
                                 p.get("noise_std", 0.1), seed, p.get("sigma_xx"))
    if fed.generator == "rotated-classification":
        pool = _base_pool(p, seed)
        return gen_rotated(p["k"], M, p["m_per_client"], pool, seed)
    if fed.generator == "label-shard":
        pool = _base_pool(p, seed)
        return gen_label_shard(p["num_classes"], p["classes_per_client"], M, p["m_per_client"], pool, seed)
    # idx-import: rotated federation over an IDX pool
    pool = load_idx(p["images_path"], p["labels_path"])
    return gen_rotated(p.get("k", 4), M, p["m_per_client"], pool, seed)


def _base_pool(p: dict, seed: int) -> SamplePool:
    base = p.get("base", "synthetic")
    if base == "idx":
        return load_idx(p["images_path"], p["labels_path"])
    if base == "synthetic-grid":
        return synthetic_grid_task(p["pool_size"], p["side"], p["num_classes"], p.get("pool_seed", seed),
                                   p.get("label_noise", 0.0))
    if base == "synthetic-blobs":
        return synthetic_class_pool(p["pool_per_class"], p["num_classes"], p["input_dim"],
                                    p.get("pool_seed", seed), p.get("separation", 2.0))
    raise ParameterError(f"unknown base pool {base!r}")
