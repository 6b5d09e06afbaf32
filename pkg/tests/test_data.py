import itertools
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lcfl.data import (ClientDataset, FederationSpec, SamplePool, build_federation, gen_label_shard,
                       gen_linear_family, gen_rotated, load_idx, normalize, rotate_features, split_all,
                       subset_rank, synthetic_class_pool, synthetic_grid_task, train_test_split, true_clusters,
                       write_idx)
from lcfl.errors import (DegenerateFamilyError, FormatError, InsufficientPoolError, ParameterError, ShapeError,
                         UnsupportedRotationError)


# --------------------------------------------------------------------------- IDX fixture

def idx_bytes(magic, dims, payload):
    return struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims) + bytes(payload)


@pytest.fixture
def idx_pair(tmp_path):
    # 3 images of 2x2, values chosen by hand
    pix = [0, 255, 51, 102, 1, 2, 3, 4, 10, 20, 30, 40]
    img = tmp_path / "img.idx"
    lab = tmp_path / "lab.idx"
    img.write_bytes(idx_bytes(0x803, (3, 2, 2), pix))
    lab.write_bytes(idx_bytes(0x801, (3,), [7, 0, 9]))
    return img, lab, pix


def test_idx_roundtrip_known_bytes(idx_pair):
    img, lab, pix = idx_pair
    pool = load_idx(img, lab)
    assert pool.image_shape == (2, 2)
    np.testing.assert_array_equal(pool.labels, [7, 0, 9])
    np.testing.assert_allclose(pool.features, np.array(pix, float).reshape(3, 4) / 255.0)


def test_write_idx_matches_handmade(tmp_path, idx_pair):
    img, lab, pix = idx_pair
    write_idx(tmp_path / "w.idx", np.array(pix, np.uint8).reshape(3, 2, 2))
    assert (tmp_path / "w.idx").read_bytes() == img.read_bytes()


@pytest.mark.parametrize("mutate, offset", [
    (lambda b: b[:2], 0),                        # shorter than the magic
    (lambda b: b"\x00\x00\x08\x02" + b[4:], 0),  # wrong magic
    (lambda b: b[:10], 10),                      # truncated header
    (lambda b: b[:-1], 27),                      # truncated data
    (lambda b: b + b"\x00", 28),                 # trailing byte
])
def test_idx_format_errors_report_offset(tmp_path, idx_pair, mutate, offset):
    img, lab, _ = idx_pair
    bad = tmp_path / "bad.idx"
    bad.write_bytes(mutate(img.read_bytes()))
    with pytest.raises(FormatError) as ei:
        load_idx(bad, lab)
    assert ei.value.offset == offset


def test_idx_count_mismatch(tmp_path, idx_pair):
    img, _, _ = idx_pair
    lab = tmp_path / "lab2.idx"
    lab.write_bytes(idx_bytes(0x801, (2,), [1, 2]))
    with pytest.raises(FormatError):
        load_idx(img, lab)


# --------------------------------------------------------------------------- linear family

def test_linear_family_cluster_statistics():
    sxy = [[2.0, 0.0], [-2.0, 0.0]]
    clients = gen_linear_family(2, 4, 20000, 2, sxy, 0.1, seed=3)
    assert [c.true_cluster for c in clients] == [0, 1, 0, 1]
    for c in clients:
        emp = c.features.T @ c.labels / len(c)
        np.testing.assert_allclose(emp, sxy[c.true_cluster], atol=0.06)


def test_linear_family_rejects_duplicates_and_shapes():
    with pytest.raises(DegenerateFamilyError):
        gen_linear_family(2, 4, 5, 2, [[1, 0], [1, 0]], 0.1, 0)
    with pytest.raises(ShapeError):
        gen_linear_family(2, 4, 5, 3, [[1, 0], [0, 1]], 0.1, 0)


def test_linear_family_deterministic():
    a = gen_linear_family(2, 3, 7, 2, [[1, 0], [0, 1]], 0.1, 5)
    b = gen_linear_family(2, 3, 7, 2, [[1, 0], [0, 1]], 0.1, 5)
    for x, y in zip(a, b):
        assert np.array_equal(x.features, y.features) and np.array_equal(x.labels, y.labels)


# --------------------------------------------------------------------------- rotations

def test_grid_rotation_matches_manual_rot90():
    img = np.arange(9.0).reshape(1, 9)
    out = rotate_features(img, 90, (3, 3))
    manual = np.array([[2, 5, 8], [1, 4, 7], [0, 3, 6]], float).reshape(1, 9)
    np.testing.assert_array_equal(out, manual)
    np.testing.assert_array_equal(rotate_features(img, 360, (3, 3)), img)
    with pytest.raises(UnsupportedRotationError):
        rotate_features(img, 45, (3, 3))


def test_point_rotation_preserves_norm(rng):
    x = rng.standard_normal((5, 2))
    r = rotate_features(x, 33.0)
    np.testing.assert_allclose(np.linalg.norm(r, axis=1), np.linalg.norm(x, axis=1))
    np.testing.assert_allclose(rotate_features(np.array([[1.0, 0.0]]), 90.0), [[0.0, 1.0]], atol=1e-15)


def test_gen_rotated_disjoint_slices_and_labels():
    pool = synthetic_grid_task(400, 3, 3, seed=0)
    clients = gen_rotated(4, 8, 20, pool, seed=1)
    assert [c.true_cluster for c in clients] == [0, 1, 2, 3, 0, 1, 2, 3]
    # same rotation: disjoint samples (features are continuous, so rows identify samples)
    for c in range(4):
        a, b = [d for d in clients if d.true_cluster == c]
        rows_a = {r.tobytes() for r in a.features}
        assert not rows_a & {r.tobytes() for r in b.features}
    # undoing the rotation recovers pool rows with their labels
    c1 = clients[1]
    back = rotate_features(c1.features, 270, (3, 3))
    lookup = {r.tobytes(): y for r, y in zip(pool.features, pool.labels)}
    assert all(lookup[r.tobytes()] == y for r, y in zip(back, c1.labels))


def test_gen_rotated_pool_too_small():
    with pytest.raises(InsufficientPoolError):
        gen_rotated(2, 4, 50, synthetic_grid_task(60, 3, 3, 0), 0)


# --------------------------------------------------------------------------- label shards

def test_subset_rank_is_a_bijection():
    ranks = sorted(subset_rank(s) for s in itertools.combinations(range(6), 3))
    assert ranks == list(range(math.comb(6, 3)))
    assert subset_rank([0, 1, 2]) == 0
    assert subset_rank([2, 1, 0]) == 0


def test_label_shard_classes_and_sizes():
    pool = synthetic_class_pool(200, 10, 4, seed=0)
    clients = gen_label_shard(10, 3, 12, 31, pool, seed=2)
    for c in clients:
        classes = np.unique(c.labels)
        assert classes.size == 3
        assert c.true_cluster == subset_rank(classes)
        assert len(c) == 31
        assert sorted(np.bincount(c.labels)[classes]) == [10, 10, 11]


def test_label_shard_errors():
    pool = synthetic_class_pool(2, 4, 2, seed=0)
    with pytest.raises(InsufficientPoolError):
        gen_label_shard(4, 2, 3, 20, pool, 0)
    with pytest.raises(ParameterError):
        gen_label_shard(4, 5, 3, 20, pool, 0)


# --------------------------------------------------------------------------- preprocessing

def test_normalize_pooled_statistics(rng):
    ds = [ClientDataset(rng.normal(3, 2, (10, 2)), np.zeros(10), i) for i in range(3)]
    for d in ds:
        d.features[:, 1] = 0.0  # constant column
    out = normalize(ds)
    stacked = np.vstack([d.features for d in out])
    np.testing.assert_allclose(stacked.mean(axis=0), 0, atol=1e-12)
    assert stacked[:, 0].std() == pytest.approx(1.0)
    assert np.all(stacked[:, 1] == 0)


def test_split_is_seeded_and_partitions(rng):
    d = ClientDataset(np.arange(20.0)[:, None], np.arange(20.0), 4)
    tr, te = train_test_split(d, 0.2, seed=9)
    assert len(te) == 4 and len(tr) == 16
    assert sorted(np.concatenate([tr.labels, te.labels])) == list(range(20))
    tr2, te2 = train_test_split(d, 0.2, seed=9)
    assert np.array_equal(te.labels, te2.labels)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 60), frac=st.floats(0.05, 0.9))
def test_split_keeps_both_sides_nonempty(n, frac):
    d = ClientDataset(np.zeros((n, 1)), np.zeros(n), 0)
    tr, te = train_test_split(d, frac)
    assert len(tr) >= 1 and len(te) >= 1 and len(tr) + len(te) == n


def test_client_dataset_validation():
    with pytest.raises(ShapeError):
        ClientDataset(np.zeros((3, 2)), np.zeros(2))


def test_build_federation_dispatch(tmp_path, idx_pair):
    lin = build_federation(FederationSpec(4, "linear-family", {"k": 2, "m_per_client": 5, "input_dim": 2,
                                                                "sigma_xy": [[1, 0], [0, 1]]}))
    assert len(lin) == 4 and list(true_clusters(lin)) == [0, 1, 0, 1]
    rot = build_federation(FederationSpec(4, "rotated-classification",
                                          {"k": 2, "m_per_client": 5, "base": "synthetic-grid", "side": 3,
                                           "num_classes": 3, "pool_size": 100}))
    assert rot[0].features.shape == (5, 9)
    img, lab, _ = idx_pair
    idx = build_federation(FederationSpec(2, "idx-import", {"k": 2, "m_per_client": 1,
                                                            "images_path": str(img), "labels_path": str(lab)}))
    assert idx[1].features.shape == (1, 4)
    with pytest.raises(ParameterError):
        FederationSpec(3, "linear-family", {"k": 4})
