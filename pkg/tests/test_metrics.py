import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.metrics.pairwise import cosine_similarity, euclidean_distances

from lcfl.errors import EvaluationError, IncompleteProtocolError, ShapeError
from lcfl.metrics import (DistanceMatrix, HalfDistance, assemble_loss_gap, distance_matrix, grad_cosine_matrix,
                          half_distance, loss_exchange_matrix, loss_gap_matrix, mean_params, param_norm_matrix)
from lcfl.model import ModelSpec, gradient, init_params, loss, shift_classes

from conftest import KIND_SPECS, random_dataset


def federation(kind, m, rng, n=15):
    spec = KIND_SPECS[kind](3)
    ds = [random_dataset(spec, n, rng, client_id=i) for i in range(m)]
    ws = [init_params(spec, rng, scale=0.7) for _ in range(m)]
    return spec, ds, ws


def eq2(spec, ds, ws, i, j):
    li = lambda w: loss(spec, w, ds[i])
    lj = lambda w: loss(spec, w, ds[j])
    return abs(li(ws[i]) - li(ws[j])) + abs(lj(ws[j]) - lj(ws[i]))


@pytest.mark.parametrize("kind", list(KIND_SPECS))
def test_protocol_equals_direct_formula(kind, rng):
    spec, ds, ws = federation(kind, 6, rng)
    dm = loss_gap_matrix(spec, ds, ws)
    for i in range(6):
        for j in range(6):
            assert dm.values[i, j] == pytest.approx(eq2(spec, ds, ws, i, j), abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), m=st.integers(2, 8), kind=st.sampled_from(list(KIND_SPECS)))
def test_loss_gap_axioms(seed, m, kind):
    spec, ds, ws = federation(kind, m, np.random.default_rng(seed), n=6)
    v = loss_gap_matrix(spec, ds, ws).values
    assert np.array_equal(v, v.T)
    assert np.all(v >= 0) and np.all(np.diag(v) == 0)


def test_identical_clients_have_zero_distance(rng):
    spec, ds, ws = federation("softmax", 3, rng)
    ws[1] = ws[0].copy()
    assert loss_gap_matrix(spec, ds, ws).values[0, 1] == 0.0


def test_half_distance_and_assembly(rng):
    spec, ds, ws = federation("linear-regression", 3, rng)
    halves = [half_distance(spec, ds[i], ws[i], ws[j], j) for i in range(3) for j in range(3) if i != j]
    h01 = abs(loss(spec, ws[1], ds[0]) - loss(spec, ws[0], ds[0]))
    assert halves[0] == HalfDistance(0, 1, h01)
    np.testing.assert_array_equal(assemble_loss_gap(halves, 3).values, loss_gap_matrix(spec, ds, ws).values)
    with pytest.raises(IncompleteProtocolError) as ei:
        assemble_loss_gap(halves[1:], 3)
    assert ei.value.missing == [(0, 1)]


def test_half_distance_non_finite(rng):
    spec = ModelSpec("linear-regression", 1)
    ds = random_dataset(spec, 3, rng)
    with pytest.raises(EvaluationError):
        half_distance(spec, ds, np.zeros(2), np.array([np.inf, 0.0]))


def test_param_norm_matches_sklearn(rng):
    ws = [rng.standard_normal(7) for _ in range(5)]
    v = param_norm_matrix(ws).values
    ref = euclidean_distances(np.stack(ws))
    np.testing.assert_allclose(v, ref, atol=1e-12)
    with pytest.raises(ShapeError):
        param_norm_matrix([np.zeros(2), np.zeros(3)])


def test_grad_cosine_matches_sklearn(rng):
    spec, ds, ws = federation("softmax", 5, rng)
    ref_w = mean_params(ws)
    g = np.stack([gradient(spec, ref_w, d) for d in ds])
    expected = (1 - cosine_similarity(g)) / 2
    np.fill_diagonal(expected, 0)
    got = distance_matrix("grad-cosine", spec, ds, ws).values
    np.testing.assert_allclose(got, expected, atol=1e-12)
    assert np.all(got <= 1.0)


def test_grad_cosine_zero_gradient(caplog):
    spec = ModelSpec("linear-regression", 1)
    x = np.array([[1.0], [2.0]])
    from lcfl.data import ClientDataset
    ds = [ClientDataset(x, np.zeros(2), 0), ClientDataset(x, np.ones(2), 1), ClientDataset(x, -np.ones(2), 2)]
    with caplog.at_level(logging.WARNING):
        v = grad_cosine_matrix(spec, ds, np.zeros(2)).values
    assert "zero gradient" in caplog.text
    assert v[0, 1] == v[0, 2] == 0.5
    assert v[1, 2] == pytest.approx(1.0)


def test_loss_exchange_formula(rng):
    spec, ds, ws = federation("mlp", 4, rng)
    v = loss_exchange_matrix(spec, ds, ws).values
    L = lambda i, w: loss(spec, w, ds[i])
    for i in range(4):
        for j in range(i + 1, 4):
            ref = abs(L(i, ws[i]) - L(j, ws[i])) + abs(L(i, ws[j]) - L(j, ws[j]))
            assert v[i, j] == pytest.approx(ref, abs=1e-12)


def test_softmax_shift_blind_spot(rng):
    spec = ModelSpec("softmax", 3, 4)
    w = init_params(spec, rng)
    phi = rng.standard_normal(4) * 5
    ds = [random_dataset(spec, 20, rng, client_id=i) for i in range(2)]
    ws = [w, shift_classes(spec, w, phi)]
    assert loss_gap_matrix(spec, ds, ws).values[0, 1] < 1e-9
    assert param_norm_matrix(ws).values[0, 1] == pytest.approx(2 * np.linalg.norm(phi), abs=1e-9)


def test_distance_matrix_validation():
    with pytest.raises(EvaluationError):
        DistanceMatrix(np.array([[0, 1], [2, 0]]))
    with pytest.raises(EvaluationError):
        DistanceMatrix(np.array([[1.0]]))
    with pytest.raises(EvaluationError):
        DistanceMatrix(np.array([[0, -1], [-1, 0]]))
    with pytest.raises(ShapeError):
        DistanceMatrix(np.zeros((2, 3)))


def test_csv_roundtrip_exact(rng):
    a = rng.random((4, 4))
    a = np.triu(a, 1) + np.triu(a, 1).T
    dm = DistanceMatrix(a)
    text = dm.to_csv([10, 11, 12, 13])
    assert text.startswith("client_id,10,11,12,13\n")
    np.testing.assert_array_equal(DistanceMatrix.from_csv(text).values, a)


def test_triangle_violations_counts():
    from lcfl.metrics import triangle_violations
    line = np.array([0.0, 1.0, 3.0])
    assert triangle_violations(np.abs(line[:, None] - line[None])) == (0, 6)
    d = np.array([[0, 1, 5], [1, 0, 1], [5, 1, 0]], float)
    assert triangle_violations(d) == (2, 6)  # (0,1,2) and (2,1,0)


def test_loss_gap_triangle_rate_is_reported(rng, capsys):
    # the loss gap need not be a metric; measure how often it fails
    from lcfl.metrics import triangle_violations
    bad = total = 0
    for kind in KIND_SPECS:
        for _ in range(5):
            spec, ds, ws = federation(kind, 6, rng)
            b, t = triangle_violations(loss_gap_matrix(spec, ds, ws))
            bad += b
            total += t
    with capsys.disabled():
        print(f"\n  loss-gap triangle inequality violated on {bad}/{total} ordered triples")
    assert total == 15 * 120
