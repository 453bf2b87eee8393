import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from massmerge.router import (
    RouterConfig,
    batched_route,
    gate,
    nn_route,
    pool,
    residuals,
    route,
    subspace_bases,
)
from massmerge.subspace import LayerFactors, TaskSubspaceBundle
from oracles import brute_nn, brute_residual, random_orthonormal


def bundle(task_id, V, S=None, layer="l"):
    V = np.asarray(V, dtype=np.float64)
    k = V.shape[1]
    S = np.linspace(2.0, 1.0, k) if S is None else np.asarray(S, dtype=np.float64)
    U = np.eye(V.shape[0], k)
    return TaskSubspaceBundle(task_id, (layer,), {layer: LayerFactors(U, S, V)}, {layer: None})


def axis_bundles(n=3):
    return [bundle(f"t{i}", np.eye(n)[:, [i]]) for i in range(n)]


def planted_bundles(rng, n, T, r):
    Q = random_orthonormal(rng, n, T * r)
    return [bundle(f"t{i}", Q[:, i * r : (i + 1) * r]) for i in range(T)], Q


# ---------------------------------------------------------------- residuals


def test_residuals_axis_example():
    r = residuals([1.0, 2.0, 2.0], axis_bundles(), "l")
    # each residual is the norm of the two off-axis coordinates
    assert np.allclose(r, [np.sqrt(8), np.sqrt(5), np.sqrt(5)])


def test_residuals_in_span_and_zero_input():
    bs = axis_bundles()
    r = residuals([0.0, 4.0, 0.0], bs, "l")
    assert r[1] == 0.0 and r[0] > 0 and r[2] > 0
    assert np.array_equal(residuals(np.zeros(3), bs, "l"), np.zeros(3))


def test_residuals_unknown_layer_and_mismatch():
    with pytest.raises(KeyError):
        residuals(np.ones(3), axis_bundles(), "nope")
    with pytest.raises(ValueError):
        residuals(np.ones(4), axis_bundles(), "l")


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_residuals_match_least_squares_oracle(seed):
    rng = np.random.default_rng(seed)
    bs, _ = planted_bundles(rng, 10, 3, 2)
    z = rng.standard_normal(10)
    r = residuals(z, bs, "l")
    assert np.all(r >= 0) and np.all(r <= np.linalg.norm(z) + 1e-12)
    assert np.allclose(r, [brute_residual(z, b["l"].V) for b in bs], atol=1e-10)


def test_zero_singular_directions_are_not_routable():
    # a task whose delta vanished has an empty subspace at that layer
    b = bundle("z", np.eye(3)[:, :2], S=[0.0, 0.0])
    (V,) = subspace_bases([b], "l")
    assert V.shape == (3, 0)
    assert residuals([3.0, 4.0, 0.0], [b], "l")[0] == pytest.approx(5.0)


def test_orthogonalized_source():
    rng = np.random.default_rng(0)
    bs, Q = planted_bundles(rng, 8, 2, 2)
    raw = subspace_bases(bs, "l", "raw")
    orth = subspace_bases(bs, "l", "orthogonalized")
    # already orthogonal: the polar step changes nothing
    for a, b in zip(raw, orth):
        assert np.allclose(a, b, atol=1e-10)


def test_pool_token_mean():
    Z = np.array([[1.0, 0.0], [3.0, 2.0]])
    assert np.array_equal(pool(Z), [2.0, 1.0])
    with pytest.raises(ValueError):
        pool(np.zeros((2, 2, 2)))


# ---------------------------------------------------------------- gate


@pytest.mark.parametrize(
    "w,eta,k,want",
    [
        ((0.5, 0.3, 0.2), 0.25, 2, (0, 1)),
        ((0.5, 0.3, 0.2), 0.25, 1, (0,)),
        ((0.4, 0.35, 0.25), 0.6, 2, (0,)),
        ((0.25, 0.25, 0.25, 0.25), 0.0, 2, (0, 1)),
        ((0.1, 0.3, 0.6), 0.0, 2, (1, 2)),
    ],
)
def test_gate_examples(w, eta, k, want):
    assert gate(np.array(w), eta, k) == want


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(0, 1)), st.floats(0, 1), st.integers(1, 8))
def test_gate_invariants(w, eta, k):
    w = w / w.sum() if w.sum() > 0 else np.full(w.size, 1.0 / w.size)
    sel = gate(w, eta, k)
    assert 1 <= len(sel) <= k
    assert list(sel) == sorted(set(sel))
    if not all(w[i] >= eta for i in sel):
        assert len(sel) == 1 and w[sel[0]] == w.max()
    # nothing left out outweighs something selected
    for j in set(range(w.size)) - set(sel):
        if w[j] >= eta and len(sel) < k:
            pytest.fail("eligible task dropped below the cap")


# ---------------------------------------------------------------- route


def test_route_in_span_selects_task():
    bs = axis_bundles()
    d = route([0.0, 0.0, 5.0], bs, RouterConfig("l", eta=0.0, top_k=1))
    assert d.selected == (2,)
    assert d.weights.sum() == pytest.approx(1.0, abs=1e-9)


def test_route_identical_subspaces_tie_to_lower_index():
    V = np.eye(4)[:, :2]
    d = route(np.ones(4), [bundle("a", V), bundle("b", V)], RouterConfig("l", eta=0.0, top_k=1))
    assert d.weights[0] == d.weights[1]
    assert d.selected == (0,)


def test_route_json_record():
    d = route([1.0, 2.0, 2.0], axis_bundles(), RouterConfig("l"))
    rec = json.loads(json.dumps(d.to_json()))
    assert set(rec) == {"residuals", "weights", "selected", "layer"}
    assert rec["layer"] == "l" and rec["selected"] == list(d.selected)


def test_route_noisy_planted_spans_monte_carlo():
    rng = np.random.default_rng(1)
    n, T, r = 32, 4, 4
    bs, _ = planted_bundles(rng, n, T, r)
    cfg = RouterConfig("l", eta=0.0, top_k=1)
    hits = 0
    for i, b in enumerate(bs):
        for _ in range(1000):
            z = b["l"].V @ rng.standard_normal(r)
            z = z + 0.1 * np.linalg.norm(z) * rng.standard_normal(n) / np.sqrt(n)
            hits += route(z, bs, cfg).selected == (i,)
    assert hits / (T * 1000) >= 0.95


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100))
def test_route_scale_invariance_of_ordering(seed, c):
    rng = np.random.default_rng(seed)
    bs, _ = planted_bundles(rng, 12, 3, 2)
    z = rng.standard_normal(12)
    cfg = RouterConfig("l", eta=0.0, top_k=2)
    a, b = route(z, bs, cfg), route(c * z, bs, cfg)
    assert np.allclose(b.residuals, c * a.residuals, rtol=1e-9, atol=1e-12)
    assert a.selected == b.selected
    # argsort of w agrees except where weights tie
    ra, rb = np.argsort(-a.residuals, kind="stable"), np.argsort(-b.residuals, kind="stable")
    if len(set(np.round(a.residuals, 9))) == a.residuals.size:
        assert np.array_equal(ra, rb)


def test_router_config_validation():
    with pytest.raises(ValueError):
        RouterConfig("l", eta=1.5)
    with pytest.raises(ValueError):
        RouterConfig("l", top_k=0)
    with pytest.raises(ValueError):
        RouterConfig("l", source="other")


# ---------------------------------------------------------------- batched


def test_batched_single_and_copies_equal_route():
    rng = np.random.default_rng(2)
    bs, _ = planted_bundles(rng, 9, 3, 2)
    z = rng.standard_normal(9)
    cfg = RouterConfig("l")
    d = route(z, bs, cfg)
    for Z in ([z], [z] * 5):
        b = batched_route(Z, bs, cfg)
        assert np.allclose(b.residuals, d.residuals, atol=1e-15)
        assert np.array_equal(b.weights, d.weights) or np.allclose(b.weights, d.weights, atol=1e-15)
        assert b.selected == d.selected


def test_batched_majority_wins():
    bs = axis_bundles(2)
    rng = np.random.default_rng(3)
    Z = [np.array([rng.uniform(1, 2), 0.0]) for _ in range(9)] + [np.array([0.0, rng.uniform(1, 2)])]
    d = batched_route(Z, bs, RouterConfig("l", eta=0.0, top_k=1))
    assert np.allclose(d.residuals, np.mean([residuals(z, bs, "l") for z in Z], axis=0))
    assert d.selected == (0,)


def test_batched_empty():
    with pytest.raises(ValueError):
        batched_route([], axis_bundles(), RouterConfig("l"))


# ---------------------------------------------------------------- nn_route


def test_nn_examples():
    sup = [(np.array([1.0, 0.0]), "A"), (np.array([0.0, 1.0]), "B")]
    assert nn_route([0.9, 0.1], sup) == "A"
    assert nn_route([0.0, 3.0], sup) == "B"
    v = np.array([0.3, -0.7])
    assert nn_route(v, sup + [(v, "C")]) == "C"


def test_nn_tie_lowest_index():
    e = np.array([1.0, 0.0])
    assert nn_route(e, [(e, "first"), (2 * e, "second")]) == "first"


def test_nn_errors():
    with pytest.raises(ValueError):
        nn_route([0.0, 0.0], [(np.ones(2), "A")])
    with pytest.raises(ValueError):
        nn_route([1.0, 0.0], [])


def test_nn_matches_exhaustive_oracle():
    rng = np.random.default_rng(4)
    centers = rng.standard_normal((4, 16))
    support = [(c + 0.8 * rng.standard_normal(16), f"t{i}") for i, c in enumerate(centers) for _ in range(50)]
    for _ in range(200):
        z = centers[rng.integers(4)] + rng.standard_normal(16)
        assert nn_route(z, support) == brute_nn(z, support)
