import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from collectivekv.collective import (CollectiveConfig, RouterHead, RoutingMap, UserProjection, assemble_kv,
                                     balance_loss, collective_backward, collective_forward, decode_checkpoint,
                                     encode_checkpoint, gather_collective, init_collective_params, param_shapes,
                                     peak_loss, project_user_specific, route)
from collectivekv.errors import ShapeError, StorageError, UsageError
from collectivekv.numkit import Rng, check_gradient


def rmap_from(logits):
    logits = np.asarray(logits, dtype=np.float64)
    return RoutingMap(logits, np.argmax(logits, axis=1))


def cfg(**kw):
    base = dict(embed_dim=8, user_dim=2, global_dim=6, pool_size=4)
    base.update(kw)
    return CollectiveConfig(**base)


# -- projection / routing / gather ------------------------------------------

def test_projection_examples(rng):
    S = rng.normal(size=(5, 3))
    c = np.array([1.0, -2.0])
    proj = UserProjection(np.zeros((3, 2)), c, np.zeros((3, 2)), c)
    K, V = project_user_specific(S, proj)
    assert np.array_equal(K, np.tile(c, (5, 1))) and np.array_equal(V, K)
    W = rng.normal(size=(4, 2))
    K, _ = project_user_specific(np.eye(4), UserProjection(W, np.zeros(2), W, np.zeros(2)))
    np.testing.assert_array_equal(K, W)


def test_projection_matches_dense_oracle(rng):
    S, W, b = rng.normal(size=(6, 5)), rng.normal(size=(5, 3)), rng.normal(size=3)
    K, _ = project_user_specific(S, UserProjection(W, b, W, b))
    np.testing.assert_allclose(K, oracles.dense(S.tolist(), W.tolist(), b.tolist()), atol=1e-12, rtol=0)


def test_projection_shape_error():
    with pytest.raises(ShapeError):
        project_user_specific(np.ones((2, 3)), UserProjection(np.ones((4, 2)), np.ones(2), np.ones((4, 2)),
                                                              np.ones(2)))


def test_route_ties_and_bias(rng):
    S = rng.normal(size=(7, 4))
    assert np.all(route(S, RouterHead(np.zeros((4, 5)), np.zeros(5))).indices == 0)
    b = np.array([0.0, 0.3, 2.0, 1.0, -1.0])
    rmap = route(S, RouterHead(np.zeros((4, 5)), b))
    assert np.all(rmap.indices == 2)
    assert np.array_equal(rmap.logits, np.tile(b, (7, 1)))


@given(hnp.arrays(np.float64, (6, 3), elements=st.floats(-5, 5)), st.integers(0, 2**31))
def test_route_matches_linear_scan(S, seed):
    r = np.random.default_rng(seed)
    W, b = r.normal(size=(3, 5)), r.normal(size=5)
    rmap = route(S, RouterHead(W, b))
    assert [oracles.argmax(row) for row in rmap.logits.tolist()] == rmap.indices.tolist()


@given(hnp.arrays(np.float64, (5, 6), elements=st.floats(-5, 5)), st.floats(0.01, 100))
def test_argmax_scale_invariance(logits, c):
    assert np.array_equal(np.argmax(logits * c, axis=1), rmap_from(logits).indices)


def test_gather_modes():
    pool = np.arange(4.0)[:, None] * np.ones((4, 3))
    logits = np.array([[0.0, -1, -1, -1], [-9, -9, 50.0, -9], [-1, -1, -1, 0.5]])
    rmap = rmap_from(logits)
    inf = gather_collective(pool, rmap, "inference")
    assert inf[:, 0].tolist() == [0.0, 2.0, 3.0]
    train = gather_collective(pool, rmap, "training")
    np.testing.assert_array_equal(train[0], 0.5 * pool[0])
    np.testing.assert_allclose(train[1], pool[2], atol=1e-12, rtol=0)
    with pytest.raises(UsageError):
        gather_collective(pool, rmap, "bogus")


@given(hnp.arrays(np.float64, (4, 5), elements=st.floats(-3, 3)))
def test_gate_saturation_consistency(noise):
    logits = noise.copy()
    idx = np.argmax(logits, axis=1)
    logits[np.arange(4), idx] = 50.0 + np.abs(noise[:, 0])
    rmap = rmap_from(logits)
    pool = np.random.default_rng(0).normal(size=(5, 3))
    diff = gather_collective(pool, rmap, "training") - gather_collective(pool, rmap, "inference")
    assert np.max(np.abs(diff)) <= 1e-12


def test_assemble_examples():
    np.testing.assert_array_equal(assemble_kv(np.ones((2, 1)), 2 * np.ones((2, 2))), [[1, 2, 2], [1, 2, 2]])
    c = np.ones((3, 2))
    assert np.array_equal(assemble_kv(np.zeros((3, 0)), c), c)
    assert np.array_equal(assemble_kv(c, np.zeros((3, 0))), c)
    with pytest.raises(ShapeError):
        assemble_kv(np.ones((2, 1)), np.ones((3, 1)))


@given(st.integers(0, 4), st.integers(0, 4), st.integers(1, 5))
def test_assemble_round_trip(du, dg, n):
    r = np.random.default_rng(du * 31 + dg)
    u, c = r.normal(size=(n, du)), r.normal(size=(n, dg))
    out = assemble_kv(u, c)
    assert np.array_equal(out[:, :du], u) and np.array_equal(out[:, du:], c)


# -- losses -----------------------------------------------------------------

def test_peak_loss_examples():
    assert peak_loss(rmap_from(np.zeros((3, 4)))) == pytest.approx(math.log(2), abs=1e-12)
    assert peak_loss(rmap_from(np.full((2, 3), 50.0))) <= 1e-20
    two = rmap_from([[0.0, -5.0], [math.log(3), 0.0]])
    assert peak_loss(two) == pytest.approx(-0.5 * (math.log(0.5) + math.log(0.75)), abs=1e-12)
    assert peak_loss(two) == pytest.approx(0.490415, abs=1e-6)


@given(hnp.arrays(np.float64, (4, 3), elements=st.floats(-10, 10)), st.integers(0, 3), st.floats(0.01, 5))
def test_peak_loss_monotone(logits, row, bump):
    rmap = rmap_from(logits)
    bumped = logits.copy()
    bumped[row, rmap.indices[row]] += bump
    assert peak_loss(rmap_from(bumped)) < peak_loss(rmap)
    assert peak_loss(rmap) > 0


def test_balance_loss_examples():
    assert balance_loss(rmap_from(np.full((5, 7), 0.3))) <= 1e-12
    assert balance_loss(rmap_from(np.random.default_rng(0).normal(size=(5, 1)))) == 0.0
    val = balance_loss(rmap_from([[math.log(3), 0.0]]))
    assert val == pytest.approx(0.75 * math.log(1.5) + 0.25 * math.log(0.5), abs=1e-12)
    assert val == pytest.approx(0.130812, abs=1e-6)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8)), elements=st.floats(-60, 60)))
def test_balance_loss_bounds(logits):
    m = logits.shape[1]
    val = balance_loss(rmap_from(logits))
    assert 0.0 <= val <= math.log(m) + 1e-9


def test_balance_loss_approaches_log_m_when_one_hot():
    logits = np.full((4, 8), -60.0)
    logits[:, 3] = 60.0
    assert balance_loss(rmap_from(logits)) == pytest.approx(math.log(8), abs=1e-9)


def test_losses_reject_empty():
    empty = RoutingMap(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))
    with pytest.raises(UsageError):
        peak_loss(empty)
    with pytest.raises(UsageError):
        balance_loss(empty)


# -- forward ----------------------------------------------------------------

def _as_lists(params):
    return {k: v.tolist() for k, v in params.items()}


@pytest.mark.parametrize("mode", ["training", "inference"])
@pytest.mark.parametrize("share", [(True, True), (True, False), (False, True)])
@pytest.mark.parametrize("tie", [False, True])
def test_forward_matches_straight_line_oracle(mode, share, tie):
    c = cfg(share_keys=share[0], share_values=share[1], tie_routers=tie, peak_weight=0.3, balance_weight=0.7)
    params = init_collective_params(c, Rng(11))
    S = np.random.default_rng(2).normal(size=(5, 8))
    fwd = collective_forward(S, c, params, mode)
    K, V, aux = oracles.collective_forward(S.tolist(), _as_lists(params), {"k": share[0], "v": share[1]}, mode,
                                           0.3, 0.7, tie)
    np.testing.assert_allclose(fwd.K, K, atol=1e-12, rtol=0)
    np.testing.assert_allclose(fwd.V, V, atol=1e-12, rtol=0)
    assert fwd.aux == pytest.approx(aux, abs=1e-12)


def test_unshared_forward_is_plain_projection(rng):
    c = cfg(share_keys=False, share_values=False)
    params = init_collective_params(c, Rng(0))
    assert set(params) == {"full_k.W", "full_k.b", "full_v.W", "full_v.b"}
    S = rng.normal(size=(4, 8))
    fwd = collective_forward(S, c, params, "training")
    np.testing.assert_array_equal(fwd.K, S @ params["full_k.W"] + params["full_k.b"])
    np.testing.assert_array_equal(fwd.V, S @ params["full_v.W"] + params["full_v.b"])
    assert fwd.aux == 0.0


def test_saturated_gates_make_modes_agree(rng):
    c = cfg()
    params = init_collective_params(c, Rng(0))
    for side in ("k", "v"):
        params[f"router_{side}.b"] = params[f"router_{side}.b"] + 200.0 * (np.arange(4) == 1)
    S = rng.normal(size=(6, 8))
    a = collective_forward(S, c, params, "training")
    b = collective_forward(S, c, params, "inference")
    assert np.max(np.abs(a.K - b.K)) <= 1e-12 and np.max(np.abs(a.V - b.V)) <= 1e-12


def test_tied_routers_share_indices(rng):
    c = cfg(tie_routers=True)
    params = init_collective_params(c, Rng(0))
    assert "router_v.W" not in params
    fwd = collective_forward(rng.normal(size=(9, 8)), c, params, "inference")
    assert np.array_equal(fwd.indices["k"], fwd.indices["v"])


def test_forward_rejects_bad_input():
    c = cfg()
    params = init_collective_params(c, Rng(0))
    with pytest.raises(ShapeError):
        collective_forward(np.ones((3, 7)), c, params, "training")
    with pytest.raises(UsageError):
        collective_forward(np.ones((3, 8)), c, params, "eval")


def test_config_validation():
    with pytest.raises(UsageError):
        cfg(pool_size=0).validate()
    with pytest.raises(UsageError):
        cfg(peak_weight=-1.0).validate()
    assert cfg().attn_dim == 8
    assert cfg(share_keys=False).active_sides == ("v",)


# -- backward ---------------------------------------------------------------

def _objective(c, params, S, dK, dV):
    fwd = collective_forward(S, c, params, "training")
    return float(np.sum(fwd.K * dK) + np.sum(fwd.V * dV) + fwd.aux)


@pytest.mark.parametrize("share", [(True, True), (True, False), (False, True), (False, False)])
@pytest.mark.parametrize("tie", [False, True])
def test_backward_matches_finite_differences(share, tie):
    c = CollectiveConfig(8, 2, 6, 32, peak_weight=0.5, balance_weight=1.0, share_keys=share[0],
                         share_values=share[1], tie_routers=tie)
    params = init_collective_params(c, Rng(5))
    r = np.random.default_rng(6)
    S, dK, dV = r.normal(size=(16, 8)), r.normal(size=(16, 8)), r.normal(size=(16, 8))
    dS, grads = collective_backward(collective_forward(S, c, params, "training"), dK, dV, params)
    assert set(grads) == set(param_shapes(c))
    for name in params:
        def f(x, name=name):
            p = dict(params)
            p[name] = x
            return _objective(c, p, S, dK, dV)
        assert check_gradient(f, params[name], grads[name]) <= 1e-6, name
    assert check_gradient(lambda x: _objective(c, params, x, dK, dV), S, dS) <= 1e-6


def test_backward_zero_upstream_zero_weights():
    c = cfg(peak_weight=0.0, balance_weight=0.0)
    params = init_collective_params(c, Rng(0))
    S = np.random.default_rng(0).normal(size=(5, 8))
    fwd = collective_forward(S, c, params, "training")
    _, grads = collective_backward(fwd, np.zeros_like(fwd.K), np.zeros_like(fwd.V), params)
    assert all(not np.any(g) for g in grads.values())


def test_peak_gradient_at_zero_logit():
    # W_r = 0, b_r = 0: every selected logit is 0 and its gradient is (sigmoid(0) - 1) / n * weight
    c = cfg(share_values=False, peak_weight=2.0, balance_weight=0.0)
    params = init_collective_params(c, Rng(0))
    params["router_k.W"] = np.zeros((8, 4))
    params["router_k.b"] = np.zeros(4)
    n = 5
    fwd = collective_forward(np.random.default_rng(1).normal(size=(n, 8)), c, params, "training")
    _, grads = collective_backward(fwd, np.zeros_like(fwd.K), np.zeros_like(fwd.V), params)
    expected = np.zeros(4)
    expected[0] = n * (-0.5) / n * 2.0
    np.testing.assert_allclose(grads["router_k.b"], expected, atol=1e-15)


def test_backward_requires_training_mode():
    c = cfg()
    params = init_collective_params(c, Rng(0))
    fwd = collective_forward(np.ones((2, 8)), c, params, "inference")
    with pytest.raises(UsageError):
        collective_backward(fwd, np.zeros_like(fwd.K), np.zeros_like(fwd.V), params)


# -- checkpoint -------------------------------------------------------------

@pytest.mark.parametrize("share", [(True, True), (False, True), (False, False)])
def test_checkpoint_round_trip(share):
    c = cfg(share_keys=share[0], share_values=share[1], tie_routers=True)
    params = init_collective_params(c, Rng(3))
    blob = encode_checkpoint(c, params)
    assert blob[:4] == b"CKV1"
    c2, p2, flags = decode_checkpoint(blob)
    assert (c2.embed_dim, c2.user_dim, c2.global_dim, c2.pool_size) == (8, 2, 6, 4)
    assert (c2.share_keys, c2.share_values, c2.tie_routers) == (share[0], share[1], True)
    assert list(p2) == list(param_shapes(c))
    for k in params:
        assert np.array_equal(params[k], p2[k])
    assert encode_checkpoint(c2, p2) == blob


def test_checkpoint_rejects_garbage():
    with pytest.raises(StorageError):
        decode_checkpoint(b"NOPE" + bytes(40))
    blob = encode_checkpoint(cfg(), init_collective_params(cfg(), Rng(0)))
    with pytest.raises(StorageError):
        decode_checkpoint(blob[:-3])
    with pytest.raises(StorageError):
        decode_checkpoint(blob + b"\0")
