import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from conftest import small_model
from collectivekv.attention import (MetricsReport, PredictionBatch, SequenceBatch, auc, bce_loss, ctr_forward,
                                    decode_model, encode_model, gauc, loss_and_grads, param_shapes, predict,
                                    self_attention, target_attention)
from collectivekv.collective import collective_forward
from collectivekv.errors import ShapeError, UndefinedMetricError, UsageError
from collectivekv.numkit import check_gradient


def pb(probs, labels, users=None):
    probs = np.asarray(probs, dtype=np.float64)
    users = np.asarray(users if users is not None else ["u"] * probs.size, dtype=object)
    return PredictionBatch(probs, np.asarray(labels, dtype=np.float64), users)


def batch(rng, n=6, T=3, d_e=8, user="u1"):
    return SequenceBatch(user, rng.normal(size=(n, d_e)), rng.normal(size=(T, d_e)),
                         (rng.random(T) < 0.5).astype(np.float64))


# -- attention primitives ---------------------------------------------------

def test_target_attention_examples(rng):
    V = rng.normal(size=(1, 4))
    np.testing.assert_array_equal(target_attention(rng.normal(size=(1, 4)), rng.normal(size=(1, 4)), V), V)
    K = np.tile(rng.normal(size=4), (5, 1))
    V = rng.normal(size=(5, 4))
    np.testing.assert_allclose(target_attention(rng.normal(size=(1, 4)), K, V), V.mean(axis=0, keepdims=True),
                               atol=1e-12)


def test_target_attention_matches_scalar_oracle(rng):
    q, K, V = rng.normal(size=(1, 5)), rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    out = target_attention(q, K, V)
    np.testing.assert_allclose(out[0], oracles.attention_row(q[0].tolist(), K.tolist(), V.tolist()),
                               atol=1e-12, rtol=0)


def test_target_attention_shape_errors(rng):
    with pytest.raises(ShapeError):
        target_attention(rng.normal(size=(1, 3)), rng.normal(size=(4, 4)), rng.normal(size=(4, 4)))
    with pytest.raises(ShapeError):
        target_attention(rng.normal(size=(1, 4)), rng.normal(size=(4, 4)), rng.normal(size=(3, 4)))


@given(hnp.arrays(np.float64, (5, 3), elements=st.floats(-4, 4)),
       hnp.arrays(np.float64, (5, 3), elements=st.floats(-4, 4)), st.integers(0, 2**31))
def test_attention_output_is_convex_combination(K, V, seed):
    q = np.random.default_rng(seed).normal(size=(1, 3))
    out = target_attention(q, K, V)[0]
    scores = K @ q[0] / math.sqrt(3)
    w = np.exp(scores - scores.max())
    w /= w.sum()
    assert np.all(w >= 0) and abs(w.sum() - 1) <= 1e-12
    np.testing.assert_allclose(out, w @ V, atol=1e-12)
    assert np.all(out <= V.max(axis=0) + 1e-12) and np.all(out >= V.min(axis=0) - 1e-12)


def test_self_attention_examples(rng):
    Q, K, V = (rng.normal(size=(4, 3)) for _ in range(3))
    out = self_attention(Q, K, V, causal=True)
    np.testing.assert_array_equal(out[0], V[0])
    assert not np.any(self_attention(Q, K, np.zeros((4, 3))))
    np.testing.assert_allclose(out, oracles.causal_self_attention(Q.tolist(), K.tolist(), V.tolist()),
                               atol=1e-12, rtol=0)
    with pytest.raises(ShapeError):
        self_attention(Q, K[:3], V[:3])


@given(st.integers(0, 4), st.integers(0, 2**31))
def test_causal_future_perturbation_is_invisible(i, seed):
    r = np.random.default_rng(seed)
    Q, K, V = (r.normal(size=(5, 3)) for _ in range(3))
    base = self_attention(Q, K, V)
    K2, V2 = K.copy(), V.copy()
    K2[i + 1:] += r.normal(size=K2[i + 1:].shape)
    V2[i + 1:] += r.normal(size=V2[i + 1:].shape)
    np.testing.assert_array_equal(self_attention(Q, K2, V2)[: i + 1], base[: i + 1])


# -- CTR models -------------------------------------------------------------

@pytest.mark.parametrize("mode", ["target", "self"])
def test_constant_head_gives_sigmoid_bias(mode, rng):
    cfg, params = small_model(mode)
    params["head.w"] = np.zeros_like(params["head.w"])
    params["head.b"] = np.array([0.7])
    out = ctr_forward(batch(rng), params, cfg, "inference")
    np.testing.assert_allclose(out.probs, 1 / (1 + math.exp(-0.7)), rtol=1e-14)


def test_self_mode_is_last_row_of_causal_self_attention(rng):
    cfg, params = small_model("self")
    b = batch(rng, n=5, T=3)
    out = ctr_forward(b, params, cfg, "inference")
    for t in range(3):
        seq = np.vstack([b.history, b.targets[t:t + 1]])
        kv = collective_forward(seq, cfg.collective, params, "inference")
        Q = seq @ params["query.W"]
        full = self_attention(Q, kv.K, kv.V, causal=True)
        np.testing.assert_allclose(out.attn_out[t], full[-1], atol=1e-12)


def test_target_mode_scores_each_candidate_independently(rng):
    cfg, params = small_model("target")
    b = batch(rng, T=4)
    whole = ctr_forward(b, params, cfg, "inference").probs
    for t in range(4):
        one = SequenceBatch(b.user_id, b.history, b.targets[t:t + 1], b.labels[t:t + 1])
        assert ctr_forward(one, params, cfg, "inference").probs[0] == pytest.approx(whole[t], abs=1e-15)


def test_empty_targets_rejected(rng):
    cfg, params = small_model()
    b = batch(rng)
    with pytest.raises(UsageError):
        ctr_forward(SequenceBatch("u", b.history, b.targets[:0], b.labels[:0]), params, cfg, "inference")


def _full_loss(batches, params, cfg):
    return loss_and_grads(batches, params, cfg)[0]


@pytest.mark.parametrize("mode", ["target", "self"])
@pytest.mark.parametrize("share", [(True, True), (True, False), (False, True), (False, False)])
def test_full_pipeline_gradient(mode, share):
    r = np.random.default_rng(8)
    cfg, params = small_model(mode, share_keys=share[0], share_values=share[1], peak_weight=0.3)
    batches = [batch(r, n=16, T=3, user="a"), batch(r, n=9, T=2, user="b")]
    loss, parts, grads = loss_and_grads(batches, params, cfg)
    assert set(grads) == set(param_shapes(cfg))
    assert loss == pytest.approx(parts["bce"] + parts["aux"])
    for name in params:
        def f(x, name=name):
            p = dict(params)
            p[name] = x
            return _full_loss(batches, p, cfg)
        assert check_gradient(f, params[name], grads[name]) <= 1e-4, name


def test_model_checkpoint_round_trip():
    for mode in ("target", "self"):
        cfg, params = small_model(mode, tie_routers=True)
        blob = encode_model(cfg, params)
        cfg2, params2 = decode_model(blob)
        assert cfg2.attention.mode == mode and cfg2.collective.tie_routers
        assert all(np.array_equal(params[k], params2[k]) for k in params)
        assert encode_model(cfg2, params2) == blob


# -- metrics ----------------------------------------------------------------

def test_bce_examples():
    assert bce_loss(pb([1.0, 0.0], [1, 0])) <= 1.2e-7
    assert bce_loss(pb([0.5] * 4, [1, 0, 0, 1])) == pytest.approx(math.log(2), abs=1e-12)
    assert bce_loss(pb([0.9, 0.2], [1, 0])) == pytest.approx(0.5 * (-math.log(0.9) - math.log(0.8)), abs=1e-12)
    assert bce_loss(pb([0.9, 0.2], [1, 0])) == pytest.approx(0.164252, abs=1e-6)
    assert math.isfinite(bce_loss(pb([0.0, 1.0], [1, 0])))


def test_auc_examples():
    assert auc(pb([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])) == 1.0
    assert auc(pb([0.3] * 6, [0, 1, 0, 1, 1, 0])) == 0.5
    assert auc(pb([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])) == 0.75
    with pytest.raises(UndefinedMetricError):
        auc(pb([0.1, 0.2], [1, 1]))


@given(st.integers(2, 200), st.integers(0, 2**31), st.integers(2, 50))
def test_auc_equals_pairwise_oracle(n, seed, levels):
    r = np.random.default_rng(seed)
    labels = r.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    scores = r.integers(0, levels, n) / levels  # coarse grid forces ties
    assert auc(pb(scores, labels)) == oracles.pairwise_auc(scores.tolist(), labels.tolist())


@given(st.integers(0, 2**31))
def test_auc_invariant_under_monotone_transform(seed):
    r = np.random.default_rng(seed)
    labels = np.r_[0, 1, r.integers(0, 2, 30)]
    s = r.random(32)
    assert auc(pb(s, labels)) == auc(pb(np.exp(3 * s) - 7, labels))


def test_gauc_examples():
    users = ["a", "a", "b", "b", "b", "b"]
    p = pb([0.1, 0.9, 0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1, 0, 1], users)
    assert gauc(p) == pytest.approx((2 * 1.0 + 4 * 0.5) / 6, abs=1e-9)
    assert gauc(p) == pytest.approx(0.6667, abs=1e-4)
    perfect = pb([0.1, 0.9, 0.2, 0.8], [0, 1, 0, 1], ["a", "a", "b", "b"])
    assert gauc(perfect) == 1.0


def test_gauc_skips_single_class_users():
    p = pb([0.1, 0.9, 0.3, 0.7, 0.2], [0, 1, 1, 1, 0], ["a", "a", "b", "b", "c"])
    assert gauc(p) == 1.0
    with pytest.raises(UndefinedMetricError):
        gauc(pb([0.1, 0.2], [1, 1], ["a", "b"]))


@given(st.integers(0, 2**31))
def test_gauc_single_user_equals_auc(seed):
    r = np.random.default_rng(seed)
    labels = np.r_[0, 1, r.integers(0, 2, 20)]
    p = pb(r.random(22), labels)
    assert gauc(p) == auc(p)


def test_metrics_report_row():
    rep = MetricsReport("r1", "collective", 4, 28, 64, 0.5, 0.6, 0.7, 0.140625)
    assert len(rep.row()) == len(MetricsReport.CSV_COLUMNS)
    assert rep.row()[:5] == ["r1", "collective", 4, 28, 64]


def test_predict_concatenates_users(rng):
    cfg, params = small_model()
    batches = [batch(rng, user="a"), batch(rng, user="b", T=2)]
    out = predict(batches, params, cfg)
    assert out.probs.shape == (5,) and list(out.user_ids) == ["a"] * 3 + ["b"] * 2
    assert np.all((out.probs > 0) & (out.probs < 1))
