import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from collectivekv import analysis
from collectivekv.attention import PredictionBatch, auc
from collectivekv.errors import UsageError
from collectivekv.synthdata import SynthConfig, generate, load, save, split

SMALL = dict(num_users=30, num_items=200, min_len=10, max_len=40)


def mean_embeddings(ds):
    return [ds.item_embeddings[u.history].mean(axis=0) for u in ds.users]


def test_generate_is_deterministic():
    a, b = generate(SynthConfig(**SMALL, seed=5)), generate(SynthConfig(**SMALL, seed=5))
    assert a.checksum() == b.checksum()
    assert np.array_equal(a.item_embeddings, b.item_embeddings)
    assert generate(SynthConfig(**SMALL, seed=6)).checksum() != a.checksum()


@settings(max_examples=10)
@given(st.integers(0, 1000), st.integers(1, 5), st.integers(0, 30))
def test_records_are_well_formed(seed, groups, min_len):
    cfg = SynthConfig(num_users=12, num_items=150, num_groups=groups, embed_dim=12, latent_rank=4,
                      min_len=min_len, max_len=min_len + 20, seed=seed)
    ds = generate(cfg)
    assert ds.item_embeddings.shape == (150, 12)
    for u in ds.users:
        assert min_len <= u.history.size <= min_len + 20
        assert len(set(u.history.tolist())) == u.history.size
        assert u.history.min(initial=0) >= 0 and u.history.max(initial=0) < 150
        assert set(u.labels.tolist()) <= {0, 1} and 0 <= u.group < groups
        assert u.target_items.size == cfg.targets_per_user


def test_degenerate_collaboration_gives_similarity_near_one():
    # identical preferences; what is left is the sampling noise of 40-120 item histories
    ds = generate(SynthConfig(num_users=100, num_groups=1, noise_scale=0.0))
    study = analysis.cross_user_similarity([ds.item_embeddings[u.history] for u in ds.users])
    assert study.values.min() > 0.9 and np.median(study.values) > 0.97


def test_independent_noisy_users_center_near_zero():
    ds = generate(SynthConfig(num_users=150, num_groups=150, noise_scale=10.0, shared_scale=0.0))
    study = analysis.cross_user_similarity([ds.item_embeddings[u.history] for u in ds.users], anchor=[0, 1, 2])
    assert abs(np.median(study.values)) <= 0.1


def test_zero_temperature_labels_follow_affinity_sign():
    ds = generate(SynthConfig(**SMALL, label_temperature=0.0))
    for u in ds.users:
        assert np.array_equal(u.labels, (u.affinity > 0).astype(int))
    pred = PredictionBatch(np.concatenate([u.affinity for u in ds.users]),
                           np.concatenate([u.labels for u in ds.users]), np.zeros(8 * 30))
    assert auc(pred) >= 0.99


def test_planted_structure_is_recoverable():
    ds = generate(SynthConfig(num_users=40))
    for u in ds.users:
        _, _, frac = analysis.principal_residual_split(ds.item_embeddings[u.history], 10)
        assert frac >= 0.9


def test_within_group_similarity_exceeds_cross_group():
    ds = generate(SynthConfig(num_users=200))
    means = mean_embeddings(ds)
    groups = [u.group for u in ds.users]
    within, cross = [], []
    for i in range(60):
        for j in range(i + 1, 60):
            (within if groups[i] == groups[j] else cross).append(analysis.cosine(means[i], means[j]))
    assert len(within) >= 100 and len(cross) >= 100
    assert np.mean(within) >= np.mean(cross) + 0.1


def test_split_examples():
    ds = generate(SynthConfig(**{**SMALL, "num_users": 10}))
    tr, ev = split(ds, 0.5, seed=1)
    assert len(tr.users) == len(ev.users) == 5
    ids_tr, ids_ev = {u.user_id for u in tr.users}, {u.user_id for u in ev.users}
    assert not ids_tr & ids_ev and len(ids_tr | ids_ev) == 10
    tr2, ev2 = split(ds, 0.5, seed=1)
    assert tr.checksum() == tr2.checksum() and ev.checksum() == ev2.checksum()
    for bad in (0.0, 1.0, 0.01):
        with pytest.raises(UsageError):
            split(ds, bad)


def test_validation_lists_every_problem():
    with pytest.raises(UsageError) as info:
        SynthConfig(num_groups=0, latent_rank=64, min_len=50, max_len=10).validate()
    msg = str(info.value)
    assert "num_groups" in msg and "latent_rank" in msg and "min_len" in msg


def test_manifest_and_binary_round_trip(tmp_path):
    ds = generate(SynthConfig(**SMALL, noise_scale=0.7, length_coupling=1.5))
    assert SynthConfig.from_manifest(ds.config.manifest()) == ds.config
    save(ds, tmp_path / "d")
    back = load(tmp_path / "d")
    assert back.checksum() == ds.checksum()
    assert np.array_equal(back.item_embeddings, ds.item_embeddings)
    for a, b in zip(ds.users, back.users):
        assert np.array_equal(a.latent, b.latent) and np.array_equal(a.affinity, b.affinity)
    assert generate(back.config).checksum() == ds.checksum()


def test_batches_carry_embeddings():
    ds = generate(SynthConfig(**SMALL))
    b = ds.batch(ds.users[3])
    assert b.user_id == "u00003"
    assert np.array_equal(b.history, ds.item_embeddings[ds.users[3].history])
    assert b.targets.shape == (8, 32) and b.labels.dtype == np.float64
