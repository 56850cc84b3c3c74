import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cscon.evaluation import (
    FinetuneConfig,
    Head,
    HeadConfig,
    ProbeResult,
    backbone_checksum,
    export_embeddings,
    extract_features,
    extract_global,
    fewshot,
    finetune_full,
    pool_tokens,
    probe_linear,
    probe_mlp3,
    read_embeddings,
    sample_episode,
)
from cscon import geometry
from cscon.model import CSCon, ModelConfig
from cscon.numerics import Tensor
from cscon.synthdata import DataConfig, generate_split, stack

TINY = ModelConfig(depth=1, dim=16, heads=2, n_patches=8, patch_size=8)
FAST = HeadConfig(epochs=30, warmup_epochs=1, lr=1e-2)


@pytest.fixture(scope="module")
def tiny_data():
    cfg = DataConfig(n_train_per_class=4, n_test_per_class=3, n_points=64, classes=("sphere", "cube", "plane"))
    return stack(generate_split(cfg, "train")), stack(generate_split(cfg, "test"))


def onehot_task(n_per_class=10, k=4):
    y = np.repeat(np.arange(k), n_per_class)
    return np.eye(k, dtype=np.float32)[y], y


def test_probe_result_format():
    r = ProbeResult([0.5, 0.75])
    assert r.mean == 0.625 and str(r) == "0.6250 ± 0.1250"


def test_pool_tokens():
    t = np.arange(12, dtype=np.float32).reshape(1, 3, 4)
    np.testing.assert_array_equal(pool_tokens(t), [[4, 5, 6, 7, 8, 9, 10, 11]])


def test_separable_features_are_learned():
    x, y = onehot_task()
    assert probe_linear(x, y, x, y, seeds=(0,), config=FAST).mean == 1.0
    assert probe_mlp3(x, y, x, y, seeds=(0,), config=FAST, hidden=32).mean == 1.0


def test_constant_features_give_majority_rate():
    y = np.array([0] * 30 + [1] * 10)
    x = np.zeros((40, 5), np.float32)
    assert probe_linear(x, y, x, y, seeds=(0,), config=FAST).mean == pytest.approx(0.75)


def test_shuffled_labels_near_chance():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((400, 8)).astype(np.float32)
    y = rng.integers(0, 4, 400)
    r = probe_linear(x[:200], y[:200], x[200:], y[200:], seeds=(0, 1), config=FAST)
    assert abs(r.mean - 0.25) < 0.12


def test_one_accuracy_per_seed():
    x, y = onehot_task()
    assert len(probe_linear(x, y, x, y, seeds=(0, 1, 2), config=FAST).accuracies) == 3


@settings(max_examples=15)
@given(st.integers(2, 5), st.integers(1, 3), st.integers(0, 2**31))
def test_episode_structure(way, shot, seed):
    train_y = np.repeat(np.arange(6), 4)
    test_y = np.repeat(np.arange(6), 3)
    ep = sample_episode(train_y, test_y, way, shot, 2, np.random.default_rng(seed))
    assert len(ep.classes) == way and len(set(ep.classes)) == way
    assert len(ep.support) == way * shot and len(set(ep.support)) == way * shot
    assert sorted(set(train_y[ep.support])) == sorted(ep.classes)
    assert len(ep.query) == way * 2 and set(test_y[ep.query]) == set(ep.classes)


def test_episode_rejects_too_many_ways():
    with pytest.raises(ValueError, match="way"):
        sample_episode(np.arange(3), np.arange(3), 4, 1, 1, np.random.default_rng(0))


def test_one_way_is_perfect():
    x, y = onehot_task()
    assert fewshot(x, y, x, y, way=1, shot=1, trials=3, queries=5).mean == 1.0


def test_fewshot_deterministic():
    x, y = onehot_task()
    x = x + np.random.default_rng(1).standard_normal(x.shape).astype(np.float32) * 0.5
    a = fewshot(x, y, x, y, way=3, shot=2, trials=3, queries=5, config=FAST)
    b = fewshot(x, y, x, y, way=3, shot=2, trials=3, queries=5, config=FAST)
    assert a.accuracies == b.accuracies and len(a.accuracies) == 3


def test_features_are_deterministic_and_batch_independent(tiny_data):
    (x, _), _ = tiny_data
    model = CSCon(TINY)
    model.training = True
    a = extract_features(model, x, batch_size=5)
    b = extract_features(model, x, batch_size=64)
    assert a.shape == (len(x), 2 * TINY.dim) and a.dtype == np.float32
    np.testing.assert_allclose(a, b, atol=1e-6)
    np.testing.assert_allclose(extract_global(x[3], model), a[3], atol=1e-6)
    assert model.training is True


def test_probes_leave_backbone_untouched(tiny_data):
    (x, y), (xt, yt) = tiny_data
    model = CSCon(TINY)
    before = backbone_checksum(model)
    feats, tfeats = extract_features(model, x), extract_features(model, xt)
    probe_linear(feats, y, tfeats, yt, seeds=(0,), config=FAST)
    probe_mlp3(feats, y, tfeats, yt, seeds=(0,), config=FAST)
    r = finetune_full(model, x, y, xt, yt, FinetuneConfig(epochs=1, warmup_epochs=0, batch_size=4))
    assert 0.0 <= r.mean <= 1.0
    assert backbone_checksum(model) == before


def test_export_round_trip(tmp_path):
    f = np.random.default_rng(0).standard_normal((5, 6)).astype(np.float32)
    lab = np.array([3, 1, 4, 1, 5])
    export_embeddings(f, lab, tmp_path / "e.tsv")
    back, bl = read_embeddings(tmp_path / "e.tsv")
    assert back.tobytes() == f.tobytes()
    np.testing.assert_array_equal(bl, lab)
    assert len((tmp_path / "e.tsv").read_text().splitlines()[0].split("\t")) == 7


def test_head_input_norm_stats_update_only_in_training(rng):
    head = Head(4, 3, 3, 8, seed=0, input_norm=True)
    x = rng.standard_normal((16, 4)).astype(np.float32) * 5 + 2
    before = {k: v.copy() for k, v in head.buffers.items()}
    a = head(Tensor(x)).data
    assert all(np.array_equal(before[k], head.buffers[k]) for k in before)
    np.testing.assert_array_equal(a, head(Tensor(x)).data)
    head.training = True
    head(Tensor(x))
    np.testing.assert_allclose(head.buffers["mean"], 0.1 * x.mean(0), rtol=1e-5)
    assert not np.allclose(head.buffers["var"], 1.0)


def test_features_ignore_point_order_inside_patches(tiny_data, rng):
    (x, _), _ = tiny_data
    model = CSCon(TINY)
    centers, patches = geometry.patchify_batch(x[:4], TINY.n_patches, TINY.patch_size)
    # an independent shuffle of the k members of every patch
    order = np.argsort(rng.random(patches.shape[:3]), axis=-1)
    perm = np.take_along_axis(patches, order[..., None], axis=2)
    a = pool_tokens(model.tokens(centers, patches).data)
    b = pool_tokens(model.tokens(centers, perm).data)
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_shuffled_labels_on_shapes_are_chance():
    cfg = DataConfig(n_train_per_class=40, n_test_per_class=40, n_points=128)
    (x, y), (xt, yt) = stack(generate_split(cfg, "train")), stack(generate_split(cfg, "test"))
    model = CSCon(TINY)
    f, ft = extract_features(model, x), extract_features(model, xt)
    rng = np.random.default_rng(0)
    r = probe_linear(f, rng.permutation(y), ft, rng.permutation(yt), seeds=(0, 1, 2))
    assert abs(r.mean - 1 / 8) <= 0.05
