import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cscon.geometry import PointCloud
from cscon.synthdata import (
    CLASS_IDS,
    SHAPE_CLASSES,
    AugmentPolicy,
    DataConfig,
    FormatError,
    augment,
    build_dataset,
    generate_shape,
    generate_split,
    load_dataset,
    read_manifest,
    read_record,
    split_seed,
    write_record,
)


def pairwise(x):
    x = x.astype(np.float64)
    return np.linalg.norm(x[:, None] - x[None], axis=-1)


def test_eight_stable_classes():
    assert SHAPE_CLASSES == ("sphere", "cube", "cylinder", "cone", "torus", "pyramid", "plane", "helix")
    assert CLASS_IDS["helix"] == 7


@pytest.mark.parametrize("name", SHAPE_CLASSES)
def test_generate_shape_contract(name):
    c = generate_shape(name, 128, seed=3)
    assert c.points.shape == (128, 3) and c.points.dtype == np.float32
    assert c.label == CLASS_IDS[name]
    assert np.linalg.norm(c.points, axis=1).max() == pytest.approx(1.0, abs=1e-6)
    np.testing.assert_allclose(c.points.mean(0), 0, atol=1e-5)
    again = generate_shape(CLASS_IDS[name], 128, seed=3)
    assert again.points.tobytes() == c.points.tobytes()


def test_sphere_on_unit_shell():
    r = np.linalg.norm(generate_shape("sphere", 512, seed=1, noise=0.01).points, axis=1)
    assert r.min() >= 1 - 0.01 - 1e-6


def principal_frame(x):
    x = x.astype(np.float64) - x.mean(0)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    return x @ vt.T


def test_plane_is_flat():
    # thinnest principal axis last
    z = principal_frame(generate_shape("plane", 512, seed=2, noise=0.01).points)[:, 2]
    assert np.abs(z).max() <= 0.01
    z = generate_shape("plane", 512, seed=2, noise=0.01, pose="canonical").points[:, 2]
    assert np.abs(z).max() <= 0.01


@pytest.mark.parametrize("name", SHAPE_CLASSES)
def test_random_pose_is_a_rotation_of_canonical(name):
    a = generate_shape(name, 128, seed=7, pose="canonical").points
    b = generate_shape(name, 128, seed=7).points
    np.testing.assert_allclose(pairwise(a), pairwise(b), atol=1e-5)
    if name != "sphere":
        assert not np.allclose(a, b, atol=1e-3)


def test_generate_shape_errors():
    with pytest.raises(ValueError):
        generate_shape("teapot", 64, 0)
    with pytest.raises(ValueError):
        generate_shape(8, 64, 0)
    with pytest.raises(ValueError):
        generate_shape("cube", 15, 0)
    with pytest.raises(ValueError):
        generate_shape("cube", 64, 0, pose="upright")


def test_seeds_give_different_shapes():
    a = generate_shape("torus", 64, seed=0).points
    b = generate_shape("torus", 64, seed=1).points
    assert not np.array_equal(a, b)


cloud_st = st.builds(
    lambda cls, seed: generate_shape(cls, 64, seed), st.sampled_from(SHAPE_CLASSES), st.integers(0, 10_000)
)


@given(cloud_st, st.sampled_from(list(AugmentPolicy)), st.integers(0, 2**31))
def test_augment_preserves_count_and_label(cloud, policy, seed):
    out = augment(cloud, policy, np.random.default_rng(seed))
    assert out.points.shape == cloud.points.shape
    assert out.label == cloud.label


@given(cloud_st, st.integers(0, 2**31))
def test_rotation_is_isometry(cloud, seed):
    out = augment(cloud, "rotation", np.random.default_rng(seed))
    np.testing.assert_allclose(pairwise(out.points), pairwise(cloud.points), atol=1e-5)


@given(cloud_st, st.integers(0, 2**31))
def test_jitter_is_clipped(cloud, seed):
    info = {}
    out = augment(cloud, "jitter", np.random.default_rng(seed), info=info)
    assert np.abs(info["jitter"]).max() <= 0.05
    assert np.abs(out.points.astype(np.float64) - cloud.points).max() <= 0.05 + 1e-6


def test_scale_multiplies_norms_by_recorded_factor():
    cloud = generate_shape("cone", 128, seed=4)
    info = {}
    out = augment(cloud, "scale", np.random.default_rng(9), info=info)
    s = info["scale"]
    assert 2 / 3 <= s <= 1.5
    np.testing.assert_allclose(
        np.linalg.norm(out.points, axis=1), s * np.linalg.norm(cloud.points.astype(np.float64), axis=1), rtol=1e-6
    )


def test_none_policy_is_identity():
    cloud = generate_shape("cube", 64, seed=0)
    out = augment(cloud, AugmentPolicy.NONE, np.random.default_rng(0))
    assert out.points.tobytes() == cloud.points.tobytes()


def test_seven_policies():
    assert len(AugmentPolicy) == 7


def test_split_seeds_distinct():
    assert split_seed(0, "train") != split_seed(0, "test")


def test_record_round_trip(tmp_path):
    c = generate_shape("helix", 100, seed=5)
    write_record(tmp_path / "x.pcr", c)
    back = read_record(tmp_path / "x.pcr")
    assert back.points.tobytes() == c.points.tobytes() and back.label == c.label


def test_truncated_record_names_path_and_offset(tmp_path):
    c = generate_shape("helix", 100, seed=5)
    write_record(tmp_path / "x.pcr", c)
    data = (tmp_path / "x.pcr").read_bytes()
    (tmp_path / "x.pcr").write_bytes(data[:-7])
    with pytest.raises(FormatError, match=r"x\.pcr.*offset"):
        read_record(tmp_path / "x.pcr")
    (tmp_path / "y.pcr").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError, match=r"y\.pcr.*offset 0"):
        read_record(tmp_path / "y.pcr")


def test_dataset_round_trip(tmp_path):
    cfg = DataConfig(n_train_per_class=1, n_test_per_class=1, n_points=32, classes=("sphere", "cube", "torus"))
    m = build_dataset(cfg, tmp_path)
    assert m.counts() == {"train": 3, "test": 3}
    train = load_dataset(tmp_path, "train")
    for a, b in zip(train, generate_split(cfg, "train")):
        assert a.points.tobytes() == b.points.tobytes() and a.label == b.label
    assert read_manifest(tmp_path / "manifest.tsv").meta["n_points"] == "32"


def test_missing_file_is_format_error(tmp_path):
    cfg = DataConfig(n_train_per_class=1, n_test_per_class=1, n_points=16, classes=("plane",))
    build_dataset(cfg, tmp_path)
    (tmp_path / "test" / "00000.pcr").unlink()
    with pytest.raises(FormatError, match="00000.pcr"):
        load_dataset(tmp_path, "test")
    with pytest.raises(FormatError, match="manifest"):
        load_dataset(tmp_path / "nowhere")


def test_default_desk_counts():
    cfg = DataConfig()
    n_train = cfg.n_train_per_class * len(cfg.classes)
    n_test = cfg.n_test_per_class * len(cfg.classes)
    # 8 x (200 + 50): 2000 entries, 400 of them test
    assert (n_train + n_test, n_test) == (2000, 400)
    assert cfg.n_points == 1024


def test_data_config_validation():
    with pytest.raises(ValueError, match="n_points"):
        DataConfig(n_points=8)
    with pytest.raises(ValueError, match="classes"):
        DataConfig(classes=("blob",))


def test_pointcloud_rejects_bad_shapes():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((4, 2)))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((0, 3)))
