import math

import numpy as np
import pytest

from cmprior.errors import InvalidParameterError
from cmprior.geo import (
    BevAugment,
    GridSpec,
    Pose2,
    apply_pose,
    bev_augment,
    make_ego_grid,
    patch_mask,
    random_patch_mask,
)
from cmprior.prior_store import PriorModel, prior_features


def test_ego_grid_examples():
    np.testing.assert_array_equal(make_ego_grid(GridSpec(1, 1, 10.0)), [[[0.0, 0.0]]])
    g = make_ego_grid(GridSpec(2, 2, 2.0))
    np.testing.assert_array_equal(g[0, 0], [-0.5, -0.5])
    np.testing.assert_array_equal(g[1, 1], [0.5, 0.5])
    np.testing.assert_array_equal(g[0, 1], [-0.5, 0.5])
    g = make_ego_grid(GridSpec(8, 8, 16.0))
    np.testing.assert_array_equal(np.diff(g[:, 0, 0]), 2.0)
    np.testing.assert_array_equal(np.diff(g[0, :, 1]), 2.0)


def test_grid_spec_validation():
    with pytest.raises(InvalidParameterError):
        GridSpec(0, 4, 1.0)
    with pytest.raises(InvalidParameterError):
        GridSpec(4, 4, 0.0)


def test_pose_examples():
    g = make_ego_grid(GridSpec(4, 3, 6.0))
    np.testing.assert_array_equal(apply_pose(g, Pose2.identity()), g)
    np.testing.assert_array_equal(apply_pose(g, Pose2(np.eye(2), np.array([10.0, 0.0]))), g + [10.0, 0.0])
    rot = apply_pose(np.array([1.0, 0.0]), Pose2.from_angle(math.pi / 2))
    np.testing.assert_allclose(rot, [0.0, 1.0], atol=1e-15)


def test_pose_rejects_non_rotation():
    with pytest.raises(InvalidParameterError):
        Pose2(np.array([[1.0, 0.1], [0.0, 1.0]]), np.zeros(2))
    with pytest.raises(InvalidParameterError):
        Pose2(np.array([[1.0, 0.0], [0.0, -1.0]]), np.zeros(2))


def test_pose_round_trip():
    rng = np.random.default_rng(0)
    g = make_ego_grid(GridSpec(16, 16, 100.0))
    for _ in range(50):
        pose = Pose2.from_angle(rng.uniform(-math.pi, math.pi), *rng.uniform(-5e3, 5e3, 2))
        back = apply_pose(apply_pose(g, pose), pose.inverse())
        assert np.abs(back - g).max() <= 1e-9


def test_augment_identities():
    g = make_ego_grid(GridSpec(5, 7, 20.0))
    np.testing.assert_array_equal(bev_augment(g, BevAugment()), g)
    twice = bev_augment(bev_augment(g, BevAugment(flip_x=True)), BevAugment(flip_x=True))
    np.testing.assert_array_equal(twice, g)
    rt = bev_augment(bev_augment(g, BevAugment(rotate_angle=math.pi / 2)), BevAugment(rotate_angle=-math.pi / 2))
    assert np.abs(rt - g).max() <= 1e-12
    scaled = bev_augment(g, BevAugment(scale=2.0))
    np.testing.assert_array_equal(scaled, 2 * g)
    with pytest.raises(InvalidParameterError):
        bev_augment(g, BevAugment(scale=0.0))


@pytest.fixture(scope="module")
def prior():
    return PriorModel.create((0, 0, 400, 400), table_size=2**10, mlp_widths=(16, 8), rng=np.random.default_rng(1))


def test_flip_consistency_exact(prior):
    g = make_ego_grid(GridSpec(16, 16, 16.0))
    pose = Pose2(np.eye(2), np.array([200.0, 150.0]))
    base = prior_features(prior, apply_pose(g, pose))
    fx = prior_features(prior, apply_pose(bev_augment(g, BevAugment(flip_x=True)), pose))
    fy = prior_features(prior, apply_pose(bev_augment(g, BevAugment(flip_y=True)), pose))
    np.testing.assert_array_equal(fx, base[::-1])
    np.testing.assert_array_equal(fy, base[:, ::-1])


def test_rotation_consistency_within_tolerance(prior):
    g = make_ego_grid(GridSpec(16, 16, 16.0))
    pose = Pose2(np.eye(2), np.array([200.0, 150.0]))
    base = prior_features(prior, apply_pose(g, pose))
    rot = prior_features(prior, apply_pose(bev_augment(g, BevAugment(rotate_angle=math.pi / 2)), pose))
    # rotating the queries by +90 deg maps cell (i, j) onto cell (w-1-j, i)
    np.testing.assert_allclose(rot, np.rot90(base, k=-1), atol=1e-8)


def test_mask_ratio_extremes():
    rng = np.random.default_rng(2)
    f = rng.normal(size=(20, 20, 3))
    token = np.array([9.0, 8.0, 7.0])
    np.testing.assert_array_equal(random_patch_mask(f, 0.0, token, 1), f)
    full = random_patch_mask(f, 1.0, token, 1)
    np.testing.assert_array_equal(full, np.broadcast_to(token, f.shape))
    with pytest.raises(InvalidParameterError):
        patch_mask(8, 8, 1.5, 0)


def test_mask_fraction_and_determinism():
    f = np.random.default_rng(3).normal(size=(128, 128, 4))
    token = np.full(4, 100.0)
    a = random_patch_mask(f, 0.25, token, 42)
    b = random_patch_mask(f, 0.25, token, 42)
    np.testing.assert_array_equal(a, b)
    masked = (a == token).all(axis=2)
    assert 0.2 <= masked.mean() <= 0.3
    # unmasked cells are untouched, masked cells come in 8x8 tiles
    np.testing.assert_array_equal(a[~masked], f[~masked])
    tiles = masked.reshape(16, 8, 16, 8)
    assert (tiles.all(axis=(1, 3)) == tiles.any(axis=(1, 3))).all()
