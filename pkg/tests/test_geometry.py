import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from frustumbox.geometry import (CS, SS, AnchorPrior, BoxParams, CameraCalibration,
                                 InstanceMaskSet, PointCloud, box_local_to_world,
                                 filter_background, lift_masks, mean_size_prior,
                                 normalize_angle, points_in_box, project_points,
                                 structure_of, voxel_object_mask, world_to_box_local)

finite = st.floats(-50, 50, allow_nan=False)
sizes = st.floats(0.2, 6.0)
angles = st.floats(-10, 10, allow_nan=False)


def identity_camera(w=640, h=480, f=500.0):
    k = np.array([[f, 0, w / 2], [0, f, h / 2], [0, 0, 1.0]])
    return CameraCalibration(k, np.hstack([np.eye(3), np.zeros((3, 1))]), w, h)


def test_box_validation():
    with pytest.raises(ValueError):
        BoxParams([0, 0, 0], [1, 0, 1])
    with pytest.raises(ValueError):
        BoxParams([0, np.nan, 0], [1, 1, 1])
    assert BoxParams([0, 0, 0], [1, 1, 1], -np.pi / 2).heading == pytest.approx(1.5 * np.pi)
    assert normalize_angle(2 * np.pi) == 0.0
    assert normalize_angle(-1e-18) == 0.0


def test_point_cloud_may_be_empty():
    assert len(PointCloud(np.zeros((0, 3)))) == 0
    with pytest.raises(ValueError):
        PointCloud([[0, 0, np.inf]])


def test_center_maps_to_origin():
    box = BoxParams([1, 2, 0], [1, 1, 1], 0.0)
    assert np.allclose(world_to_box_local([[1, 2, 0]], box), 0)


def test_rotated_length_axis():
    box = BoxParams([0, 0, 0], [1, 1, 4], np.pi / 2)
    assert np.allclose(world_to_box_local([[0, 2, 0]], box), [[2, 0, 0]], atol=1e-12)


def test_corner_maps_to_half_extents():
    h, w, l, th = 1.5, 1.7, 4.2, 0.8
    box = BoxParams([3, -1, 0.5], [h, w, l], th)
    off = [l / 2 * np.cos(th) - w / 2 * np.sin(th), l / 2 * np.sin(th) + w / 2 * np.cos(th), h / 2]
    assert np.allclose(world_to_box_local([box.center + off], box), [[l / 2, w / 2, h / 2]])


def test_empty_transform():
    box = BoxParams([0, 0, 0], [1, 1, 1])
    assert world_to_box_local(np.zeros((0, 3)), box).shape == (0, 3)


@settings(max_examples=60, deadline=None)
@given(finite, finite, finite, sizes, sizes, sizes, angles, st.integers(0, 2**31 - 1))
def test_local_round_trip_and_containment(x, y, z, h, w, l, th, seed):
    box = BoxParams([x, y, z], [h, w, l], th)
    rng = np.random.default_rng(seed)
    local = rng.uniform(-1, 1, (64, 3)) * box.half_extent
    world = box_local_to_world(local, box)
    back = world_to_box_local(world, box)
    assert np.allclose(back, local, atol=1e-9)
    assert np.all(np.abs(back) <= box.half_extent + 1e-9)
    assert np.all(points_in_box(world, box, 1e-9))
    outside = local.copy()
    outside[:, 0] = box.half_extent[0] * (1.01 + rng.random(64))
    assert not np.any(points_in_box(box_local_to_world(outside, box), box))


def test_projection_examples():
    cam = identity_camera()
    uv, depth, inside = project_points([[0, 0, 10], [0, 0, -5], [2, -1, 8]], cam)
    assert np.allclose(uv[0], [320, 240]) and depth[0] == 10 and inside[0]
    assert not inside[1]
    assert uv[2, 0] == pytest.approx(500 * 2 / 8 + 320)
    assert uv[2, 1] == pytest.approx(500 * -1 / 8 + 240)


def test_calibration_validation():
    k = np.eye(3)
    k[1, 0] = 0.1
    with pytest.raises(ValueError):
        CameraCalibration(k, np.hstack([np.eye(3), np.zeros((3, 1))]), 10, 10)
    bad = np.hstack([2 * np.eye(3), np.zeros((3, 1))])
    with pytest.raises(ValueError):
        CameraCalibration(np.eye(3), bad, 10, 10)


def test_forward_camera_sees_ahead():
    cam = CameraCalibration.looking_forward()
    uv, depth, inside = project_points([[10, 0, 1.65], [-10, 0, 1.65]], cam)
    assert inside[0] and not inside[1]
    assert np.allclose(uv[0], [cam.width / 2, cam.height / 2])


def test_mask_set_requires_metadata():
    labels = np.zeros((4, 4), int)
    labels[1, 1] = 3
    with pytest.raises(ValueError):
        InstanceMaskSet(labels, {}, {})
    assert InstanceMaskSet(labels, {3: 0}, {3: 0.9}).instance_ids() == [3]


def test_lift_background_only_is_empty():
    cam = identity_camera(8, 8, 4.0)
    masks = InstanceMaskSet(np.zeros((8, 8), int))
    assert lift_masks(np.array([[0, 0, 5.0]]), masks, cam) == {}


def test_lift_partition_matches_pixels():
    cam = identity_camera(16, 16, 8.0)
    labels = np.zeros((16, 16), int)
    labels[:, :8] = 1
    labels[:, 8:12] = 2
    masks = InstanceMaskSet(labels, {1: 0, 2: 1}, {1: 1.0, 2: 0.5})
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.uniform(-12, 12, 400), rng.uniform(-10, 10, 400), rng.uniform(3, 20, 400)])
    lifted = lift_masks(pts, masks, cam)
    uv, _, inside = project_points(pts, cam)
    for inst in (1, 2):
        expect = [p for p, (u, v), ok in zip(pts, uv, inside)
                  if ok and labels[int(np.floor(v)), int(np.floor(u))] == inst]
        assert np.array_equal(lifted[inst], np.array(expect))
    # ordering does not matter and instances are disjoint
    perm = rng.permutation(len(pts))
    again = lift_masks(pts[perm], masks, cam)
    for inst in (1, 2):
        assert sorted(map(tuple, again[inst])) == sorted(map(tuple, lifted[inst]))
    assert not set(map(tuple, lifted[1])) & set(map(tuple, lifted[2]))


def test_lift_rejects_mismatched_dims():
    with pytest.raises(ValueError):
        lift_masks(np.zeros((1, 3)), InstanceMaskSet(np.zeros((3, 3), int)), identity_camera(8, 8))


def test_voxel_object_mask():
    cam = identity_camera(8, 8, 4.0)
    empty = voxel_object_mask(np.array([[0, 0, 4.0]]), InstanceMaskSet(np.zeros((8, 8), int)), cam, 3)
    assert np.all(empty == 0)
    full = InstanceMaskSet(np.ones((8, 8), int), {1: 0}, {1: 1.0})
    vox = np.array([[0, 0, 4.0], [0.5, 0.5, 9.0], [0, 0, -1.0]])
    m = voxel_object_mask(vox, full, cam, 2)
    assert m[:2, 0].tolist() == [1, 1] and m[2].sum() == 0 and m[:, 1].sum() == 0
    with pytest.raises(ValueError):
        voxel_object_mask(vox, InstanceMaskSet(np.ones((8, 8), int), {1: 4}, {1: 1.0}), cam, 2)


def test_filter_background_examples():
    same = np.ones((10, 3))
    assert len(filter_background(same)) == 10
    one = np.array([[1.0, 2, 3]])
    assert np.array_equal(filter_background(one), one)
    rng = np.random.default_rng(3)
    pts = np.vstack([rng.standard_normal((100, 3)), [[50, 0, 0]]])
    kept = filter_background(pts)
    mean, sd = pts.mean(axis=0), pts.std(axis=0)
    expect = [p for p in pts if np.all(np.abs(p - mean) <= 2 * sd)]
    assert np.array_equal(kept, np.array(expect))
    assert not np.any(np.all(kept == [50, 0, 0], axis=1))
    # three independent 2-sigma cuts keep about 0.954**3 = 87% of a 3D Gaussian
    assert len(kept) >= 80


@pytest.mark.parametrize("seed", range(5))
def test_filter_background_second_pass(seed):
    rng = np.random.default_rng(seed)
    # spread along one axis only: the single-cut case
    line = np.column_stack([rng.standard_normal(2000), np.zeros(2000), np.zeros(2000)])
    once = filter_background(line)
    assert len(once) - len(filter_background(once)) <= 0.05 * len(once)
    # isotropic 3D cluster: each pass trims less than the previous one
    cloud = rng.standard_normal((2000, 3))
    once = filter_background(cloud)
    twice = filter_background(once)
    assert 0 < len(once) - len(twice) < len(cloud) - len(once)


def test_mean_size_prior():
    b = lambda h, w, l: BoxParams([0, 0, 0], [h, w, l])  # noqa: E731
    priors = mean_size_prior([(0, b(4, 2, 1)), (0, b(6, 2, 3)), (1, b(1, 1, 1))], {0: SS, 1: CS})
    assert priors[0].size == (5.0, 2.0, 2.0) and priors[0].structure == SS
    assert priors[1].size == (1.0, 1.0, 1.0)
    with pytest.warns(UserWarning):
        out = mean_size_prior([(0, b(1, 1, 1))], {0: SS}, classes=[0, 7])
    assert [p.class_id for p in out] == [0]
    with pytest.raises(KeyError):
        mean_size_prior([(2, b(1, 1, 1))], {0: SS})


def test_mean_size_prior_matches_brute_force():
    rng = np.random.default_rng(5)
    boxes = [(0, BoxParams([0, 0, 0], rng.uniform(1, 5, 3))) for _ in range(5)]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        prior = mean_size_prior(boxes, {0: SS})[0]
    assert np.allclose(prior.size, np.mean([bx.size for _, bx in boxes], axis=0))


def test_anchor_prior_and_structure_tags():
    with pytest.raises(ValueError):
        AnchorPrior(0, (1, 1, 0))
    with pytest.raises(ValueError):
        AnchorPrior(0, (1, 1, 1), "XX")
    assert structure_of("Car") == SS and structure_of("Pedestrian") == CS
    with pytest.raises(KeyError):
        structure_of("Unicorn")
