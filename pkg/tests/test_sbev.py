import math

import numpy as np
import pytest

from sbevloc.errors import InputError
from sbevloc.geometry import (
    Intrinsics,
    PointCloud,
    Pose2,
    pose3_from_pose2,
    quat_from_yaw,
    Pose3,
)
from sbevloc.sbev import (
    ClassPolicy,
    GridSpec,
    SBev,
    accumulate_sbev,
    build_point_cloud,
    cell_indices,
    filter_labels,
    rasterize_bev,
    read_sbev,
    write_sbev,
)

K = Intrinsics(fx=100, fy=100, cx=50, cy=50, baseline=0.5, width=101, height=101)
SPEC = GridSpec()


def brute_rasterize(cloud, spec):
    """Independent per-cell max-z scan (the oracle)."""
    size, res = spec.size, spec.resolution
    half = size * res / 2.0
    zmin, zmax = spec.height_window
    grid = np.zeros((size, size), dtype=np.uint8)
    best = np.full((size, size), -np.inf)
    for (x, y, z), label in zip(cloud.xyz, cloud.labels):
        if label == 0 or not (zmin <= z <= zmax):
            continue
        xi = math.floor(x / res)
        yi = math.floor((y + half) / res)
        if not (0 <= xi < size and 0 <= yi < size):
            continue
        r, c = size - 1 - xi, size - 1 - yi
        if z > best[r, c] or (z == best[r, c] and label > grid[r, c]):
            best[r, c] = z
            grid[r, c] = label
    return grid


def random_cloud(rng, n=1000):
    xyz = np.column_stack([
        rng.uniform(-5, 93, n),       # includes out-of-range forward values
        rng.uniform(-50, 50, n),
        rng.uniform(-4, 8, n),        # includes out-of-window heights
    ])
    return PointCloud(xyz, rng.integers(0, 256, n))


# --- filter_labels -------------------------------------------------------

def test_filter_labels_trivia():
    policy = ClassPolicy(keep_set={4, 7})
    labels = np.array([[4, 13], [7, 0]], dtype=np.uint8)
    out = filter_labels(labels, policy)
    assert out.tolist() == [[4, 0], [7, 0]]


def test_filter_labels_empty_keep():
    labels = np.arange(16, dtype=np.uint8).reshape(4, 4)
    assert filter_labels(labels, ClassPolicy(keep_set=set())).sum() == 0


def test_filter_labels_histogram_oracle():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 50, (64, 64)).astype(np.uint8)
    keep = {3, 9, 21, 40}
    out = filter_labels(labels, ClassPolicy(keep_set=keep))
    h_in = np.bincount(labels.ravel(), minlength=256)
    h_out = np.bincount(out.ravel(), minlength=256)
    for c in range(1, 256):
        assert h_out[c] == (h_in[c] if c in keep else 0)


def test_filter_labels_remap_after_filter():
    policy = ClassPolicy(keep_set={4}, remap={4: 2, 13: 1})
    labels = np.array([[4, 13]], dtype=np.uint8)
    assert filter_labels(labels, policy).tolist() == [[2, 0]]


# --- build_point_cloud ---------------------------------------------------

def test_cloud_empty_on_invalid_depth():
    depth = np.zeros((20, 20))
    labels = np.full((20, 20), 5, dtype=np.uint8)
    assert len(build_point_cloud(depth, labels, K, stride=1)) == 0


def test_cloud_single_pixel():
    depth = np.zeros((101, 101))
    labels = np.zeros((101, 101), dtype=np.uint8)
    depth[50, 50] = 5.0
    labels[50, 50] = 9
    cloud = build_point_cloud(depth, labels, K, stride=1)
    assert len(cloud) == 1
    assert np.allclose(cloud.xyz[0], [0, 0, 5])
    assert cloud.labels[0] == 9


def test_cloud_counting_oracle():
    rng = np.random.default_rng(1)
    depth = rng.uniform(0, 10, (60, 80))
    depth[depth < 2] = 0.0
    labels = rng.integers(0, 4, (60, 80)).astype(np.uint8)
    for stride in (1, 2, 3):
        cloud = build_point_cloud(depth, labels, K, stride=stride)
        want = int(((depth[::stride, ::stride] > 0)
                    & (labels[::stride, ::stride] != 0)).sum())
        assert len(cloud) == want


def test_cloud_dimension_mismatch():
    with pytest.raises(InputError):
        build_point_cloud(np.zeros((4, 4)), np.zeros((4, 5), dtype=np.uint8), K)


# --- rasterize_bev -------------------------------------------------------

def test_rasterize_empty_cloud():
    out = rasterize_bev(PointCloud(np.zeros((0, 3))), SPEC)
    assert out.grid.sum() == 0
    assert out.grid.shape == (352, 352)


def test_rasterize_single_point_index():
    # 10 m ahead, on centerline: row = 351 - 40 = 311, col = 175
    cloud = PointCloud(np.array([[10.0, 0.0, 1.0]]), np.array([7]))
    out = rasterize_bev(cloud, SPEC)
    nz = np.argwhere(out.grid)
    assert nz.tolist() == [[311, 175]]
    assert out.grid[311, 175] == 7


def test_rasterize_matches_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(5):
        cloud = random_cloud(rng)
        got = rasterize_bev(cloud, SPEC).grid
        assert np.array_equal(got, brute_rasterize(cloud, SPEC))


def test_rasterize_permutation_invariant():
    rng = np.random.default_rng(3)
    cloud = random_cloud(rng, 500)
    perm = rng.permutation(500)
    a = rasterize_bev(cloud, SPEC).grid
    b = rasterize_bev(PointCloud(cloud.xyz[perm], cloud.labels[perm]), SPEC).grid
    assert np.array_equal(a, b)


def test_rasterize_tie_breaks_larger_label():
    xyz = np.array([[10.0, 0.0, 1.0], [10.1, 0.1, 1.0]])  # same cell, same z
    out = rasterize_bev(PointCloud(xyz, np.array([3, 9])), SPEC)
    assert out.grid[311, 175] == 9
    out = rasterize_bev(PointCloud(xyz, np.array([9, 3])), SPEC)
    assert out.grid[311, 175] == 9


def test_rasterize_height_window():
    xyz = np.array([[10.0, 0.0, 7.0], [10.0, 0.0, -3.0]])  # both outside window
    out = rasterize_bev(PointCloud(xyz, np.array([5, 5])), SPEC)
    assert out.grid.sum() == 0


def test_cell_indices_boundaries():
    spec = GridSpec(size=4, resolution=1.0)
    rows, cols, inside = cell_indices(spec,
                                      np.array([0.0, 3.99, 4.0, -0.01]),
                                      np.array([0.0, 0.0, 0.0, 0.0]))
    assert inside.tolist() == [True, True, False, False]
    assert rows[0] == 3 and rows[1] == 0


# --- accumulate_sbev -----------------------------------------------------

def ego_pose3(p: Pose2, cam_h=1.5):
    return pose3_from_pose2(p, z=cam_h)


def test_accumulate_single_frame_equals_rasterize():
    rng = np.random.default_rng(4)
    cloud = random_cloud(rng, 300)
    pose = ego_pose3(Pose2(3, 4, 0.3))
    got = accumulate_sbev([(cloud, pose)], pose, SPEC)
    want = rasterize_bev(cloud, SPEC)
    assert np.array_equal(got.grid, want.grid)


def test_accumulate_union_cloud_oracle():
    # static world observed from several ego poses: accumulation equals
    # rasterizing the union of the clouds expressed in the newest frame
    rng = np.random.default_rng(5)
    world_pts = np.column_stack([
        rng.uniform(5, 60, 400), rng.uniform(-30, 30, 400), rng.uniform(0, 4, 400)])
    world_labels = rng.integers(1, 200, 400)
    poses = [Pose2(0, 0, 0), Pose2(2, 0.5, 0.05), Pose2(4, 1.0, 0.1)]
    frames = []
    for p in poses:
        p3 = ego_pose3(p)
        r = p3.rotation_matrix()
        local = (world_pts - p3.translation) @ r  # world -> ego (R^T applied)
        frames.append((PointCloud(local, world_labels), p3))
    current = frames[-1][1]
    got = accumulate_sbev(frames, current, SPEC)

    union_local = np.concatenate([
        (world_pts - current.translation) @ current.rotation_matrix()
        for _ in poses])
    union = PointCloud(union_local, np.concatenate([world_labels] * 3))
    want = rasterize_bev(union, SPEC)
    assert np.array_equal(got.grid, want.grid)


def test_accumulate_duplicate_frames_idempotent():
    rng = np.random.default_rng(6)
    cloud = random_cloud(rng, 200)
    pose = ego_pose3(Pose2(1, 2, 0.2))
    one = accumulate_sbev([(cloud, pose)], pose, SPEC)
    five = accumulate_sbev([(cloud, pose)] * 5, pose, SPEC)
    assert np.array_equal(one.grid, five.grid)


def test_accumulate_frame_count_checked():
    cloud = PointCloud(np.zeros((0, 3)))
    pose = ego_pose3(Pose2(0, 0, 0))
    with pytest.raises(InputError):
        accumulate_sbev([], pose, SPEC)
    with pytest.raises(InputError):
        accumulate_sbev([(cloud, pose)] * 6, pose, SPEC)


# --- files ---------------------------------------------------------------

def test_sbev_file_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    sb = SBev(rng.integers(0, 256, (352, 352)).astype(np.uint8), 0.25,
              Pose2(1.5, -2.0, 0.7), frame_id=42)
    p = tmp_path / "s.pgm"
    write_sbev(p, sb)
    back = read_sbev(p)
    assert np.array_equal(back.grid, sb.grid)
    assert back.origin == sb.origin
    assert back.resolution == 0.25
    assert back.frame_id == 42
