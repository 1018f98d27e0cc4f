import numpy as np
import pytest

from sbevloc.errors import InputError
from sbevloc.geometry import Intrinsics, Pose2
from sbevloc.stereo import (
    disparity_block_match,
    disparity_to_depth,
    smooth_disparity,
)
from sbevloc.synthworld import WorldSpec, generate_world, render_frame

K = Intrinsics(fx=160.0, fy=160.0, cx=159.5, cy=119.5, baseline=0.3,
               width=320, height=240)


def texture(rng, shape):
    """Smooth-ish random texture with enough local contrast to match on."""
    img = rng.uniform(0, 255, shape)
    k = np.ones(3) / 3
    for axis in (0, 1):
        img = np.apply_along_axis(lambda r: np.convolve(r, k, mode="same"), axis, img)
    return img


# --- block matching --------------------------------------------------------

def test_identical_images_zero_disparity():
    rng = np.random.default_rng(0)
    img = texture(rng, (60, 80))
    disp = disparity_block_match(img, img, block_size=9, max_disparity=32)
    interior = disp[8:-8, 40:-8]
    assert (interior == 0).all()


def test_constant_shift_recovered():
    rng = np.random.default_rng(1)
    left = texture(rng, (60, 200))
    right = np.empty_like(left)
    right[:, :-8] = left[:, 8:]          # same point 8 px left in the right view
    right[:, -8:] = left[:, -8:]
    disp = disparity_block_match(left, right, block_size=9, max_disparity=32)
    interior = disp[8:-8, 40:160]
    valid = interior >= 0
    assert valid.mean() > 0.9
    assert np.abs(interior[valid] - 8).max() <= 1


def test_dimension_mismatch():
    with pytest.raises(InputError):
        disparity_block_match(np.zeros((10, 10)), np.zeros((10, 11)))


def test_bad_block_size():
    img = np.zeros((20, 20))
    with pytest.raises(InputError):
        disparity_block_match(img, img, block_size=4)


def test_synthetic_pair_median_error():
    # depth from a rendered synthetic frame -> integer ground-truth disparity
    # -> left/right pair constructed by occlusion-aware shifting
    world = generate_world(6, WorldSpec(route_length=120.0, frame_spacing=1.0))
    depth, _ = render_frame(world, world.route[30], K)
    d_gt = np.zeros_like(depth)
    vis = depth > 0
    d_gt[vis] = np.round(K.fx * K.baseline / depth[vis])
    d_gt = np.clip(d_gt, 0, 96)

    rng = np.random.default_rng(2)
    left = texture(rng, depth.shape)
    right = np.full_like(left, -1.0)
    placed_disp = np.full(depth.shape, -1.0)
    h, w = depth.shape
    # paint far-to-near so near surfaces occlude far ones in the right view
    order = np.argsort(-depth, axis=None)
    vs, us = np.unravel_index(order, depth.shape)
    for v, u in zip(vs, us):
        if depth[v, u] <= 0:
            continue
        ur = u - int(d_gt[v, u])
        if 0 <= ur < w:
            right[v, ur] = left[v, u]
            placed_disp[v, ur] = d_gt[v, u]
    holes = right < 0
    right[holes] = rng.uniform(0, 255, int(holes.sum()))

    disp = disparity_block_match(left, right, block_size=9, max_disparity=96)
    check = (disp >= 0) & (d_gt > 0) & vis
    check[:10] = check[-10:] = False
    err = np.abs(disp[check] - d_gt[check])
    assert np.median(err) < 1.0


def test_left_right_symmetry_of_valid_pixels():
    rng = np.random.default_rng(3)
    left = texture(rng, (50, 120))
    right = np.empty_like(left)
    right[:, :-5] = left[:, 5:]
    right[:, -5:] = left[:, -5:]
    disp = disparity_block_match(left, right, block_size=7, max_disparity=24)
    # independent right-image disparity via horizontal mirroring
    disp_r = disparity_block_match(np.fliplr(right), np.fliplr(left),
                                   block_size=7, max_disparity=24)[:, ::-1]
    h, w = left.shape
    for v in range(5, h - 5):
        for u in range(30, 100):
            d = disp[v, u]
            if d < 0:
                continue
            ur = u - int(d)
            if disp_r[v, ur] >= 0:
                assert abs(disp_r[v, ur] - d) <= 1


# --- smoothing ---------------------------------------------------------------

def test_smooth_constant_unchanged():
    d = np.full((40, 50), 12.0)
    guide = np.full((40, 50), 100.0)
    out = smooth_disparity(d, guide)
    assert np.allclose(out, 12.0, atol=1e-8)


def test_smooth_fills_single_hole():
    d = np.full((30, 30), 7.0)
    d[15, 15] = -1.0
    out = smooth_disparity(d, np.full((30, 30), 50.0))
    assert out[15, 15] == pytest.approx(7.0, abs=1e-8)


def test_smooth_leaves_large_holes_invalid():
    d = np.full((60, 60), -1.0)
    d[:4, :4] = 5.0  # far corner: windows near the center see <25% valid
    out = smooth_disparity(d, np.zeros((60, 60)), radius=4)
    assert out[30, 30] == -1.0


def test_smooth_edge_preserving_variance_reduction():
    rng = np.random.default_rng(4)
    h, w = 60, 80
    plane = np.fromfunction(lambda v, u: 10.0 + 0.05 * u, (h, w))
    noisy = plane + rng.normal(0, 0.5, (h, w))
    guide = np.zeros((h, w))
    guide[:, w // 2:] = 200.0  # hard step edge
    noisy_step = noisy.copy()
    noisy_step[:, w // 2:] += 20.0
    out = smooth_disparity(noisy_step, guide, radius=6, eps=1e-2)
    # noise suppressed on each side of the edge
    left_region = (slice(10, 50), slice(10, w // 2 - 8))
    res_in = noisy_step[left_region] - (plane[left_region])
    res_out = out[left_region] - (plane[left_region])
    assert res_out.var() < 0.5 * res_in.var()
    # the 20-unit step survives
    jump = out[:, w // 2 + 6].mean() - out[:, w // 2 - 7].mean()
    assert jump > 15.0


def test_smooth_total_variation_not_increased_on_constant_guide():
    rng = np.random.default_rng(5)
    d = 10 + rng.normal(0, 1, (50, 50))
    guide = np.full((50, 50), 30.0)
    out = smooth_disparity(d, guide)
    tv = lambda a: np.abs(np.diff(a, axis=0)).sum() + np.abs(np.diff(a, axis=1)).sum()
    assert tv(out) <= tv(d)


# --- disparity_to_depth --------------------------------------------------------

K_FORMULA = Intrinsics(fx=700.0, fy=700.0, cx=50, cy=50, baseline=0.5,
                       width=101, height=101)


def test_depth_formula():
    d = np.array([[35.0]])
    depth = disparity_to_depth(d, K_FORMULA)
    assert depth[0, 0] == pytest.approx(10.0)


def test_depth_zero_disparity_invalid():
    assert disparity_to_depth(np.array([[0.0]]), K_FORMULA)[0, 0] == 0.0
    assert disparity_to_depth(np.array([[-1.0]]), K_FORMULA)[0, 0] == 0.0
    assert disparity_to_depth(np.array([[0.5]]), K_FORMULA)[0, 0] == 0.0


def test_depth_range_clamp():
    # 700 * 0.5 / 3 = 116.7 m -> beyond 80 m cap -> invalid
    assert disparity_to_depth(np.array([[3.0]]), K_FORMULA)[0, 0] == 0.0
    # 700 * 0.5 / 1000 = 0.35 m -> closer than 0.5 m -> invalid
    assert disparity_to_depth(np.array([[1000.0]]), K_FORMULA)[0, 0] == 0.0


def test_depth_round_trip():
    rng = np.random.default_rng(6)
    d = rng.uniform(5, 120, (30, 30))
    depth = disparity_to_depth(d, K_FORMULA)
    valid = depth > 0
    assert valid.any()
    back = K_FORMULA.fx * K_FORMULA.baseline / depth[valid]
    assert np.abs(back - d[valid]).max() < 1e-9


def test_depth_monotone_decreasing():
    d = np.linspace(5, 120, 50).reshape(1, -1)
    depth = disparity_to_depth(d, K_FORMULA)[0]
    valid = depth > 0
    dd = np.diff(depth[valid])
    assert (dd < 0).all()
