import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from umyops import tps
from umyops.losses import soft_dice

from oracles import dense_tps_solve, dense_warp, gaussian_bumps

GRID = tps.make_control_grid(4)


def test_grid_4x4_axis_coordinates():
    axis = np.unique(GRID.points[:, 0])
    np.testing.assert_allclose(axis, [-250.88, -84.48, 81.92, 248.32], atol=1e-9)
    np.testing.assert_allclose(np.unique(GRID.points[:, 1]), axis)


def test_grid_row_major_and_counts():
    for m in (2, 3, 4, 7):
        g = tps.make_control_grid(m)
        assert len(g.points) == m * m
        keys = [tuple(p) for p in g.points]
        assert keys == sorted(keys)
        steps = np.diff(np.unique(g.points[:, 0]))
        np.testing.assert_allclose(steps, steps[0])


def test_grid_m2_endpoints():
    g = tps.make_control_grid(2, 256)
    np.testing.assert_allclose(np.unique(g.points[:, 0]), [256 * -0.98, 256 * 0.97])


def test_grid_rejects_small_m():
    with pytest.raises(tps.InvalidGridError):
        tps.make_control_grid(1)


def test_zero_displacement_gives_identity():
    c = tps.solve_tps(GRID, tps.DisplacementSet.zeros(4, (64, 64)))
    np.testing.assert_array_equal(c.affine.numpy(), [[1, 0, 0], [0, 1, 0]])
    assert torch.all(c.rbf_weights == 0)


def test_translation_is_affine():
    d = tps.DisplacementSet(np.tile([3.0, -5.0], (16, 1)), (64, 64))
    c = tps.solve_tps(GRID, d)
    np.testing.assert_allclose(c.affine.numpy(), [[1, 0, 3 * 2 / 64], [0, 1, -5 * 2 / 64]], atol=1e-12)
    assert c.rbf_weights.abs().max() <= 1e-8


def test_solve_matches_dense_oracle():
    rng = np.random.default_rng(3)
    src = GRID.normalized()
    d = tps.DisplacementSet(rng.normal(0, 6, (16, 2)), (128, 128))
    c = tps.solve_tps(GRID, d)
    rbf, aff = dense_tps_solve(src, src + d.deltas * 2 / 128)
    np.testing.assert_allclose(c.rbf_weights.numpy(), rbf, atol=1e-8)
    np.testing.assert_allclose(c.affine.numpy(), aff.T, atol=1e-8)
    # side conditions
    w = c.rbf_weights.numpy()
    np.testing.assert_allclose(w.sum(0), 0, atol=1e-10)
    np.testing.assert_allclose(w.T @ src, 0, atol=1e-10)


def test_duplicate_points_are_degenerate():
    pts = GRID.points.copy()
    pts[1] = pts[0]
    bad = tps.ControlGrid(4, 256.0, pts)
    with pytest.raises(tps.DegenerateGridError):
        tps.solve_tps(bad, tps.DisplacementSet.zeros(4, (32, 32)))


def test_displacement_count_must_match():
    with pytest.raises(tps.InvalidGridError):
        tps.solve_tps(GRID, tps.DisplacementSet.zeros(3, (32, 32)))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (16, 2), elements=st.floats(-20, 20)))
def test_interpolation_property(deltas):
    d = tps.DisplacementSet(deltas, (96, 80))
    c = tps.solve_tps(GRID, d)
    mapped = tps.evaluate_tps(c, GRID.normalized()).numpy()
    expected = GRID.normalized() + tps.normalize_deltas(deltas, (96, 80))
    np.testing.assert_allclose(mapped, expected, atol=1e-8)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-0.3, 0.3)))
def test_affine_displacements_have_no_bending(a):
    src = GRID.normalized()
    nd = src @ a[:, :2].T + a[:, 2]
    deltas = nd / np.array([2 / 64, 2 / 64])
    c = tps.solve_tps(GRID, tps.DisplacementSet(deltas, (64, 64)))
    assert c.rbf_weights.abs().max() <= 1e-8


def test_warp_identity_is_exact():
    rng = np.random.default_rng(0)
    img = rng.normal(size=(40, 56))
    c = tps.solve_tps(GRID, tps.DisplacementSet.zeros(4, (40, 56)))
    np.testing.assert_array_equal(tps.warp_image(img, c, "nearest"), img)
    assert np.abs(tps.warp_image(img, c, "bilinear") - img).max() <= 1e-6


def test_integer_translation_nearest_shift():
    rng = np.random.default_rng(1)
    img = rng.normal(size=(32, 32))
    c = tps.solve_tps(GRID, tps.DisplacementSet(np.tile([2.0, -3.0], (16, 1)), (32, 32)))
    out = tps.warp_image(img, c, "nearest")
    expected = np.zeros_like(img)
    expected[:30, 3:] = img[2:, :29]
    np.testing.assert_array_equal(out, expected)


def test_warp_matches_dense_oracle():
    rng = np.random.default_rng(5)
    img = gaussian_bumps(48, rng)
    deltas = rng.normal(0, 2.5, (16, 2))
    c = tps.solve_tps(GRID, tps.DisplacementSet(deltas, (48, 48)))
    out = tps.warp_image(img, c, "bilinear")
    ref = dense_warp(img, GRID.normalized(), deltas)
    assert np.abs(out - ref).max() <= 1e-6


def test_batched_warp_agrees_with_coefficient_path():
    rng = np.random.default_rng(6)
    img = gaussian_bumps(32, rng)
    deltas = rng.normal(0, 3, (16, 2))
    c = tps.solve_tps(GRID, tps.DisplacementSet(deltas, (32, 32)))
    a = tps.warp_image(img, c)
    b = tps.warp_batch(torch.as_tensor(img)[None, None], torch.as_tensor(deltas)[None], (32, 32), GRID)[0, 0]
    np.testing.assert_allclose(a, b.numpy(), atol=1e-10)


def test_nonfinite_coefficients_rejected():
    c = tps.solve_tps(GRID, tps.DisplacementSet.zeros(4, (8, 8)))
    c.rbf_weights[0, 0] = float("nan")
    with pytest.raises(tps.WarpError):
        tps.warp_image(np.ones((8, 8)), c)


def test_frame_mismatch_rejected():
    c = tps.solve_tps(GRID, tps.DisplacementSet.zeros(4, (16, 16)))
    with pytest.raises(tps.WarpError):
        tps.warp_image(np.ones((8, 8)), c)


def dice_through_warp(deltas, img, target):
    warped = tps.warp_batch(img[None, None], deltas[None], tuple(img.shape), GRID)[0, 0]
    return soft_dice(warped, target)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    img = torch.as_tensor(gaussian_bumps(48, rng) / 2.5)
    target = torch.as_tensor(gaussian_bumps(48, rng) > 0.5, dtype=torch.float64)
    deltas = torch.tensor(rng.normal(0, 2, (16, 2)), requires_grad=True)
    dice_through_warp(deltas, img, target).backward()
    step = 1e-3
    fd = np.zeros((16, 2))
    with torch.no_grad():
        for k in range(16):
            for c in range(2):
                e = torch.zeros(16, 2, dtype=torch.float64)
                e[k, c] = step
                fd[k, c] = (dice_through_warp(deltas + e, img, target) - dice_through_warp(deltas - e, img, target)) / (2 * step)
    g = deltas.grad.numpy()
    assert np.abs(g - fd).max() <= 1e-3 * np.abs(fd).max()


def test_warp_label_identity_and_shift():
    lab = np.zeros((24, 24), dtype=np.int64)
    lab[5:12, 6:15] = 1
    lab[8:10, 8:10] = 4
    ident = tps.solve_tps(GRID, tps.DisplacementSet.zeros(4, (24, 24)))
    np.testing.assert_array_equal(tps.warp_label(lab, ident), lab)
    shift = tps.solve_tps(GRID, tps.DisplacementSet(np.tile([-2.0, 1.0], (16, 1)), (24, 24)))
    out = tps.warp_label(lab, shift)
    expected = np.zeros_like(lab)
    expected[2:, :23] = lab[:22, 1:]
    np.testing.assert_array_equal(out, expected)
    assert set(np.unique(out)) <= set(np.unique(lab))


def test_soft_label_warp_agrees_with_nearest():
    from umyops.datapipe import PhantomSpec, generate_phantom

    rng = np.random.default_rng(2)
    for seed in range(3):
        sl, _ = generate_phantom(PhantomSpec(seed=seed, misalign_magnitude=0))
        lab = sl.labels["LGE"]
        c = tps.solve_tps(GRID, tps.DisplacementSet(rng.normal(0, 1.5, (16, 2)), lab.shape))
        hard = tps.warp_label(lab, c)
        soft = tps.warp_label(lab, c, soft=True).argmax(0).numpy()
        assert (hard == soft).mean() >= 0.95


def test_rescale_arithmetic():
    d = tps.DisplacementSet(np.tile([10.0, -8.0], (16, 1)), (256, 256))
    r = tps.rescale_displacements(d, 256, 256, 64, 64)
    np.testing.assert_allclose(r.deltas, np.tile([2.5, -2.0], (16, 1)))
    assert r.frame == (64, 64)
    same = tps.rescale_displacements(d, 256, 256, 256, 256)
    np.testing.assert_array_equal(same.deltas, d.deltas)
    with pytest.raises(ValueError):
        tps.rescale_displacements(d, 256, 256, 0, 64)


def scale_consistency_gap(seed):
    rng = np.random.default_rng(seed)
    img = gaussian_bumps(256, rng, n=4)
    deltas = rng.uniform(-1, 1, (16, 2))
    deltas *= rng.uniform(3, 10) / np.linalg.norm(deltas, axis=1).max()  # max |delta| <= 10 px
    full = tps.DisplacementSet(deltas, (256, 256))
    t = torch.as_tensor(img)[None, None]
    warped_full = tps.warp_batch(t, torch.as_tensor(full.deltas)[None], (256, 256), GRID)
    a = torch.nn.functional.avg_pool2d(warped_full, 4)[0, 0].numpy()
    small = tps.rescale_displacements(full, 256, 256, 64, 64)
    b = tps.warp_batch(torch.nn.functional.avg_pool2d(t, 4), torch.as_tensor(small.deltas)[None], (64, 64), GRID)
    return np.abs(a - b[0, 0].numpy()).mean() / (img.max() - img.min())


def test_rescaled_warp_commutes_with_downsampling():
    assert max(scale_consistency_gap(s) for s in range(3)) <= 0.05


def test_sum_of_warp_gradient_matches_finite_differences():
    rng = np.random.default_rng(12)
    img = torch.as_tensor(gaussian_bumps(32, rng))
    deltas = torch.tensor(rng.normal(0, 2, (16, 2)), requires_grad=True)

    def total(d):
        return tps.warp_batch(img[None, None], d[None], (32, 32), GRID).sum()

    total(deltas).backward()
    with torch.no_grad():
        for k in range(16):
            for c in range(2):
                e = torch.zeros(16, 2, dtype=torch.float64)
                e[k, c] = 1e-5  # small step keeps the probe clear of bilinear kinks
                fd = float(total(deltas + e) - total(deltas - e)) / 2e-5
                assert abs(float(deltas.grad[k, c]) - fd) <= 1e-6 * max(abs(fd), 1.0)
