import numpy as np
import pytest

from perfmae.errors import MaskRatioError, ShapeError, UndefinedLossError
from perfmae.patches import PatchGrid, masked_mse, n_masked, patchify, sample_mask, unpatchify
from perfmae.volume import Volume


def test_default_grid_constants():
    vol = Volume(np.zeros((96, 96, 96), dtype=np.float32))
    patches, grid = patchify(vol, 12)
    assert patches.shape == (512, 1728)
    assert grid.grid == (8, 8, 8)


def test_single_patch_is_flattened_volume():
    x = np.arange(8, dtype=np.float32).reshape(2, 2, 2) / 8
    patches, _ = patchify(Volume(x), 2)
    np.testing.assert_array_equal(patches, x.reshape(1, 8))


def test_patch_rows_follow_grid_coords(rng):
    x = rng.random((6, 9, 12), dtype=np.float32)
    patches, grid = patchify(Volume(x), 3)
    for n, (a, b, c) in enumerate(grid.coords()):
        np.testing.assert_array_equal(patches[n], x[3 * a:3 * a + 3, 3 * b:3 * b + 3, 3 * c:3 * c + 3].ravel())


def test_non_divisible():
    with pytest.raises(ShapeError):
        patchify(Volume(np.zeros((10, 10, 10))), 3)


def test_unpatchify_cases(rng):
    x = rng.random((24, 24, 24), dtype=np.float32)
    patches, grid = patchify(Volume(x), 12)
    assert unpatchify(patches, grid).data.tobytes() == x.tobytes()
    np.testing.assert_array_equal(unpatchify(np.ones_like(patches), grid).data, 1.0)
    with pytest.raises(ShapeError):
        unpatchify(patches[:-1], grid)


def test_sample_mask_sizes(rng):
    plan = sample_mask(512, 0.5, rng)
    assert len(plan.masked) == 256 and len(plan.visible) == 256
    assert set(plan.masked) | set(plan.visible) == set(range(512))
    empty = sample_mask(512, 0.0, rng)
    assert len(empty.masked) == 0 and len(empty.visible) == 512
    assert len(sample_mask(512, 1.0, rng).visible) == 0
    with pytest.raises(MaskRatioError):
        sample_mask(10, 1.5, rng)


def test_n_masked_ties_to_even():
    assert n_masked(5, 0.5) == 2
    assert n_masked(7, 0.5) == 4


def test_sample_mask_uniform_marginals():
    counts = np.zeros(8)
    for s in range(4000):
        counts[sample_mask(8, 0.25, np.random.default_rng(s)).masked] += 1
    # each index masked with probability 2/8
    np.testing.assert_allclose(counts / 4000, 0.25, atol=0.03)


def test_masked_mse_examples():
    target = np.zeros((2, 8))
    pred = target.copy()
    pred[1] = 0.5
    plan = sample_mask(2, 0.5, np.random.default_rng(0))
    plan = type(plan)(2, np.array([1]), np.array([0]), 0.5)
    loss, grad = masked_mse(pred, target, plan)
    assert loss == 2.0
    np.testing.assert_array_equal(grad[0], 0)
    np.testing.assert_array_equal(grad[1], 1.0)
    zero, g0 = masked_mse(target, target, plan)
    assert zero == 0 and not g0.any()


def test_masked_mse_empty_mask():
    plan = sample_mask(4, 0.0, np.random.default_rng(0))
    with pytest.raises(UndefinedLossError):
        masked_mse(np.zeros((4, 8)), np.zeros((4, 8)), plan)


def test_masked_mse_gradient_finite_difference(rng):
    target = rng.random((6, 8))
    pred = rng.random((6, 8))
    plan = sample_mask(6, 0.5, rng)
    _, grad = masked_mse(pred, target, plan)
    h = 1e-6
    fd = np.zeros_like(pred)
    for idx in np.ndindex(pred.shape):
        p, m = pred.copy(), pred.copy()
        p[idx] += h
        m[idx] -= h
        fd[idx] = (masked_mse(p, target, plan)[0] - masked_mse(m, target, plan)[0]) / (2 * h)
    np.testing.assert_allclose(grad, fd, atol=1e-8)
