import numpy as np
import pytest

from dama.errors import ShapeError
from dama.patching import PatchGrid, patch_targets, patchify, unpatchify


def test_full_size_grid_has_64_patches():
    assert patchify(np.zeros((128, 128, 7)), 16).n == 64


def test_desk_grid_has_64_patches():
    assert patchify(np.zeros((64, 64, 7)), 8).n == 64


@pytest.mark.parametrize("size", [32, 64, 128])
def test_round_trip(size):
    img = np.random.default_rng(size).random((size, size, 7)).astype(np.float32)
    back = unpatchify(patchify(img, 8))
    assert back.tobytes() == img.tobytes()


def test_round_trip_batched():
    img = np.random.default_rng(0).random((3, 16, 24, 2))
    np.testing.assert_array_equal(unpatchify(patchify(img, 4)), img)


def test_indivisible_rejected():
    with pytest.raises(ShapeError):
        patchify(np.zeros((30, 32, 7)), 8)


def test_inconsistent_grid_rejected():
    grid = patchify(np.zeros((16, 16, 1)), 4)
    with pytest.raises(ShapeError):
        unpatchify(PatchGrid(grid.tokens[:-1], 4, 1, grid.grid))


def test_token_ordering():
    h, w, p = 16, 24, 4
    img = np.zeros((h, w, 2))
    for r in range(h // p):
        for c in range(w // p):
            img[r * p:(r + 1) * p, c * p:(c + 1) * p, :] = r * 100 + c
    grid = patchify(img, p)
    for i in range(grid.n):
        assert np.all(grid.tokens[i] == (i // (w // p)) * 100 + i % (w // p))


def test_within_patch_layout_row_major_channel_last():
    img = np.arange(4 * 4 * 2, dtype=float).reshape(4, 4, 2)
    tok = patchify(img, 2).tokens[0]
    np.testing.assert_array_equal(tok, img[:2, :2, :].reshape(-1))


def test_raw_targets_equal_tokens():
    grid = patchify(np.random.default_rng(1).random((16, 16, 3)), 4)
    assert patch_targets(grid) is grid.tokens


def test_normalized_constant_patch_is_zero():
    grid = patchify(np.full((8, 8, 2), 0.7), 4)
    np.testing.assert_array_equal(patch_targets(grid, normalize=True), 0.0)


def test_normalized_targets_zero_mean():
    grid = patchify(np.random.default_rng(2).random((32, 32, 7)), 8)
    t = patch_targets(grid, normalize=True)
    assert np.abs(t.mean(axis=-1)).max() < 1e-5
