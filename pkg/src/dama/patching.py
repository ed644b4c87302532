"""Image <-> patch-token conversion.

Patches are ordered row-major over the grid; inside a patch the layout is
row-major with channels last, so token ``i`` covers grid cell
``(i // (W/P), i % (W/P))``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


@dataclass
class PatchGrid:
    tokens: np.ndarray  # (..., N, P*P*C)
    patch: int
    channels: int
    grid: tuple  # (H/P, W/P)

    @property
    def n(self):
        return self.tokens.shape[-2]


def patchify(img, patch):
    """Split ``(..., H, W, C)`` images into a :class:`PatchGrid`."""
    img = np.asarray(img)
    if img.ndim < 3:
        raise ShapeError(f"expected (..., H, W, C) image, got shape {img.shape}")
    *lead, h, w, c = img.shape
    if patch <= 0 or h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} is not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    x = img.reshape(*lead, gh, patch, gw, patch, c)
    nl = len(lead)
    x = np.moveaxis(x, nl + 2, nl + 1)  # (..., gh, gw, P, P, C)
    tokens = x.reshape(*lead, gh * gw, patch * patch * c)
    return PatchGrid(tokens=tokens, patch=patch, channels=c, grid=(gh, gw))


def unpatchify(grid):
    gh, gw = grid.grid
    p, c = grid.patch, grid.channels
    *lead, n, dim = grid.tokens.shape
    if n != gh * gw or dim != p * p * c:
        raise ShapeError(
            f"tokens {grid.tokens.shape} inconsistent with grid {grid.grid}, patch {p}, channels {c}"
        )
    x = grid.tokens.reshape(*lead, gh, gw, p, p, c)
    nl = len(lead)
    x = np.moveaxis(x, nl + 1, nl + 2)  # (..., gh, P, gw, P, C)
    return x.reshape(*lead, gh * p, gw * p, c)


def patch_targets(grid, normalize=False, eps=1e-6):
    """Per-patch reconstruction targets, optionally standardized per patch."""
    tokens = grid.tokens if isinstance(grid, PatchGrid) else np.asarray(grid)
    if not normalize:
        return tokens
    mu = tokens.mean(axis=-1, keepdims=True)
    var = tokens.var(axis=-1, keepdims=True)
    return (tokens - mu) / np.sqrt(var + eps)
