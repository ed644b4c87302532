"""Mask sampling for the two branches.

Masks are integer arrays of 0/1 with ``1 = masked``, shaped ``(L,)`` or
``(B, L)``.  Branch 1 uses uniform random masks; branch 2 is derived from the
branch-1 mask and its per-patch reconstruction losses.

Counting rule: ``len_keep = int(L * (1 - ratio))`` visible patches, the same
truncation the reference pseudocode uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, ShapeError


def keep_count(length, ratio):
    return int(length * (1 - ratio))


def _check_ratio(ratio):
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"mask ratio must lie in (0, 1), got {ratio}")


def random_mask(length, ratio, rng, batch=None):
    """Uniformly random mask with ``length - len_keep`` masked patches."""
    _check_ratio(ratio)
    if length < 2:
        raise ConfigError(f"need at least 2 patches, got {length}")
    keep = keep_count(length, ratio)
    shape = (length,) if batch is None else (batch, length)
    noise = rng.random(shape)
    order = np.argsort(noise, axis=-1, kind="stable")
    mask = np.ones(shape, dtype=np.int8)
    np.put_along_axis(mask, order[..., :keep], 0, axis=-1)
    return mask


def adaptive_mask(m1, loss, ratio, overlap_ratio=0.5, overlap_rng=None):
    """Build the branch-2 mask from the branch-1 mask and patch losses.

    The branch-1 mask is inverted, the highest-loss patches among
    ``masked(m1)`` are masked again (enough to restore the masking ratio),
    and ``int(len_keep * overlap_ratio)`` patches that were visible in ``m1``
    stay visible.  Loss ranking uses a stable ascending sort, so ties go to
    the higher index.  Overlap patches are the lowest-index visible patches
    of ``m1`` unless ``overlap_rng`` is given, in which case they are drawn
    uniformly at random.

    Works row-wise on ``(B, L)`` inputs.
    """
    m1 = np.asarray(m1)
    loss = np.asarray(loss, dtype=np.float64)
    if m1.shape != loss.shape:
        raise ShapeError(f"mask shape {m1.shape} does not match loss shape {loss.shape}")
    if ratio < 0.5 or ratio >= 1.0:
        raise ConfigError(f"adaptive masking needs 0.5 <= ratio < 1, got {ratio}")
    if not 0.0 <= overlap_ratio <= 1.0:
        raise ConfigError(f"overlap ratio must lie in [0, 1], got {overlap_ratio}")
    if not np.all(np.isfinite(loss)):
        raise ContractError("patch losses must be finite")
    squeeze = m1.ndim == 1
    m1b = np.atleast_2d(m1).astype(np.int8)
    lossb = np.atleast_2d(loss)
    length = m1b.shape[-1]
    keep = keep_count(length, ratio)
    loss_len = length - 2 * keep
    overlap_len = int(keep * overlap_ratio)
    n_select = loss_len + overlap_len

    m2 = 1 - m1b
    for row in range(m1b.shape[0]):
        masked = m1b[row] == 1
        if masked.sum() != length - keep:
            raise ContractError(
                f"row {row}: m1 masks {int(masked.sum())} patches, expected {length - keep} for ratio {ratio}"
            )
        # visible patches sort first, masked ones by loss; lexsort is stable
        order = np.lexsort((lossb[row] * masked, masked))
        if n_select:
            m2[row, order[length - n_select:]] = 1
        if overlap_len:
            if overlap_rng is None:
                vis = np.argsort(m1b[row], kind="stable")[:overlap_len]
            else:
                vis = overlap_rng.choice(np.flatnonzero(~masked), overlap_len, replace=False)
            m2[row, vis] = 0
    return m2[0] if squeeze else m2


def random_overlap_mask(m1, ratio, overlap_ratio, rng):
    """Same exchange as :func:`adaptive_mask`, with uniformly random re-masking."""
    m1 = np.asarray(m1)
    return adaptive_mask(m1, rng.random(m1.shape), ratio, overlap_ratio)


@dataclass
class MaskPair:
    m1: np.ndarray
    m2: np.ndarray
    patch_losses: np.ndarray
    ratio: float
    overlap_ratio: float = 0.5


@dataclass
class MaskStats:
    visible_1: int
    visible_2: int
    overlap: int
    mean_loss_masked_2: float
    mean_loss_visible_2: float


def mask_stats(pair):
    """Summary of one (unbatched) mask pair, restricted to ``masked(m1)`` for the loss means."""
    m1 = np.asarray(pair.m1).astype(bool)
    m2 = np.asarray(pair.m2).astype(bool)
    loss = np.asarray(pair.patch_losses, dtype=np.float64)
    remasked = m1 & m2
    revealed = m1 & ~m2
    return MaskStats(
        visible_1=int((~m1).sum()),
        visible_2=int((~m2).sum()),
        overlap=int((~m1 & ~m2).sum()),
        mean_loss_masked_2=float(loss[remasked].mean()) if remasked.any() else 0.0,
        mean_loss_visible_2=float(loss[revealed].mean()) if revealed.any() else 0.0,
    )


def check_pair(pair, adaptive=True):
    """Raise :class:`ContractError` if a pair violates the pairing invariants."""
    m1 = np.atleast_2d(pair.m1).astype(bool)
    m2 = np.atleast_2d(pair.m2).astype(bool)
    loss = np.atleast_2d(pair.patch_losses)
    length = m1.shape[-1]
    keep = keep_count(length, pair.ratio)
    overlap_len = int(keep * pair.overlap_ratio)
    for row in range(m1.shape[0]):
        a, b = m1[row], m2[row]
        if (~a).sum() != keep or (~b).sum() != keep:
            raise ContractError(f"row {row}: visible counts {(~a).sum()}, {(~b).sum()} != {keep}")
        if (~a & ~b).sum() != overlap_len:
            raise ContractError(f"row {row}: overlap {(~a & ~b).sum()} != {overlap_len}")
        if adaptive:
            revealed = np.flatnonzero(a & ~b)
            remasked = np.flatnonzero(a & b)
            if revealed.size and remasked.size and loss[row, revealed].max() > loss[row, remasked].min():
                raise ContractError(f"row {row}: a revealed patch outranks a re-masked patch")
