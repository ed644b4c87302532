"""Pixel reconstruction, smooth-L1 feature regression and their combination."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, NumericError, ShapeError
from .tensor import Tensor


@dataclass
class LossReport:
    L_p1: float
    L_p2: float
    L_f: float
    L_total: float
    per_patch_losses_1: np.ndarray
    per_patch_losses_2: np.ndarray | None = None


def pixel_loss(pred, target, mask):
    """Mean squared error averaged over masked patches only.

    Returns the scalar loss and the detached per-patch MSE, which is zero at
    visible positions.
    """
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    mask = np.asarray(mask, dtype=bool).reshape(pred.shape[:-1])
    n_masked = int(mask.sum())
    if n_masked == 0:
        raise ContractError("pixel loss needs at least one masked patch")
    diff = pred - Tensor(target.astype(pred.dtype, copy=False))
    per_patch = T.mean(diff * diff, axis=-1)
    weights = Tensor(mask.astype(pred.dtype))
    scalar = T.scale(T.sum_(per_patch * weights), 1.0 / n_masked)
    detached = np.where(mask, per_patch.data, 0).astype(per_patch.dtype)
    return scalar, detached


def smooth_l1(pred, target, beta=2.0):
    """Elementwise smooth L1 (quadratic inside |d| <= beta), averaged over all entries."""
    if beta <= 0:
        raise ConfigError(f"beta must be positive, got {beta}")
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    diff = pred - T.detach(target)
    a = T.abs_(diff)
    quad = T.scale(diff * diff, 0.5 / beta)
    lin = a - 0.5 * beta
    return T.mean(T.where(a.data <= beta, quad, lin))


def total_loss(l_p1, l_p2, l_f, alpha=1.0, step=None):
    """``l_p1 + l_p2 + alpha * l_f``; raises :class:`NumericError` on non-finite input."""
    for label, v in (("L_p1", l_p1), ("L_p2", l_p2), ("L_f", l_f)):
        val = v.item() if isinstance(v, Tensor) else float(v)
        if not math.isfinite(val):
            where = "" if step is None else f" at step {step}"
            raise NumericError(f"{label} is not finite{where}", step=step)
    if not isinstance(l_p1, Tensor) and not isinstance(l_p2, Tensor) and not isinstance(l_f, Tensor):
        return l_p1 + l_p2 + alpha * l_f
    parts = [T._as_tensor(l_p1), T._as_tensor(l_p2), T._as_tensor(l_f)]
    return parts[0] + parts[1] + T.scale(parts[2], alpha)
