"""Error metrics over in-domain grid points."""

from __future__ import annotations

import numpy as np

__all__ = ["mse", "smape", "SMAPE_EPS"]

SMAPE_EPS = 1e-8


def _prep(pred, ref, mask):
    pred = np.asarray(pred, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {ref.shape}")
    if mask is None:
        mask = np.ones(pred.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != pred.shape:
        raise ValueError("mask shape differs from the fields")
    if not mask.any():
        raise ValueError("empty mask")
    return pred[mask], ref[mask]


def mse(pred, ref, mask=None) -> float:
    p, r = _prep(pred, ref, mask)
    return float(np.mean((p - r) ** 2))


def smape(pred, ref, mask=None, eps: float = SMAPE_EPS) -> float:
    """100 * mean(2|p - r| / (|p| + |r| + eps)), in [0, 200]."""
    p, r = _prep(pred, ref, mask)
    # the ratio is at most 2 exactly; rounding in |p - r| can push it one ulp over
    ratio = np.minimum(2.0 * np.abs(p - r) / (np.abs(p) + np.abs(r) + eps), 2.0)
    return float(100.0 * np.mean(ratio))
