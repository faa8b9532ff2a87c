"""Token-sensitivity tracking and diagonal Fisher accumulation.

Both trackers are plain EMAs: token scores follow the squared norm of the
input-embedding gradient per position, and the diagonal Fisher follows the
squared adapter gradient per coordinate (flattened A then B, row-major).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "TokenSensitivityTracker",
    "TokenMask",
    "DiagonalFisher",
    "token_sensitivity",
    "ema_update",
    "topk_mask",
    "fisher_accumulate",
    "retained_count",
]


def token_sensitivity(embed_grads: np.ndarray) -> np.ndarray:
    """Squared L2 norm of the embedding gradient along the last axis."""
    g = np.asarray(embed_grads, dtype=np.float64)
    if g.ndim < 1:
        raise ValueError("embedding gradients must have at least one axis")
    return (g * g).sum(axis=-1)


@dataclass
class TokenSensitivityTracker:
    """EMA of per-position token sensitivity; single-owner mutable state."""

    scores: np.ndarray
    rho: float = 0.9

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must lie in [0, 1)")

    @classmethod
    def zeros(cls, shape, rho: float = 0.9) -> "TokenSensitivityTracker":
        return cls(np.zeros(shape), rho)


def ema_update(tracker: TokenSensitivityTracker, values) -> TokenSensitivityTracker:
    """scores <- rho * scores + (1 - rho) * values, in place."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape != tracker.scores.shape:
        raise ValueError(
            f"shape mismatch: tracker {tracker.scores.shape}, values {values.shape}"
        )
    if values.min(initial=0.0) < 0:
        raise ValueError("sensitivity values must be nonnegative")
    tracker.scores *= tracker.rho
    tracker.scores += (1.0 - tracker.rho) * values
    return tracker


@dataclass
class TokenMask:
    """Binary keep/drop indicator per target position."""

    z: np.ndarray
    retained: int

    def fraction(self) -> float:
        return self.retained / self.z.size if self.z.size else 1.0


def retained_count(keep_ratio: float, maskable: int) -> int:
    """Number of positions a keep ratio retains: ceil(ratio * maskable)."""
    if not 0.0 < keep_ratio <= 1.0:
        raise ValueError("keep ratio must lie in (0, 1]")
    return math.ceil(keep_ratio * maskable)


def topk_mask(scores: np.ndarray, k: int) -> TokenMask:
    """Keep exactly the k largest scores; ties resolve to the lower index.

    Positions scored -inf (padding) are never retained and do not count as
    maskable, so k must not exceed the number of finite entries.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1:
        raise ValueError("scores must be 1-d")
    if np.isnan(scores).any():
        raise ValueError("scores contain NaN")
    maskable = int(np.isfinite(scores).sum())
    if not 0 <= k <= maskable:
        raise ValueError(f"k={k} out of range for {maskable} maskable positions")
    z = np.zeros(scores.shape, dtype=np.int8)
    if k:
        # stable sort on the negated scores keeps original order among ties
        order = np.argsort(-scores, kind="stable")
        z[order[:k]] = 1
    return TokenMask(z, k)


@dataclass
class DiagonalFisher:
    """EMA of squared adapter gradients, one entry per flattened coordinate."""

    values: np.ndarray
    rho: float = 0.9

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("Fisher diagonal must be 1-d")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must lie in [0, 1)")

    @classmethod
    def zeros(cls, dim: int, rho: float = 0.9) -> "DiagonalFisher":
        return cls(np.zeros(dim), rho)


def fisher_accumulate(fisher: DiagonalFisher, grads: np.ndarray) -> DiagonalFisher:
    """values <- rho * values + (1 - rho) * grads**2, in place."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != fisher.values.shape:
        raise ValueError(
            f"shape mismatch: fisher {fisher.values.shape}, grads {grads.shape}"
        )
    fisher.values *= fisher.rho
    fisher.values += (1.0 - fisher.rho) * grads * grads
    return fisher
