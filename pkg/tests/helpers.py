"""Oracles shared between module tests and the acceptance suite."""

import numpy as np

from fstq.codec import (
    CostModel,
    quantizer_error_table,
)
from fstq.toy_model import LoraAdapter, ToyModel, batch_backward, flatten_adapter, sgd_step

WIDTH_CHOICES = (0, 2, 4, 16)


def plain_local_sgd_delta(model, shard, steps, eta, clip=None):
    """Full-loss local SGD, the uncompressed reference for one client."""
    a0, b0 = model.adapter.a.copy(), model.adapter.b.copy()
    local = ToyModel(
        model.embeddings, model.w0, LoraAdapter(a0.copy(), b0.copy(), model.adapter.alpha_lora)
    )
    by_len: dict[int, list] = {}
    for it in shard:
        by_len.setdefault(len(it), []).append(it.tokens)
    batches = [np.array(v) for _, v in sorted(by_len.items())]
    n = sum(b.shape[0] for b in batches)
    for _ in range(steps):
        ga = np.zeros_like(local.adapter.a)
        gb = np.zeros_like(local.adapter.b)
        for tokens in batches:
            _, g1, g2, _ = batch_backward(local, tokens)
            ga += g1
            gb += g2
        new_a, new_b = sgd_step(
            (local.adapter.a, local.adapter.b), (ga / n, gb / n), eta, clip
        )
        local.adapter.a, local.adapter.b = new_a, new_b
    return flatten_adapter(local.adapter.a - a0, local.adapter.b - b0)


def brute_force_objective(
    delta: np.ndarray,
    fisher: np.ndarray,
    groups,
    b_max: int,
    lam: float,
    cost_model: CostModel | None = None,
) -> tuple[float, np.ndarray]:
    """Exhaustive minimum of bits + lam * Fisher distortion over 4^d assignments.

    Independent of the greedy code path: enumerates every width vector as one
    big array, prices the sections the same way the wire does (index + tag per
    retained coordinate, byte-aligned value segments, one scale per populated
    (group, width) pair, fixed header), and scores distortion from the same
    error table the allocator sees.  Only budget-feasible assignments compete;
    ties go to the lexicographically first combination.
    """
    cm = cost_model or CostModel()
    d = delta.size
    err = quantizer_error_table(delta, groups)
    sq_f = np.asarray(fisher, dtype=np.float64)[:, None] * err * err  # (d, 4)

    # all 4^d width combinations, slot-encoded 0..3 for widths (0, 2, 4, 16)
    k = 4**d
    codes = np.arange(k)
    slots = np.empty((k, d), dtype=np.int64)
    for j in range(d):
        slots[:, d - 1 - j] = (codes >> (2 * j)) & 3

    n2 = (slots == 1).sum(axis=1)
    n4 = (slots == 2).sum(axis=1)
    n16 = (slots == 3).sum(axis=1)
    retained = n2 + n4 + n16
    pairs = np.zeros(k, dtype=np.int64)
    for g in groups:
        span = slots[:, g.start : g.stop]
        for s in (1, 2, 3):
            pairs += (span == s).any(axis=1)
    bits = cm.total_bits(retained, n2, n4, n16, pairs)

    dist = sq_f[np.arange(d)[None, :], slots].sum(axis=1)
    obj = np.where(bits <= b_max, bits + lam * dist, np.inf)
    best = int(np.argmin(obj))
    widths = np.array(WIDTH_CHOICES, dtype=np.int64)[slots[best]]
    return float(obj[best]), widths
