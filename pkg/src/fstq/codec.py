"""Mixed-precision sparse update codec.

Coordinates of a flattened adapter delta are scored by Fisher-weighted squared
magnitude, assigned a bit width from {0, 2, 4, 16} (0 = pruned; a 32-bit
lossless debug width exists for equivalence testing), quantized per
(group, width) with a shared max-abs scale, and serialized into a compact
big-endian wire format.  Two allocation policies are provided (percentile
thresholds and a budget-constrained greedy), plus QSGD and top-k baselines
that reuse the same wire format.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "MAGIC",
    "WIRE_VERSION",
    "MODE_TAGGED",
    "MODE_LOSSLESS",
    "HEADER_BITS",
    "QuantGroup",
    "lora_groups",
    "CompressionPolicyConfig",
    "CostModel",
    "BitAllocation",
    "SparseUpdateMessage",
    "PayloadBreakdown",
    "CompressResult",
    "MessageDecodeError",
    "BadMagicError",
    "UnknownVersionError",
    "UnsupportedModeError",
    "TruncatedPayloadError",
    "ReservedTagError",
    "IndexOrderError",
    "importance_scores",
    "continuous_bitwidth",
    "percentile_allocate",
    "greedy_budget_allocate",
    "quantizer_error_table",
    "allocation_bits",
    "allocation_objective",
    "quantize",
    "build_message",
    "empty_message",
    "dequantize_message",
    "pack",
    "unpack",
    "payload_bits",
    "fisher_distortion",
    "qsgd_compress",
    "topk_compress",
    "baseline_compress",
    "compress_update",
    "canonical_test_vector",
    "round_half_away",
    "q_max",
]

MAGIC = 0x46535451  # "FSTQ"
WIRE_VERSION = 1
MODE_TAGGED = 0  # sparse indices + 2-bit width tags + packed integer values
MODE_LOSSLESS = 1  # sparse indices + raw float32 values (debug / reference)

_HEADER_FMT = ">IHBBIIHH"  # magic, version, mode, pad, d, retained, groups, reserved
HEADER_BITS = struct.calcsize(_HEADER_FMT) * 8  # 160

INDEX_BITS = 32
TAG_BITS = 2
SCALE_BITS = 32

CODED_WIDTHS = (2, 4, 16)  # value segments are emitted in order 16, 4, 2
_TAG_FOR_WIDTH = {2: 0b01, 4: 0b10, 16: 0b11}
_WIDTH_FOR_TAG = {v: k for k, v in _TAG_FOR_WIDTH.items()}
_WIDTH_SLOT = {2: 0, 4: 1, 16: 2}


class MessageDecodeError(Exception):
    """Base class for wire-format decode failures."""


class BadMagicError(MessageDecodeError):
    pass


class UnknownVersionError(MessageDecodeError):
    pass


class UnsupportedModeError(MessageDecodeError):
    pass


class TruncatedPayloadError(MessageDecodeError):
    pass


class ReservedTagError(MessageDecodeError):
    pass


class IndexOrderError(MessageDecodeError):
    pass


@dataclass(frozen=True)
class QuantGroup:
    """Half-open coordinate span [start, stop) sharing one scale per width."""

    group_id: int
    start: int
    stop: int

    def __post_init__(self):
        if self.start < 0 or self.stop <= self.start:
            raise ValueError(f"bad group span [{self.start}, {self.stop})")


def lora_groups(rank: int, d_in: int, d_out: int) -> list[QuantGroup]:
    """One group per adapter factor: A occupies [0, r*d_in), B the rest."""
    n_a = rank * d_in
    return [QuantGroup(0, 0, n_a), QuantGroup(1, n_a, n_a + d_out * rank)]


def _validate_groups(groups, d: int) -> list[QuantGroup]:
    groups = list(groups)
    if not groups:
        raise ValueError("need at least one quantization group")
    pos = 0
    for i, g in enumerate(groups):
        if g.group_id != i:
            raise ValueError("group ids must be consecutive from 0")
        if g.start != pos:
            raise ValueError("groups must partition the coordinate space contiguously")
        pos = g.stop
    if pos != d:
        raise ValueError(f"groups cover {pos} coordinates, expected {d}")
    return groups


def _group_of_indices(groups, indices: np.ndarray) -> np.ndarray:
    starts = np.array([g.start for g in groups], dtype=np.int64)
    return np.searchsorted(starts, indices, side="right") - 1


@dataclass
class CompressionPolicyConfig:
    """Knobs for the uplink compressor; mode picks the allocation family."""

    mode: str = "percentile"  # percentile | budget | lossless | qsgd | topk
    lam: float = 1.0  # rate-distortion tradeoff; upgrades must earn 1/lam
    p_high: float = 99.0
    p_mid: float = 90.0
    p_low: float = 50.0
    b_max: int | None = None  # total message bit budget (budget mode)
    epsilon_scale: float = 1e-12
    qsgd_levels: int = 7
    qsgd_width: int = 4
    topk_fraction: float = 0.1

    def __post_init__(self):
        if self.mode not in ("percentile", "budget", "lossless", "qsgd", "topk"):
            raise ValueError(f"unknown compression mode {self.mode!r}")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if not 0.0 < self.p_low < self.p_mid < self.p_high < 100.0:
            raise ValueError("percentiles must satisfy 0 < low < mid < high < 100")
        if self.b_max is not None and self.b_max < 0:
            raise ValueError("bit budget must be nonnegative")
        if not self.epsilon_scale > 0:
            raise ValueError("scale epsilon must be positive")
        if self.qsgd_width not in (4, 16):
            raise ValueError("qsgd width must be 4 or 16")
        if not 1 <= self.qsgd_levels <= q_max(self.qsgd_width):
            raise ValueError("qsgd levels must fit the configured width")
        if not 0.0 < self.topk_fraction <= 1.0:
            raise ValueError("topk fraction must lie in (0, 1]")


@dataclass(frozen=True)
class CostModel:
    """Bit accounting used by the budgeted allocator.

    The default reproduces the wire format exactly (header, byte-aligned
    segments, one 32-bit scale per active (group, width) pair).  Reduced
    models exist for pedagogical examples that count only per-coordinate
    index/tag/value bits.
    """

    index_bits: int = INDEX_BITS
    tag_bits: int = TAG_BITS
    include_scale_bits: bool = True
    include_header: bool = True
    byte_align: bool = True

    def _align(self, bits):
        if self.byte_align:
            return ((np.asarray(bits) + 7) // 8) * 8
        return np.asarray(bits)

    def total_bits(self, retained, n2, n4, n16, pairs):
        """Message size for the given section populations (vectorized)."""
        bits = self.index_bits * np.asarray(retained)
        bits = bits + self._align(self.tag_bits * np.asarray(retained))
        bits = bits + self._align(2 * np.asarray(n2))
        bits = bits + self._align(4 * np.asarray(n4))
        bits = bits + self._align(16 * np.asarray(n16))
        if self.include_scale_bits:
            bits = bits + SCALE_BITS * np.asarray(pairs)
        if self.include_header:
            bits = bits + HEADER_BITS
        return bits


@dataclass
class BitAllocation:
    """Per-coordinate bit widths drawn from {0, 2, 4, 16} (32 = lossless debug)."""

    widths: np.ndarray
    infeasible_budget: bool = False

    def __post_init__(self):
        self.widths = np.asarray(self.widths, dtype=np.int16)
        bad = ~np.isin(self.widths, (0, 2, 4, 16, 32))
        if bad.any():
            raise ValueError(f"illegal bit width {self.widths[bad][0]}")

    def retained_indices(self) -> np.ndarray:
        return np.flatnonzero(self.widths > 0)


def q_max(width: int) -> int:
    """Largest quantizer level for a signed width: 2**(b-1) - 1."""
    if width < 2:
        raise ValueError("quantizer width must be at least 2 bits")
    return (1 << (width - 1)) - 1


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Deterministic round-to-nearest with halves away from zero."""
    x = np.asarray(x, dtype=np.float64)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def importance_scores(fisher_values: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Fisher-weighted squared delta per coordinate."""
    f = np.asarray(fisher_values, dtype=np.float64)
    d = np.asarray(delta, dtype=np.float64)
    if f.shape != d.shape or f.ndim != 1:
        raise ValueError("fisher and delta must be 1-d and the same length")
    if f.min(initial=0.0) < 0:
        raise ValueError("Fisher values must be nonnegative")
    return f * d * d


def continuous_bitwidth(u: np.ndarray, lam: float) -> np.ndarray:
    """Idealized real-valued width 0.5*log2(u/lambda), floored at zero."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    u = np.asarray(u, dtype=np.float64)
    if u.min(initial=0.0) < 0:
        raise ValueError("importance scores must be nonnegative")
    with np.errstate(divide="ignore"):
        b = 0.5 * np.log2(u / lam)
    return np.maximum(b, 0.0)


def _nearest_rank(values_sorted: np.ndarray, pct: float) -> float:
    """Nearest-rank percentile: ascending value at index ceil(p/100 * n)."""
    n = values_sorted.size
    idx = min(max(math.ceil(pct / 100.0 * n), 1), n)
    return float(values_sorted[idx - 1])


def percentile_allocate(u: np.ndarray, policy: CompressionPolicyConfig) -> BitAllocation:
    """Threshold widths by importance percentiles (16/4/2/pruned).

    Degenerate case: if every score is equal (including all-zero), every
    coordinate clears the high threshold and gets 16 bits.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 1 or u.size == 0:
        raise ValueError("importance vector must be 1-d and non-empty")
    if u.min() < 0 or not np.all(np.isfinite(u)):
        raise ValueError("importance scores must be finite and nonnegative")
    s = np.sort(u)
    hi = _nearest_rank(s, policy.p_high)
    mid = _nearest_rank(s, policy.p_mid)
    lo = _nearest_rank(s, policy.p_low)
    widths = np.zeros(u.size, dtype=np.int16)
    widths[u >= lo] = 2
    widths[u >= mid] = 4
    widths[u >= hi] = 16
    return BitAllocation(widths)


def wire_scale(max_abs: float, width: int, eps: float = 1e-12) -> float:
    """Transmitted quantizer scale: float32, rounded toward zero.

    Quantization and dequantization both use the exact value the wire carries,
    so the s/2 reconstruction bound holds with the decoded scale.  Rounding
    toward zero (instead of to nearest) keeps every quantization boundary at
    or below its real-arithmetic position, so exact half-points like
    -3.5 still round away from zero rather than being flipped by the float32
    representation gap.
    """
    s = max_abs / (q_max(width) + eps)
    s32 = np.float32(s)
    # compare in float64: float32 > python-float would compare in float32
    if float(s32) > s:
        s32 = np.nextafter(s32, np.float32(0.0))
    return float(s32)


def quantizer_error_table(
    delta: np.ndarray, groups, eps: float = 1e-12
) -> np.ndarray:
    """Absolute reconstruction error per coordinate at widths (0, 2, 4, 16).

    Uses the group-wide max-abs scale at each width, which makes the table
    independent of any particular allocation; the allocator and the Lagrangian
    objective both rely on that separability.  Column order follows
    (0, 2, 4, 16).
    """
    delta = np.asarray(delta, dtype=np.float64)
    groups = _validate_groups(groups, delta.size)
    err = np.empty((delta.size, 4))
    err[:, 0] = np.abs(delta)
    for g in groups:
        span = slice(g.start, g.stop)
        m = float(np.max(np.abs(delta[span]), initial=0.0))
        for col, w in enumerate(CODED_WIDTHS, start=1):
            qm = q_max(w)
            s = wire_scale(m, w, eps)
            if s == 0.0:
                err[span, col] = np.abs(delta[span])
            else:
                q = np.clip(round_half_away(delta[span] / s), -qm, qm)
                err[span, col] = np.abs(delta[span] - s * q)
    return err


def allocation_bits(widths: np.ndarray, groups, cost_model: CostModel | None = None) -> int:
    """Total message bits implied by an allocation under a cost model."""
    cm = cost_model or CostModel()
    widths = np.asarray(widths)
    groups = _validate_groups(groups, widths.size)
    retained = int((widths > 0).sum())
    n2 = int((widths == 2).sum())
    n4 = int((widths == 4).sum())
    n16 = int((widths == 16).sum())
    pairs = 0
    for g in groups:
        span = widths[g.start : g.stop]
        pairs += sum(1 for w in CODED_WIDTHS if (span == w).any())
    return int(cm.total_bits(retained, n2, n4, n16, pairs))


def allocation_objective(
    delta: np.ndarray,
    fisher_values: np.ndarray,
    widths: np.ndarray,
    groups,
    lam: float,
    cost_model: CostModel | None = None,
    eps: float = 1e-12,
) -> float:
    """Lagrangian cost: message bits + lambda * Fisher-weighted distortion."""
    err = quantizer_error_table(delta, groups, eps)
    cols = {0: 0, 2: 1, 4: 2, 16: 3}
    widths = np.asarray(widths)
    picked = err[np.arange(widths.size), [cols[int(w)] for w in widths]]
    f = np.asarray(fisher_values, dtype=np.float64)
    return allocation_bits(widths, groups, cost_model) + lam * float(
        (f * picked * picked).sum()
    )


def _price_sweep_slots(sq, f, lam, cm, gid, group_count, b_max, allowed=None):
    """Width slots (-1..2 over pruned/2/4/16) from a bit-price bisection.

    Every coordinate independently picks the width minimizing
    lam * fisher * err^2 + mu * bits, where the per-coordinate bits are the
    value bits plus the index+tag charge on retention.  mu = 1 prices bits at
    their face value in the Lagrangian objective; larger mu shrinks the
    message, and each coordinate's width is nonincreasing in mu, so bisection
    on the exact encoded size converges to the budget boundary.  `allowed`
    optionally restricts the coded widths on offer; with a single coded width
    the per-coordinate price is nearly exact because every group then carries
    at most one scale.  Returns None when no feasible price is found.
    """
    keep_cost = float(cm.index_bits + cm.tag_bits)
    base = lam * f[:, None] * sq
    if allowed is not None:
        base = base.copy()
        for slot in range(3):
            if slot not in allowed:
                base[:, slot + 1] = np.inf
    price = np.array([0.0, keep_cost + 2, keep_cost + 4, keep_cost + 16])

    def assign(mu):
        return np.argmin(base + mu * price[None, :], axis=1) - 1

    def exact_bits(cur):
        kept = cur >= 0
        retained = int(kept.sum())
        pairs = np.zeros((group_count, 3), dtype=bool)
        if retained:
            pairs[gid[kept], cur[kept]] = True
        return int(
            cm.total_bits(
                retained,
                int((cur == 0).sum()),
                int((cur == 1).sum()),
                int((cur == 2).sum()),
                int(pairs.sum()),
            )
        )

    cur = assign(1.0)
    if exact_bits(cur) <= b_max:
        return cur
    lo, hi = 1.0, 2.0
    for _ in range(200):
        if exact_bits(assign(hi)) <= b_max:
            break
        lo, hi = hi, hi * 4.0
    else:
        return None
    for _ in range(96):
        mid = math.sqrt(lo * hi)
        if exact_bits(assign(mid)) <= b_max:
            hi = mid
        else:
            lo = mid
    return assign(hi)


def greedy_budget_allocate(
    delta: np.ndarray,
    fisher_values: np.ndarray,
    groups,
    b_max: int,
    lam: float,
    cost_model: CostModel | None = None,
    eps: float = 1e-12,
) -> BitAllocation:
    """Budgeted width assignment by greedy width upgrades.

    Every coordinate starts pruned.  A candidate is any move of one
    coordinate to a strictly wider width (a pruned coordinate may enter
    directly at 2, 4 or 16 bits).  Candidates are ranked by Fisher-weighted
    distortion reduction per marginal bit, where the marginal bits are the
    extra value bits plus a one-time index+tag charge on first retention plus
    a one-time scale charge on first use of a (group, width) pair.  Allowing
    direct jumps matters: the 0->2 step often has exactly zero gain (any
    coordinate below half the group max reconstructs to 0 at 2 bits), and a
    rung-by-rung ladder would park such coordinates forever even when 4 or 16
    bits pays for itself.  An upgrade is applied only if the exact message
    size afterwards still fits the budget; the marginal loop stops when
    nothing feasible remains or every remaining ratio falls below 1/lambda.

    One-at-a-time ratio steps have blind spots: emptying a (group, width)
    pair refunds its scale entry only once the last member leaves, and a
    sequentially committed budget can sit on the wrong coordinates with no
    way back.  After the ratio loop converges, a local search therefore
    polishes the allocation against the exact objective
    bits + lambda * distortion: its moves are single-coordinate
    reassignments (wider, narrower, or back to pruned) and bulk moves of an
    entire (group, width) population fused with the best single move
    available afterwards (a population downgrade often pays only through the
    coordinate it frees room for, and each half alone can be uphill).  A
    candidate is applied only when the whole step strictly lowers the
    objective while staying within budget, so the search cannot cycle.
    Bit-price sweeps (see _price_sweep_slots), one unrestricted and
    one per subset of coded widths, contribute alternative seed allocations;
    the same two phases run on every distinct seed and the result with the
    lowest exact objective wins.
    """
    if b_max is None:
        raise ValueError("budget allocation needs a finite bit budget")
    if not lam > 0:
        raise ValueError("lambda must be positive")
    cm = cost_model or CostModel()
    delta = np.asarray(delta, dtype=np.float64)
    f = np.asarray(fisher_values, dtype=np.float64)
    if f.shape != delta.shape:
        raise ValueError("fisher and delta must have the same length")
    groups = _validate_groups(groups, delta.size)
    d = delta.size

    empty_bits = int(cm.total_bits(0, 0, 0, 0, 0))
    if empty_bits > b_max:
        return BitAllocation(np.zeros(d, dtype=np.int16), infeasible_budget=True)

    err = quantizer_error_table(delta, groups, eps)
    sq = err * err
    gid = _group_of_indices(groups, np.arange(d))

    width_bits = np.array([2, 4, 16], dtype=np.int64)
    slots = np.arange(3)
    rows = np.arange(d)
    min_ratio = 1.0 / lam

    def optimize(seed):
        cur = seed.copy()
        kept = cur >= 0
        widths = np.zeros(d, dtype=np.int16)
        widths[kept] = width_bits[cur[kept]]
        retained = int(kept.sum())
        n = np.array([(cur == t).sum() for t in range(3)], dtype=np.int64)
        pair_count = np.zeros((len(groups), 3), dtype=np.int64)
        if retained:
            np.add.at(pair_count, (gid[kept], cur[kept]), 1)

        def move(j, t):
            nonlocal retained
            if cur[j] >= 0:
                pair_count[gid[j], cur[j]] -= 1
                n[cur[j]] -= 1
            else:
                retained += 1
            pair_count[gid[j], t] += 1
            n[t] += 1
            widths[j] = width_bits[t]
            cur[j] = t

        def marginal_upgrades():
            while True:
                # candidate (j, t): move coordinate j to slot t > cur[j]
                valid = slots[None, :] > cur[:, None]
                if not valid.any():
                    return
                gain = f[:, None] * (sq[rows, cur + 1][:, None] - sq[:, 1:])
                first_keep = cur < 0
                cur_bits = np.where(
                    first_keep, 0, width_bits[np.maximum(cur, 0)]
                )
                new_pair = pair_count[gid] == 0
                rank_cost = (width_bits[None, :] - cur_bits[:, None]).astype(
                    np.float64
                )
                rank_cost += (cm.index_bits + cm.tag_bits) * first_keep[:, None]
                if cm.include_scale_bits:
                    rank_cost += SCALE_BITS * new_pair

                # exact message size if the candidate were applied
                r_after = retained + first_keep[:, None]
                vacated = (cur[:, None] == slots[None, :]) & ~first_keep[
                    :, None
                ]
                n_after = n[None, None, :] - vacated[:, None, :] + (
                    slots[None, :, None] == slots[None, None, :]
                )
                freed = (cur >= 0) & (pair_count[gid, np.maximum(cur, 0)] == 1)
                pairs_after = (
                    int(pair_count.astype(bool).sum())
                    + new_pair.astype(np.int64)
                    - freed.astype(np.int64)[:, None]
                )
                bits_after = cm.total_bits(
                    r_after,
                    n_after[:, :, 0],
                    n_after[:, :, 1],
                    n_after[:, :, 2],
                    pairs_after,
                )

                # valid candidates always cost >= 2 bits; dummy divisor else
                ratio = np.where(valid, gain, -np.inf) / np.where(
                    valid, rank_cost, 1.0
                )
                eligible = valid & (bits_after <= b_max) & (ratio >= min_ratio)
                if not eligible.any():
                    return
                flat = int(np.argmax(np.where(eligible, ratio, -np.inf)))
                move(*divmod(flat, 3))

        def prune(j):
            nonlocal retained
            pair_count[gid[j], cur[j]] -= 1
            n[cur[j]] -= 1
            retained -= 1
            widths[j] = 0
            cur[j] = -1

        def best_single_move(base_bits, base_pairs):
            """Most objective-lowering reassignment of one coordinate."""
            base_col = sq[rows, cur + 1]
            first_keep = cur < 0
            vacated = (cur[:, None] == slots[None, :]) & ~first_keep[:, None]
            n_after = n[None, None, :] - vacated[:, None, :] + (
                slots[None, :, None] == slots[None, None, :]
            )
            freed = (cur >= 0) & (pair_count[gid, np.maximum(cur, 0)] == 1)
            new_pair = pair_count[gid] == 0
            pairs_after = (
                base_pairs
                + new_pair.astype(np.int64)
                - freed.astype(np.int64)[:, None]
            )
            bits_after = cm.total_bits(
                retained + first_keep[:, None],
                n_after[:, :, 0],
                n_after[:, :, 1],
                n_after[:, :, 2],
                pairs_after,
            )
            dobj = (bits_after - base_bits) - lam * f[:, None] * (
                base_col[:, None] - sq[:, 1:]
            )
            ok = (slots[None, :] != cur[:, None]) & (bits_after <= b_max)
            dobj = np.where(ok, dobj, np.inf)

            # dropping a retained coordinate back to pruned
            n_drop = n[None, :] - vacated_any(first_keep)
            bits_drop = cm.total_bits(
                retained - 1, n_drop[:, 0], n_drop[:, 1], n_drop[:, 2],
                base_pairs - freed.astype(np.int64),
            )
            dobj_drop = (bits_drop - base_bits) - lam * f * (
                base_col - sq[:, 0]
            )
            dobj_drop = np.where(~first_keep, dobj_drop, np.inf)

            flat = int(np.argmin(dobj))
            best_move = (float(dobj.flat[flat]), divmod(flat, 3))
            j_drop = int(np.argmin(dobj_drop))
            if dobj_drop[j_drop] < best_move[0]:
                best_move = (float(dobj_drop[j_drop]), (j_drop, -1))
            return best_move

        def vacated_any(first_keep):
            out = np.zeros((d, 3), dtype=np.int64)
            kept_rows = np.flatnonzero(~first_keep)
            out[kept_rows, cur[kept_rows]] = 1
            return out

        def best_bulk_move(base_bits):
            """Bulk (group, width) reassignment plus its best follow-up move.

            A population downgrade often pays only through the coordinate it
            frees room for, and that entry alone can be uphill too, so the
            pair is scored jointly.  The bulk half is applied tentatively,
            the standard single-move scan runs on the intermediate state, and
            everything is rolled back before the next candidate.  The bulk
            delta is accumulated incrementally (never as a difference of two
            full objectives, whose rounding noise at large lambda would swamp
            the acceptance gate).  follow is None when the bulk move is best
            taken alone.
            """
            best = (np.inf, None)
            for gi in range(len(groups)):
                for src in range(3):
                    if pair_count[gi, src] == 0:
                        continue
                    members = np.flatnonzero((gid == gi) & (cur == src))
                    for tgt in (-1, 0, 1, 2):
                        if tgt == src:
                            continue
                        gain = float(
                            (
                                f[members]
                                * (sq[members, src + 1] - sq[members, tgt + 1])
                            ).sum()
                        )
                        for j in members.tolist():
                            if tgt < 0:
                                prune(j)
                            else:
                                move(j, tgt)
                        pairs_mid = int(pair_count.astype(bool).sum())
                        bits_mid = int(
                            cm.total_bits(retained, n[0], n[1], n[2], pairs_mid)
                        )
                        if bits_mid <= b_max:
                            half = (bits_mid - base_bits) - lam * gain
                            follow_obj, follow = best_single_move(
                                bits_mid, pairs_mid
                            )
                            dobj = half
                            if follow_obj < 0:
                                dobj += follow_obj
                            else:
                                follow = None
                            # a follow that undoes the bulk half (e.g. drop a
                            # coordinate, re-enter it at the same width) nets
                            # to zero through two huge cancelling terms; only
                            # trust deltas clear of that cancellation noise
                            noise = 1e-12 * (abs(half) + abs(follow_obj))
                            if dobj < best[0] and dobj < -noise:
                                best = (dobj, (gi, src, tgt, follow))
                        for j in members.tolist():
                            move(j, src)
            return best

        def local_search():
            while True:
                base_pairs = int(pair_count.astype(bool).sum())
                base_bits = int(
                    cm.total_bits(retained, n[0], n[1], n[2], base_pairs)
                )
                # accept only decreases that beat the float noise floor of
                # the objective itself, or chains of noise-level "wins" from
                # compound candidates can cycle forever at large lambda
                scale = base_bits + lam * float((f * sq[rows, cur + 1]).sum())
                eps = 1e-9 * max(1.0, scale)
                single = best_single_move(base_bits, base_pairs)
                bulk = best_bulk_move(base_bits)
                if min(single[0], bulk[0]) >= -eps:
                    return
                if single[0] <= bulk[0]:
                    moved = [single[1]]
                else:
                    gi, src, tgt, follow = bulk[1]
                    moved = [
                        (int(j), tgt)
                        for j in np.flatnonzero((gid == gi) & (cur == src))
                    ]
                    if follow is not None:
                        moved.append(follow)
                for j, t in moved:
                    if t < 0:
                        prune(j)
                    else:
                        move(j, t)

        marginal_upgrades()
        local_search()

        pairs = int(pair_count.astype(bool).sum())
        bits = int(cm.total_bits(retained, n[0], n[1], n[2], pairs))
        dist = float((f * sq[rows, cur + 1]).sum())
        return bits + lam * dist, widths

    seeds = [np.full(d, -1, dtype=np.int64)]
    seen = {seeds[0].tobytes()}
    for allowed in (None, {0}, {1}, {2}, {0, 1}, {1, 2}, {0, 2}):
        priced = _price_sweep_slots(
            sq, f, lam, cm, gid, len(groups), b_max, allowed
        )
        if priced is not None and priced.tobytes() not in seen:
            seen.add(priced.tobytes())
            seeds.append(priced)
    best_obj, best_widths = min(
        (optimize(s) for s in seeds), key=lambda pair: pair[0]
    )
    return BitAllocation(best_widths)


def quantize(
    delta: np.ndarray, alloc: BitAllocation, groups, eps: float = 1e-12
) -> tuple[np.ndarray, dict[tuple[int, int], float]]:
    """Symmetric integer quantization with one scale per (group, width) pair.

    The scale is max |delta| over the coordinates of the group assigned that
    width, divided by (q_max + eps), stored via wire_scale because the codes
    must be computed against the exact value the decoder will see.  An
    all-zero selection keeps scale 0 and decodes to exact zeros.  Returns
    integer codes aligned with the ascending retained indices, plus the scale
    table.
    """
    delta = np.asarray(delta, dtype=np.float64)
    widths = alloc.widths
    if widths.shape != delta.shape:
        raise ValueError("allocation length must match delta")
    if (widths == 32).any():
        raise ValueError("32-bit coordinates are lossless; use build_message")
    groups = _validate_groups(groups, delta.size)
    retained = alloc.retained_indices()
    q = np.zeros(retained.size, dtype=np.int32)
    scales: dict[tuple[int, int], float] = {}
    for g in groups:
        for w in CODED_WIDTHS:
            sel = g.start + np.flatnonzero(widths[g.start : g.stop] == w)
            if sel.size == 0:
                continue
            qm = q_max(w)
            m = float(np.max(np.abs(delta[sel])))
            s = wire_scale(m, w, eps)
            scales[(g.group_id, w)] = s
            if s > 0.0:
                codes = np.clip(round_half_away(delta[sel] / s), -qm, qm)
            else:
                codes = np.zeros(sel.size)
            q[np.searchsorted(retained, sel)] = codes.astype(np.int32)
    return q, scales


@dataclass
class SparseUpdateMessage:
    """Decoded form of one uplink message.

    values holds int32 codes in tagged mode and float32 reals in lossless
    mode, both aligned with the ascending index list.
    """

    mode: int
    total_coords: int
    group_count: int
    indices: np.ndarray
    widths: np.ndarray
    values: np.ndarray
    scales: dict[tuple[int, int], float] = field(default_factory=dict)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.widths = np.asarray(self.widths, dtype=np.int16)

    @property
    def retained(self) -> int:
        return int(self.indices.size)

    def same_as(self, other: "SparseUpdateMessage") -> bool:
        return (
            self.mode == other.mode
            and self.total_coords == other.total_coords
            and self.group_count == other.group_count
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.widths, other.widths)
            and np.array_equal(self.values, other.values)
            and self.scales == other.scales
        )


def empty_message(d: int, group_count: int, mode: int = MODE_TAGGED) -> SparseUpdateMessage:
    values = np.zeros(0, dtype=np.float32 if mode == MODE_LOSSLESS else np.int32)
    return SparseUpdateMessage(
        mode, d, group_count, np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int16), values
    )


def build_message(
    delta: np.ndarray, alloc: BitAllocation, groups, eps: float = 1e-12
) -> SparseUpdateMessage:
    """Quantize (or pass through, for 32-bit widths) into a wire-ready message."""
    delta = np.asarray(delta, dtype=np.float64)
    groups = _validate_groups(groups, delta.size)
    retained = alloc.retained_indices()
    kept_widths = alloc.widths[retained]
    if (kept_widths == 32).any():
        if not (kept_widths == 32).all():
            raise ValueError("lossless mode cannot mix 32-bit with coded widths")
        values = delta[retained].astype(np.float32)
        return SparseUpdateMessage(
            MODE_LOSSLESS, delta.size, len(groups), retained, kept_widths, values
        )
    q, scales = quantize(delta, alloc, groups, eps)
    return SparseUpdateMessage(
        MODE_TAGGED, delta.size, len(groups), retained, kept_widths, q, scales
    )


def dequantize_message(msg: SparseUpdateMessage, groups) -> np.ndarray:
    """Dense float64 delta reconstruction."""
    groups = _validate_groups(groups, msg.total_coords)
    dense = np.zeros(msg.total_coords)
    if msg.retained == 0:
        return dense
    if msg.mode == MODE_LOSSLESS:
        dense[msg.indices] = np.asarray(msg.values, dtype=np.float64)
        return dense
    gids = _group_of_indices(groups, msg.indices)
    scale = np.array(
        [msg.scales[(int(g), int(w))] for g, w in zip(gids, msg.widths)]
    )
    dense[msg.indices] = scale * np.asarray(msg.values, dtype=np.float64)
    return dense


def _pack_subbyte(codes: np.ndarray, bits: int) -> bytes:
    """Pack unsigned codes MSB-first, zero-padded to a whole byte."""
    per = 8 // bits
    codes = np.asarray(codes, dtype=np.uint8) & ((1 << bits) - 1)
    pad = (-codes.size) % per
    if pad:
        codes = np.concatenate([codes, np.zeros(pad, dtype=np.uint8)])
    codes = codes.reshape(-1, per)
    out = np.zeros(codes.shape[0], dtype=np.uint8)
    for i in range(per):
        out |= codes[:, i] << (8 - bits * (i + 1))
    return out.tobytes()


def _unpack_subbyte(data: bytes, count: int, bits: int) -> np.ndarray:
    per = 8 // bits
    raw = np.frombuffer(data, dtype=np.uint8)
    out = np.zeros(raw.size * per, dtype=np.uint8)
    mask = (1 << bits) - 1
    for i in range(per):
        out[i::per] = (raw >> (8 - bits * (i + 1))) & mask
    return out[:count]


def _sign_extend(codes: np.ndarray, bits: int) -> np.ndarray:
    codes = codes.astype(np.int32)
    half = 1 << (bits - 1)
    return np.where(codes >= half, codes - (1 << bits), codes)


def _scale_pairs(msg: SparseUpdateMessage, groups) -> list[tuple[int, int]]:
    gids = _group_of_indices(groups, msg.indices)
    return sorted({(int(g), int(w)) for g, w in zip(gids, msg.widths)})


def pack(msg: SparseUpdateMessage, groups=None) -> bytes:
    """Serialize to the big-endian wire format.

    Layout: 20-byte header, ascending u32 indices, 2-bit width tags (tagged
    mode only, four per byte), value segments in width order 16/4/2 each
    byte-aligned, then one float32 scale per active (group, width) pair in
    (group id, width) order.  Lossless mode replaces tags/values/scales with a
    raw float32 value per index.
    """
    idx = msg.indices
    if idx.size and (np.diff(idx) <= 0).any():
        raise ValueError("message indices must be strictly increasing")
    if idx.size and (idx[0] < 0 or idx[-1] >= msg.total_coords):
        raise ValueError("message index out of range")
    header = struct.pack(
        _HEADER_FMT,
        MAGIC,
        WIRE_VERSION,
        msg.mode,
        0,
        msg.total_coords,
        msg.retained,
        msg.group_count,
        0,
    )
    parts = [header, idx.astype(">u4").tobytes()]
    if msg.mode == MODE_LOSSLESS:
        parts.append(np.asarray(msg.values, dtype=">f4").tobytes())
        return b"".join(parts)
    if msg.mode != MODE_TAGGED:
        raise ValueError(f"cannot pack unknown mode {msg.mode}")

    tags = np.array([_TAG_FOR_WIDTH[int(w)] for w in msg.widths], dtype=np.uint8)
    parts.append(_pack_subbyte(tags, TAG_BITS))
    values = np.asarray(msg.values, dtype=np.int32)
    for w in (16, 4, 2):
        vals = values[msg.widths == w]
        if w == 16:
            parts.append(vals.astype(">i2").tobytes())
        else:
            parts.append(_pack_subbyte(vals.astype(np.int64) & 0xFFFF, w))
    if groups is None:
        groups = _default_groups_for(msg)
    expected_pairs = _scale_pairs(msg, groups)
    if sorted(msg.scales) != expected_pairs:
        raise ValueError("scale table does not match the active (group, width) pairs")
    for key in expected_pairs:
        parts.append(struct.pack(">f", msg.scales[key]))
    return b"".join(parts)


def _default_groups_for(msg: SparseUpdateMessage):
    if msg.group_count == 1:
        return [QuantGroup(0, 0, msg.total_coords)]
    raise ValueError("pack needs the group layout when group_count > 1")


def unpack(data: bytes, groups) -> tuple[SparseUpdateMessage, np.ndarray]:
    """Decode a wire message and reconstruct the dense delta.

    Raises a distinct MessageDecodeError subclass for a bad magic, an unknown
    version, an unsupported mode, a truncated or overlong buffer, a reserved
    width tag, or a non-increasing index list.
    """
    if len(data) < struct.calcsize(_HEADER_FMT):
        raise TruncatedPayloadError(f"need 20 header bytes, got {len(data)}")
    magic, version, mode, _pad, d, retained, group_count, _rsv = struct.unpack_from(
        _HEADER_FMT, data
    )
    if magic != MAGIC:
        raise BadMagicError(f"bad magic 0x{magic:08x}")
    if version != WIRE_VERSION:
        raise UnknownVersionError(f"unknown wire version {version}")
    if mode not in (MODE_TAGGED, MODE_LOSSLESS):
        raise UnsupportedModeError(f"unsupported mode byte {mode}")
    groups = _validate_groups(groups, d)
    if group_count != len(groups):
        raise ValueError(
            f"message declares {group_count} groups, caller supplied {len(groups)}"
        )
    off = struct.calcsize(_HEADER_FMT)

    def take(nbytes: int, what: str) -> bytes:
        nonlocal off
        if off + nbytes > len(data):
            raise TruncatedPayloadError(f"truncated in {what} section")
        chunk = data[off : off + nbytes]
        off += nbytes
        return chunk

    idx = np.frombuffer(take(4 * retained, "index"), dtype=">u4").astype(np.int64)
    if retained and (idx[-1] >= d or (np.diff(idx) <= 0).any()):
        raise IndexOrderError("indices must be strictly increasing and < d")

    if mode == MODE_LOSSLESS:
        values = np.frombuffer(take(4 * retained, "value"), dtype=">f4").astype(
            np.float32
        )
        widths = np.full(retained, 32, dtype=np.int16)
        msg = SparseUpdateMessage(mode, d, group_count, idx, widths, values)
    else:
        tag_bytes = (retained + 3) // 4
        codes = _unpack_subbyte(take(tag_bytes, "tag"), retained, TAG_BITS)
        if (codes == 0).any():
            raise ReservedTagError("reserved width tag 00 encountered")
        widths = np.array([_WIDTH_FOR_TAG[int(c)] for c in codes], dtype=np.int16)
        values = np.zeros(retained, dtype=np.int32)
        for w in (16, 4, 2):
            sel = widths == w
            cnt = int(sel.sum())
            if cnt == 0:
                continue
            if w == 16:
                vals = np.frombuffer(take(2 * cnt, "value"), dtype=">i2").astype(
                    np.int32
                )
            else:
                nbytes = (cnt * w + 7) // 8
                vals = _sign_extend(
                    _unpack_subbyte(take(nbytes, "value"), cnt, w), w
                )
            values[sel] = vals
        msg = SparseUpdateMessage(mode, d, group_count, idx, widths, values)
        pairs = _scale_pairs(msg, groups)
        scales = {}
        for key in pairs:
            scales[key] = float(struct.unpack(">f", take(4, "scale"))[0])
        msg.scales = scales

    if off != len(data):
        raise TruncatedPayloadError(
            f"{len(data) - off} unexpected trailing bytes"
        )
    return msg, dequantize_message(msg, groups)


@dataclass(frozen=True)
class PayloadBreakdown:
    """Per-section bit counts; total matches the serialized length exactly."""

    header_bits: int
    index_bits: int
    tag_bits: int
    value_bits: int
    scale_bits: int

    @property
    def total_bits(self) -> int:
        return (
            self.header_bits
            + self.index_bits
            + self.tag_bits
            + self.value_bits
            + self.scale_bits
        )


def payload_bits(msg: SparseUpdateMessage) -> PayloadBreakdown:
    """Arithmetic size accounting for a message (no serialization needed)."""
    r = msg.retained
    index_bits = INDEX_BITS * r
    if msg.mode == MODE_LOSSLESS:
        return PayloadBreakdown(HEADER_BITS, index_bits, 0, 32 * r, 0)
    tag_bits = ((r + 3) // 4) * 8 if r else 0
    value_bits = 0
    for w in CODED_WIDTHS:
        cnt = int((msg.widths == w).sum())
        value_bits += ((cnt * w + 7) // 8) * 8
    return PayloadBreakdown(
        HEADER_BITS, index_bits, tag_bits, value_bits, SCALE_BITS * len(msg.scales)
    )


def fisher_distortion(
    fisher_values: np.ndarray, delta: np.ndarray, delta_hat: np.ndarray
) -> float:
    """Sum of Fisher-weighted squared reconstruction errors."""
    f = np.asarray(fisher_values, dtype=np.float64)
    e = np.asarray(delta, dtype=np.float64) - np.asarray(delta_hat, dtype=np.float64)
    if f.shape != e.shape:
        raise ValueError("fisher and delta shapes must match")
    return float((f * e * e).sum())


def qsgd_compress(
    delta: np.ndarray,
    groups,
    levels: int = 7,
    width: int = 4,
    rng: np.random.Generator | None = None,
) -> SparseUpdateMessage:
    """QSGD-style unbiased stochastic quantizer in the shared wire format.

    Every coordinate is retained at a single width.  The per-group scale is
    max|delta| / levels (nudged up so float32 rounding never widens the level
    range), and values round stochastically so the dequantized expectation
    equals the input exactly.
    """
    if width not in (4, 16):
        raise ValueError("qsgd width must be 4 or 16")
    if not 1 <= levels <= q_max(width):
        raise ValueError("levels must fit the configured width")
    delta = np.asarray(delta, dtype=np.float64)
    groups = _validate_groups(groups, delta.size)
    rng = rng or np.random.default_rng()
    q = np.zeros(delta.size, dtype=np.int32)
    scales: dict[tuple[int, int], float] = {}
    for g in groups:
        span = slice(g.start, g.stop)
        m = float(np.max(np.abs(delta[span]), initial=0.0))
        s = m / levels
        s32 = np.float32(s)
        if 0.0 < s32 < s:
            s32 = np.nextafter(s32, np.float32(np.inf))
        scales[(g.group_id, width)] = float(s32)
        if s32 > 0:
            x = delta[span] / float(s32)
            lo = np.floor(x)
            promote = rng.random(x.size) < (x - lo)
            q[span] = np.clip(lo + promote, -levels, levels).astype(np.int32)
    indices = np.arange(delta.size, dtype=np.int64)
    widths = np.full(delta.size, width, dtype=np.int16)
    return SparseUpdateMessage(
        MODE_TAGGED, delta.size, len(groups), indices, widths, q, scales
    )


def topk_compress(delta: np.ndarray, groups, k: int) -> SparseUpdateMessage:
    """Keep the k largest-magnitude coordinates at 16 bits (ties: lower index)."""
    delta = np.asarray(delta, dtype=np.float64)
    groups = _validate_groups(groups, delta.size)
    if not 0 <= k <= delta.size:
        raise ValueError(f"k={k} out of range for {delta.size} coordinates")
    widths = np.zeros(delta.size, dtype=np.int16)
    order = np.argsort(-np.abs(delta), kind="stable")
    widths[order[:k]] = 16
    return build_message(delta, BitAllocation(widths), groups)


def baseline_compress(
    delta: np.ndarray,
    groups,
    method: str,
    *,
    levels: int = 7,
    width: int = 4,
    k: int | None = None,
    rng: np.random.Generator | None = None,
) -> SparseUpdateMessage:
    if method == "qsgd":
        return qsgd_compress(delta, groups, levels, width, rng)
    if method == "topk":
        if k is None:
            raise ValueError("topk baseline needs k")
        return topk_compress(delta, groups, k)
    raise ValueError(f"unknown baseline {method!r}")


@dataclass
class CompressResult:
    """Message plus the reconstruction telemetry the protocol layer logs."""

    message: SparseUpdateMessage
    delta_hat: np.ndarray
    distortion: float
    alloc: BitAllocation | None


def compress_update(
    delta: np.ndarray,
    fisher_values: np.ndarray,
    groups,
    policy: CompressionPolicyConfig,
    rng: np.random.Generator | None = None,
) -> CompressResult:
    """Policy dispatch used by the client: allocate, quantize, and account.

    An all-zero delta short-circuits to a header-only message in every mode
    (there is nothing to transmit).
    """
    delta = np.asarray(delta, dtype=np.float64)
    f = np.asarray(fisher_values, dtype=np.float64)
    groups = _validate_groups(groups, delta.size)
    if not np.any(delta):
        mode = MODE_LOSSLESS if policy.mode == "lossless" else MODE_TAGGED
        msg = empty_message(delta.size, len(groups), mode)
        return CompressResult(msg, np.zeros(delta.size), 0.0, None)

    alloc = None
    if policy.mode == "lossless":
        alloc = BitAllocation(np.full(delta.size, 32, dtype=np.int16))
        msg = build_message(delta, alloc, groups, policy.epsilon_scale)
    elif policy.mode == "percentile":
        alloc = percentile_allocate(importance_scores(f, delta), policy)
        msg = build_message(delta, alloc, groups, policy.epsilon_scale)
    elif policy.mode == "budget":
        if policy.b_max is None:
            raise ValueError("budget mode requires b_max")
        alloc = greedy_budget_allocate(
            delta, f, groups, policy.b_max, policy.lam, eps=policy.epsilon_scale
        )
        msg = build_message(delta, alloc, groups, policy.epsilon_scale)
    elif policy.mode == "qsgd":
        msg = qsgd_compress(delta, groups, policy.qsgd_levels, policy.qsgd_width, rng)
    elif policy.mode == "topk":
        k = math.ceil(policy.topk_fraction * delta.size)
        msg = topk_compress(delta, groups, k)
    else:  # pragma: no cover - rejected by the config validator
        raise ValueError(f"unknown compression mode {policy.mode!r}")

    delta_hat = dequantize_message(msg, groups)
    return CompressResult(msg, delta_hat, fisher_distortion(f, delta, delta_hat), alloc)


def canonical_test_vector() -> tuple[SparseUpdateMessage, bytes]:
    """The 49-byte reference message: d=1000, one group, widths (16, 4, 2).

    160 header + 96 index + 8 tag + 32 value + 96 scale = 392 bits.
    """
    d = 1000
    groups = [QuantGroup(0, 0, d)]
    delta = np.zeros(d)
    delta[3] = 0.75
    delta[42] = -0.5
    delta[999] = 0.25
    widths = np.zeros(d, dtype=np.int16)
    widths[3] = 16
    widths[42] = 4
    widths[999] = 2
    msg = build_message(delta, BitAllocation(widths), groups)
    return msg, pack(msg, groups)
