"""Round telemetry, evaluation, and summary metrics.

RoundLog is the JSON-serializable per-round record the protocol emits;
compute_metrics folds a log stream into the headline numbers (time to target,
delivered uplink bytes, final accuracy).  Token recall compares which
(sequence, position) slots a compressed run still considers sensitive against
the top slots of an uncompressed reference run.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .datasets import LabeledSequence
from .fisher import retained_count, token_sensitivity
from .toy_model import ToyModel, batch_backward, batch_forward

__all__ = [
    "RoundLog",
    "MetricsReport",
    "token_recall",
    "compute_metrics",
    "evaluate_critical_accuracy",
    "sensitivity_scores",
    "reference_top_set",
    "retained_mask_set",
]


@dataclass
class RoundLog:
    """Telemetry for one synchronous round; lists align with sampled clients."""

    round_index: int
    client_ids: list[int]
    available: list[bool]
    payload_bits: list[int]
    comp_seconds: list[float]
    comm_seconds: list[float]
    rate_bps: list[float]
    delivered: list[bool]
    round_seconds: float
    mean_energy_joules: float
    straggler_energy_joules: float
    accuracy: float
    mean_distortion: float
    retained_fraction: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RoundLog":
        return cls(**d)

    def delivered_bytes(self) -> int:
        return sum(
            bits // 8 for bits, ok in zip(self.payload_bits, self.delivered) if ok
        )


@dataclass
class MetricsReport:
    """Headline numbers distilled from a round-log stream."""

    rounds: int
    final_accuracy: float
    target_accuracy: float
    reached_target: bool
    time_to_target_seconds: float | None  # None = never reached
    rounds_to_target: int | None
    uplink_bytes_to_target: int | None
    cumulative_uplink_bytes: int  # delivered messages only
    total_time_seconds: float
    token_recall: float | None = None
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def token_recall(reference_top: set, retained: set) -> float:
    """|reference ∩ retained| / |reference|; an empty reference scores 1.0."""
    if not reference_top:
        return 1.0
    hit = len(set(reference_top) & set(retained))
    return hit / len(reference_top)


def compute_metrics(
    logs: list[RoundLog],
    target_accuracy: float,
    token_recall_value: float | None = None,
) -> MetricsReport:
    """Fold logs into a report; uplink counts delivered payload bytes only."""
    total_bytes = 0
    total_time = 0.0
    reached = False
    t_target: float | None = None
    r_target: int | None = None
    b_target: int | None = None
    notes: list[str] = []
    for i, log in enumerate(logs):
        total_bytes += log.delivered_bytes()
        total_time += log.round_seconds
        if not reached and log.accuracy >= target_accuracy:
            reached = True
            t_target = total_time
            r_target = i + 1
            b_target = total_bytes
    if not logs:
        notes.append("empty log stream (zero rounds)")
    final_acc = logs[-1].accuracy if logs else 0.0
    return MetricsReport(
        rounds=len(logs),
        final_accuracy=final_acc,
        target_accuracy=target_accuracy,
        reached_target=reached,
        time_to_target_seconds=t_target,
        rounds_to_target=r_target,
        uplink_bytes_to_target=b_target,
        cumulative_uplink_bytes=total_bytes,
        total_time_seconds=total_time,
        token_recall=token_recall_value,
        notes=notes,
    )


def _length_groups(items: list[LabeledSequence]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for i, it in enumerate(items):
        groups.setdefault(len(it), []).append(i)
    return dict(sorted(groups.items()))


def evaluate_critical_accuracy(model: ToyModel, items: list[LabeledSequence]) -> float:
    """Fraction of sequences whose determined target is the argmax prediction.

    Only the critical position is scored; every other target is noise by
    construction, so this is the task's learnable headroom.
    """
    if not items:
        raise ValueError("cannot evaluate on an empty corpus")
    correct = 0
    for _, idxs in _length_groups(items).items():
        tokens = np.array([items[i].tokens for i in idxs])
        logits = batch_forward(model, tokens)
        for row, i in enumerate(idxs):
            it = items[i]
            pred = int(np.argmax(logits[row, it.critical_pos]))
            correct += pred == it.target_id
    return correct / len(items)


def sensitivity_scores(model: ToyModel, items: list[LabeledSequence]) -> list[np.ndarray]:
    """Per-position sensitivity of the full loss, one (T-1,) array per item.

    Entry i scores the token feeding context i (the final prefix token of the
    prediction at step i); the last sequence position never feeds a context
    and is not maskable.
    """
    out: list[np.ndarray | None] = [None] * len(items)
    for _, idxs in _length_groups(items).items():
        tokens = np.array([items[i].tokens for i in idxs])
        _, _, _, embed_grads = batch_backward(model, tokens, need_embed_grads=True)
        scores = token_sensitivity(embed_grads)[:, :-1]
        for row, i in enumerate(idxs):
            out[i] = scores[row]
    return out  # type: ignore[return-value]


def reference_top_set(scores: list[np.ndarray], top_fraction: float) -> set[tuple[int, int]]:
    """Top slots corpus-wide by score; ties resolve to lower (item, position)."""
    if not 0.0 < top_fraction <= 1.0:
        raise ValueError("top fraction must lie in (0, 1]")
    flat = [
        (-float(s), i, p)
        for i, arr in enumerate(scores)
        for p, s in enumerate(arr)
    ]
    flat.sort()
    k = math.ceil(top_fraction * len(flat))
    return {(i, p) for _, i, p in flat[:k]}


def retained_mask_set(scores: list[np.ndarray], keep_ratio: float) -> set[tuple[int, int]]:
    """Slots a keep ratio would retain, applied per sequence like the trainer."""
    kept: set[tuple[int, int]] = set()
    for i, arr in enumerate(scores):
        k = retained_count(keep_ratio, arr.size)
        order = np.argsort(-arr, kind="stable")[:k]
        kept.update((i, int(p)) for p in order)
    return kept
