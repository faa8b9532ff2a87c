"""Synthetic next-token task with planted critical tokens.

Each sequence contains exactly one occurrence of a critical token, and the
token immediately after it is a deterministic function of which critical token
appeared.  All other targets are noise, so the critical position carries the
only learnable signal and doubles as the ground truth for sensitivity
detection and token-recall metrics.

Vocabulary layout for C critical tokens over V ids:
  [0, C)      critical tokens (also the class label for partitioning)
  [C, 2C)     determined targets, target(c) = C + c
  [2C, V)     filler tokens; id 2C is the common background filler
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .toy_model import TokenSequence

__all__ = [
    "SyntheticTaskSpec",
    "LabeledSequence",
    "generate_synthetic_dataset",
    "holdout_split",
    "target_token_id",
]

_STREAM_DATA = 10


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Shape of the planted-token corpus."""

    vocab_size: int = 64
    seq_len: int = 24
    num_critical: int = 6
    noise_rate: float = 0.3  # chance a filler position is random instead of background
    size: int = 240
    seed: int = 0
    critical_pos_lo: int = 1
    critical_pos_hi: int | None = None  # inclusive; defaults to seq_len - 6

    def __post_init__(self):
        if self.num_critical < 1:
            raise ValueError("need at least one critical token")
        if self.vocab_size < 2 * self.num_critical + 2:
            raise ValueError(
                "vocabulary too small: need 2*C ids for critical/target pairs "
                "plus at least 2 fillers"
            )
        # one critical occurrence per sequence must stay under 5% of positions
        if self.seq_len * 0.05 <= 1.0:
            raise ValueError("sequence length must exceed 20 so critical tokens stay rare")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError("noise rate must lie in [0, 1]")
        if self.size < 1:
            raise ValueError("dataset size must be positive")
        hi = self.pos_hi
        if not 0 <= self.critical_pos_lo <= hi <= self.seq_len - 2:
            raise ValueError("critical position range must fit before the last target")

    @property
    def pos_hi(self) -> int:
        if self.critical_pos_hi is not None:
            return self.critical_pos_hi
        return self.seq_len - 6

    @property
    def background_id(self) -> int:
        return 2 * self.num_critical


def target_token_id(spec: SyntheticTaskSpec, critical_id: int) -> int:
    """Determined target for a critical token: ids are paired block-wise."""
    if not 0 <= critical_id < spec.num_critical:
        raise ValueError("not a critical token id")
    return spec.num_critical + critical_id


@dataclass(frozen=True)
class LabeledSequence:
    """A token sequence plus its planted-token ground truth."""

    tokens: tuple[int, ...]
    label: int  # critical token id, also the partitioning class
    critical_pos: int  # position of the critical token
    target_id: int  # token forced at critical_pos + 1

    @property
    def sequence(self) -> TokenSequence:
        return TokenSequence(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)


def generate_synthetic_dataset(spec: SyntheticTaskSpec) -> list[LabeledSequence]:
    """Deterministic corpus for the task spec (seed lives in the spec)."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, _STREAM_DATA]))
    filler_lo, filler_hi = spec.background_id, spec.vocab_size
    items: list[LabeledSequence] = []
    for _ in range(spec.size):
        critical = int(rng.integers(0, spec.num_critical))
        pos = int(rng.integers(spec.critical_pos_lo, spec.pos_hi + 1))
        toks = np.full(spec.seq_len, spec.background_id, dtype=np.int64)
        noisy = rng.random(spec.seq_len) < spec.noise_rate
        toks[noisy] = rng.integers(filler_lo, filler_hi, size=int(noisy.sum()))
        toks[pos] = critical
        toks[pos + 1] = target_token_id(spec, critical)
        items.append(
            LabeledSequence(tuple(int(t) for t in toks), critical, pos, int(toks[pos + 1]))
        )
    return items


def holdout_split(
    items: list[LabeledSequence], holdout_fraction: float
) -> tuple[list[LabeledSequence], list[LabeledSequence]]:
    """Deterministic tail split; the corpus is already i.i.d. shuffled."""
    if not 0.0 < holdout_fraction < 1.0:
        raise ValueError("holdout fraction must lie in (0, 1)")
    n_hold = max(1, math.floor(holdout_fraction * len(items)))
    if n_hold >= len(items):
        raise ValueError("holdout fraction leaves no training data")
    return items[:-n_hold], items[-n_hold:]
