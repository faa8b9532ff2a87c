"""Deterministic uplink channel, round-timing, and energy bookkeeping.

All rates use decimal units (1 Mbps = 1e6 bits/s, 1 MB = 1e6 bytes).  Two
channel profiles are modeled: a fixed-rate link, and a heterogeneous fleet
whose per-client base rate is log-uniform with a slow straggler tail.  Every
draw is keyed by (seed, client, round) so identical seeds reproduce identical
channels regardless of which compression method is being simulated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ChannelProfile",
    "EnergyModel",
    "ComputeModel",
    "NetworkScenario",
    "RoundTiming",
    "EnergySummary",
    "sample_rate",
    "comm_time",
    "round_time",
    "round_energy",
    "apply_packet_loss",
]

# stream tags so independent draws never share a generator
_STREAM_RATE = 4
_STREAM_JITTER = 5
_STREAM_COMPUTE = 6
_STREAM_LOSS = 7


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


@dataclass(frozen=True)
class ChannelProfile:
    """Uplink rate model; kind is "fixed" or "heterogeneous"."""

    kind: str = "fixed"
    rate_bps: float = 20e6  # fixed profile
    base_lo_bps: float = 5e6  # heterogeneous: log-uniform base range
    base_hi_bps: float = 50e6
    straggler_fraction: float = 0.2
    straggler_lo_bps: float = 0.5e6
    straggler_hi_bps: float = 2e6
    jitter: float = 0.0  # optional per-round multiplicative jitter, e.g. 0.1

    def __post_init__(self):
        if self.kind not in ("fixed", "heterogeneous"):
            raise ValueError(f"unknown channel profile kind {self.kind!r}")
        for r in (
            self.rate_bps,
            self.base_lo_bps,
            self.base_hi_bps,
            self.straggler_lo_bps,
            self.straggler_hi_bps,
        ):
            if not r > 0:
                raise ValueError("rates must be positive")
        if self.base_hi_bps < self.base_lo_bps:
            raise ValueError("base rate range is inverted")
        if not 0.0 <= self.straggler_fraction <= 1.0:
            raise ValueError("straggler fraction must lie in [0, 1]")
        if not 0.0 <= self.jitter < 1.0:
            raise ValueError("jitter fraction must lie in [0, 1)")

    @classmethod
    def fixed(cls, rate_bps: float = 20e6) -> "ChannelProfile":
        return cls(kind="fixed", rate_bps=rate_bps)

    @classmethod
    def heterogeneous(cls, jitter: float = 0.0) -> "ChannelProfile":
        return cls(kind="heterogeneous", jitter=jitter)


def sample_rate(profile: ChannelProfile, client_id: int, round_index: int, seed: int) -> float:
    """Uplink rate in bits/s for one client in one round; deterministic per seed.

    Heterogeneous clients keep a fixed base across rounds: stragglers draw
    uniformly from the slow band, everyone else log-uniformly from the base
    band.  Optional jitter rescales the base by up to +-jitter each round.
    """
    if profile.kind == "fixed":
        return profile.rate_bps
    rng = _rng(seed, _STREAM_RATE, client_id)
    if rng.random() < profile.straggler_fraction:
        base = rng.uniform(profile.straggler_lo_bps, profile.straggler_hi_bps)
    else:
        base = math.exp(
            rng.uniform(math.log(profile.base_lo_bps), math.log(profile.base_hi_bps))
        )
    if profile.jitter > 0.0:
        j = _rng(seed, _STREAM_JITTER, client_id, round_index).uniform(-1.0, 1.0)
        base *= 1.0 + profile.jitter * j
    return base


def comm_time(payload_bits: int, rate_bps: float) -> float:
    """Transmission seconds: bits / rate."""
    if payload_bits < 0:
        raise ValueError("payload bits must be nonnegative")
    if not rate_bps > 0:
        raise ValueError("rate must be positive")
    return payload_bits / rate_bps


@dataclass(frozen=True)
class EnergyModel:
    """Constant-power model: E = p_comp * t_comp + p_tx * t_comm.

    The transmit power default of 1.5 W is the value consistent with the
    published per-method energy table; 2.0 W (the prose default elsewhere)
    is equally valid and just a config change.
    """

    p_comp_watts: float = 4.0
    p_tx_watts: float = 1.5

    def __post_init__(self):
        if self.p_comp_watts < 0 or self.p_tx_watts < 0:
            raise ValueError("power draws must be nonnegative")

    def client_energy(self, t_comp: float, t_comm: float) -> float:
        return self.p_comp_watts * t_comp + self.p_tx_watts * t_comm


@dataclass(frozen=True)
class ComputeModel:
    """Simulated local compute time: base seconds x method multiplier x jitter.

    The per-client jitter factor is fixed across rounds so methods sharing a
    seed see identical hardware.
    """

    base_seconds: float = 0.02
    jitter: float = 0.1

    def __post_init__(self):
        if not self.base_seconds >= 0:
            raise ValueError("base compute seconds must be nonnegative")
        if not 0.0 <= self.jitter < 1.0:
            raise ValueError("compute jitter must lie in [0, 1)")

    def client_seconds(self, client_id: int, seed: int, multiplier: float = 1.0) -> float:
        if not multiplier > 0:
            raise ValueError("method multiplier must be positive")
        factor = 1.0
        if self.jitter > 0.0:
            factor += self.jitter * _rng(seed, _STREAM_COMPUTE, client_id).uniform(-1.0, 1.0)
        return self.base_seconds * multiplier * factor


@dataclass(frozen=True)
class NetworkScenario:
    """Everything the protocol layer needs to price a round."""

    profile: ChannelProfile = field(default_factory=ChannelProfile.fixed)
    energy: EnergyModel = field(default_factory=EnergyModel)
    compute: ComputeModel = field(default_factory=ComputeModel)
    loss_rate: float = 0.0  # per-chunk loss probability
    chunk_bytes: int = 1500
    server_seconds: float = 0.0  # fixed per-round server overhead

    def __post_init__(self):
        if not 0.0 <= self.loss_rate < 1.0:
            raise ValueError("chunk loss rate must lie in [0, 1)")
        if self.chunk_bytes < 1:
            raise ValueError("chunk size must be at least 1 byte")
        if self.server_seconds < 0:
            raise ValueError("server overhead must be nonnegative")


@dataclass(frozen=True)
class RoundTiming:
    """Synchronous round latency: server overhead + slowest available client."""

    round_seconds: float
    no_participants: bool = False


def round_time(
    t_comp: np.ndarray, t_comm: np.ndarray, available: np.ndarray, server_seconds: float = 0.0
) -> RoundTiming:
    """T_round = T_srv + max over available clients of (T_comp + T_comm)."""
    t_comp = np.asarray(t_comp, dtype=np.float64)
    t_comm = np.asarray(t_comm, dtype=np.float64)
    avail = np.asarray(available, dtype=bool)
    if not (t_comp.shape == t_comm.shape == avail.shape):
        raise ValueError("per-client timing arrays must share a shape")
    if (t_comp < 0).any() or (t_comm < 0).any():
        raise ValueError("times must be nonnegative")
    if not avail.any():
        return RoundTiming(server_seconds, no_participants=True)
    return RoundTiming(server_seconds + float((t_comp + t_comm)[avail].max()))


@dataclass(frozen=True)
class EnergySummary:
    mean_joules: float  # mean over all sampled clients (dropouts spend nothing)
    straggler_joules: float  # max over available clients


def round_energy(
    model: EnergyModel, t_comp: np.ndarray, t_comm: np.ndarray, available: np.ndarray
) -> EnergySummary:
    t_comp = np.asarray(t_comp, dtype=np.float64)
    t_comm = np.asarray(t_comm, dtype=np.float64)
    avail = np.asarray(available, dtype=bool)
    if not (t_comp.shape == t_comm.shape == avail.shape):
        raise ValueError("per-client timing arrays must share a shape")
    if t_comp.size == 0:
        raise ValueError("energy summary needs at least one sampled client")
    per_client = model.p_comp_watts * t_comp + model.p_tx_watts * t_comm
    per_client = np.where(avail, per_client, 0.0)
    straggler = float(per_client[avail].max()) if avail.any() else 0.0
    return EnergySummary(float(per_client.mean()), straggler)


def apply_packet_loss(
    message_bytes: int, loss_rate: float, chunk_bytes: int, seed_key: tuple[int, ...]
) -> bool:
    """True when every chunk of the message survives.

    The message is split into ceil(len/chunk) chunks; each is lost
    independently with probability loss_rate and a single loss discards the
    whole message.  Draws are keyed by (seed..., client, round) so reruns are
    bit-identical.
    """
    if message_bytes < 0:
        raise ValueError("message size must be nonnegative")
    if not 0.0 <= loss_rate < 1.0:
        raise ValueError("loss rate must lie in [0, 1)")
    if chunk_bytes < 1:
        raise ValueError("chunk size must be at least 1 byte")
    if loss_rate == 0.0 or message_bytes == 0:
        return True
    chunks = math.ceil(message_bytes / chunk_bytes)
    rng = _rng(*seed_key, _STREAM_LOSS)
    return bool((rng.random(chunks) >= loss_rate).all())
