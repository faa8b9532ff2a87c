"""Synchronous federated fine-tuning protocol.

One round: the server samples m of K clients (each independently unavailable
with probability p_drop), every available client runs E local SGD steps on its
shard, compresses the adapter delta, and uplinks one message; the server
dequantizes and applies the sample-weighted average.  Local steps alternate
between full-loss refresh steps (every H-th step: recompute token sensitivity,
update the EMA, rebuild the keep mask) and masked steps that train only on the
retained token positions.  The diagonal Fisher accumulates every step from
whichever gradients were actually used.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from .codec import (
    CompressionPolicyConfig,
    MessageDecodeError,
    PayloadBreakdown,
    SparseUpdateMessage,
    compress_update,
    lora_groups,
    pack,
    payload_bits,
    unpack,
)
from .datasets import LabeledSequence
from .fisher import (
    DiagonalFisher,
    TokenSensitivityTracker,
    ema_update,
    fisher_accumulate,
    retained_count,
    token_sensitivity,
    topk_mask,
)
from .metrics import RoundLog, evaluate_critical_accuracy
from .netsim import NetworkScenario, apply_packet_loss, comm_time, round_energy, round_time, sample_rate
from .toy_model import LoraAdapter, ToyModel, batch_backward, flatten_adapter, sgd_step, unflatten_adapter

__all__ = [
    "FederatedConfig",
    "ClientState",
    "RoundPlan",
    "ClientRoundResult",
    "partition_dirichlet",
    "plan_round",
    "client_round",
    "server_aggregate",
    "run_federation",
]

log = logging.getLogger(__name__)

_STREAM_PARTITION = 1
_STREAM_SAMPLE = 2
_STREAM_AVAILABILITY = 3
_STREAM_QSGD = 8


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


@dataclass
class FederatedConfig:
    """Protocol knobs; defaults mirror the reference experimental setup."""

    num_clients: int = 100
    sampled_per_round: int = 10
    local_steps: int = 5
    eta: float = 0.1
    eta_server: float = 1.0
    mask_interval: int = 10  # refresh token stats every H-th local step
    rho: float = 0.9  # shared EMA factor for token scores and Fisher
    token_keep_ratio: float = 0.8
    b_max: int | None = None  # finite => budgeted greedy allocation
    p_drop: float = 0.1
    dirichlet_alpha: float = 0.1
    rounds: int = 50
    seed: int = 0
    clip: float | None = None
    policy: CompressionPolicyConfig = field(default_factory=CompressionPolicyConfig)

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("need at least one client")
        if not 1 <= self.sampled_per_round <= self.num_clients:
            raise ValueError("sampled_per_round must lie in [1, num_clients]")
        if self.local_steps < 0:
            raise ValueError("local step count must be nonnegative")
        if not self.eta > 0:
            raise ValueError("learning rate must be positive")
        if self.eta_server < 0:
            raise ValueError("server step size must be nonnegative")
        if self.mask_interval < 1:
            raise ValueError("mask refresh interval must be at least 1")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must lie in [0, 1)")
        if not 0.0 < self.token_keep_ratio <= 1.0:
            raise ValueError("token keep ratio must lie in (0, 1]")
        if self.b_max is not None and self.b_max < 0:
            raise ValueError("bit budget must be nonnegative")
        if not 0.0 <= self.p_drop < 1.0:
            raise ValueError("dropout probability must lie in [0, 1)")
        if not self.dirichlet_alpha > 0:
            raise ValueError("Dirichlet alpha must be positive")
        if self.rounds < 0:
            raise ValueError("round count must be nonnegative")

    def effective_policy(self) -> CompressionPolicyConfig:
        """Budget-greedy when a finite bit budget is set, else the policy as-is."""
        p = self.policy
        if p.mode in ("percentile", "budget"):
            budget = self.b_max if self.b_max is not None else p.b_max
            if budget is not None:
                return replace(p, mode="budget", b_max=budget)
            return replace(p, mode="percentile", b_max=None)
        return p


@dataclass
class ClientState:
    """One participant: an id and its local shard."""

    client_id: int
    shard: list[LabeledSequence]

    @property
    def n_samples(self) -> int:
        return len(self.shard)


@dataclass(frozen=True)
class RoundPlan:
    """Sampled client ids (ascending) and their availability flags."""

    round_index: int
    sampled: tuple[int, ...]
    available: tuple[bool, ...]


def partition_dirichlet(
    items: list[LabeledSequence], num_clients: int, alpha: float, seed: int
) -> list[list[LabeledSequence]]:
    """Label-skewed partition: per class, client shares drawn from Dir(alpha).

    Every item lands on exactly one client.  Counts come from the largest-
    remainder rounding of the drawn proportions, so shards are disjoint and
    exhaustive; smaller alpha concentrates each class on fewer clients.
    """
    if num_clients < 1:
        raise ValueError("need at least one client")
    if not alpha > 0:
        raise ValueError("Dirichlet alpha must be positive")
    rng = _rng(seed, _STREAM_PARTITION)
    shards: list[list[LabeledSequence]] = [[] for _ in range(num_clients)]
    for label in sorted({it.label for it in items}):
        idxs = [i for i, it in enumerate(items) if it.label == label]
        n = len(idxs)
        p = rng.dirichlet(np.full(num_clients, alpha))
        base = np.floor(p * n).astype(np.int64)
        frac = p * n - base
        missing = n - int(base.sum())
        if missing:
            base[np.argsort(-frac, kind="stable")[:missing]] += 1
        perm = rng.permutation(n)
        pos = 0
        for cid in range(num_clients):
            take = int(base[cid])
            for j in perm[pos : pos + take]:
                shards[cid].append(items[idxs[j]])
            pos += take
    return shards


def plan_round(config: FederatedConfig, round_index: int) -> RoundPlan:
    """Uniform sample of m distinct clients plus independent dropout flags.

    Pure function of (seed, round); the draws do not depend on the compression
    method, so different methods on one seed face identical participation.
    """
    if round_index < 0:
        raise ValueError("round index must be nonnegative")
    rng_s = _rng(config.seed, _STREAM_SAMPLE, round_index)
    sampled = np.sort(
        rng_s.choice(config.num_clients, size=config.sampled_per_round, replace=False)
    )
    rng_a = _rng(config.seed, _STREAM_AVAILABILITY, round_index)
    available = rng_a.random(config.sampled_per_round) >= config.p_drop
    return RoundPlan(round_index, tuple(int(c) for c in sampled), tuple(bool(a) for a in available))


@dataclass
class ClientRoundResult:
    """Compressed update plus the telemetry the server logs."""

    client_id: int
    n_samples: int
    message: SparseUpdateMessage
    wire: bytes
    payload: PayloadBreakdown
    distortion: float
    retained_fraction: float
    steps_run: int


def _length_batches(shard: list[LabeledSequence]) -> list[np.ndarray]:
    by_len: dict[int, list[tuple[int, ...]]] = {}
    for it in shard:
        by_len.setdefault(len(it), []).append(it.tokens)
    return [np.array(v) for _, v in sorted(by_len.items())]


def client_round(
    client: ClientState,
    model: ToyModel,
    config: FederatedConfig,
    round_index: int,
) -> ClientRoundResult | None:
    """Run E local steps on a copy of the global adapter and compress the delta.

    Returns None for an empty shard (the client sits the round out).  Each
    step trains full-batch on the shard; on refresh steps (step % H == 0) the
    loss is unweighted and the token EMA and keep masks are rebuilt for the
    following steps, otherwise only masked token positions contribute.  A zero
    delta (e.g. E=0) compresses to a header-only message.
    """
    if not client.shard:
        return None
    local = ToyModel(model.embeddings, model.w0, model.adapter.copy())
    batches = _length_batches(client.shard)
    n_total = sum(b.shape[0] for b in batches)
    trackers = [
        TokenSensitivityTracker.zeros((b.shape[0], b.shape[1] - 1), config.rho)
        for b in batches
    ]
    masks = [np.ones((b.shape[0], b.shape[1] - 1)) for b in batches]
    fisher = DiagonalFisher.zeros(model.adapter.num_coords, config.rho)

    for step in range(1, config.local_steps + 1):
        refresh = step % config.mask_interval == 0
        grad_a = np.zeros_like(local.adapter.a)
        grad_b = np.zeros_like(local.adapter.b)
        for i, tokens in enumerate(batches):
            weights = None if refresh else masks[i]
            _, ga, gb, embed_grads = batch_backward(
                local, tokens, weights, need_embed_grads=refresh
            )
            grad_a += ga
            grad_b += gb
            if refresh:
                ema_update(trackers[i], token_sensitivity(embed_grads)[:, :-1])
                k = retained_count(config.token_keep_ratio, masks[i].shape[1])
                for row in range(masks[i].shape[0]):
                    masks[i][row] = topk_mask(trackers[i].scores[row], k).z
        grad_a /= n_total
        grad_b /= n_total
        fisher_accumulate(fisher, flatten_adapter(grad_a, grad_b))
        new_a, new_b = sgd_step(
            (local.adapter.a, local.adapter.b), (grad_a, grad_b), config.eta, config.clip
        )
        local.adapter.a = new_a
        local.adapter.b = new_b

    delta = flatten_adapter(
        local.adapter.a - model.adapter.a, local.adapter.b - model.adapter.b
    )
    groups = lora_groups(
        model.adapter.rank, model.adapter.a.shape[1], model.adapter.b.shape[0]
    )
    rng = _rng(config.seed, _STREAM_QSGD, round_index, client.client_id)
    result = compress_update(delta, fisher.values, groups, config.effective_policy(), rng)
    wire = pack(result.message, groups)
    kept = sum(float(m.sum()) for m in masks)
    total = sum(m.size for m in masks)
    return ClientRoundResult(
        client_id=client.client_id,
        n_samples=client.n_samples,
        message=result.message,
        wire=wire,
        payload=payload_bits(result.message),
        distortion=result.distortion,
        retained_fraction=kept / total if total else 1.0,
        steps_run=config.local_steps,
    )


def server_aggregate(
    adapter: LoraAdapter,
    responses: list[tuple[int, int, bytes]],
    groups,
    eta_server: float,
) -> tuple[LoraAdapter, list[int]]:
    """Apply the sample-weighted mean of the decoded deltas.

    responses holds (client_id, n_samples, wire_bytes).  Undecodable messages
    are dropped (and reported) before weights are formed, so the weights of
    the surviving responders always sum to one.  With no survivors the global
    adapter is returned unchanged.
    """
    if eta_server < 0:
        raise ValueError("server step size must be nonnegative")
    decoded: list[tuple[int, np.ndarray]] = []
    bad: list[int] = []
    for cid, n_samples, wire in sorted(responses, key=lambda r: r[0]):
        if n_samples < 1:
            raise ValueError("responder sample count must be positive")
        try:
            msg, dense = unpack(wire, groups)
        except MessageDecodeError as exc:
            log.warning("dropping undecodable update from client %d: %s", cid, exc)
            bad.append(cid)
            continue
        if msg.total_coords != adapter.num_coords:
            raise ValueError("message dimensionality does not match the adapter")
        decoded.append((n_samples, dense))
    new = adapter.copy()
    if not decoded:
        return new, bad
    total = sum(n for n, _ in decoded)
    agg = np.zeros(adapter.num_coords)
    for n, dense in decoded:
        agg += (n / total) * dense
    flat = flatten_adapter(new.a, new.b) + eta_server * agg
    new.a, new.b = unflatten_adapter(flat, new.a.shape, new.b.shape)
    return new, bad


def run_federation(
    config: FederatedConfig,
    scenario: NetworkScenario,
    model: ToyModel,
    clients: list[ClientState],
    holdout: list[LabeledSequence],
    comp_multiplier: float = 1.0,
) -> Iterator[RoundLog]:
    """Drive the full simulation; yields one RoundLog per round.

    The model's adapter is updated in place round by round, so after the
    generator is exhausted the caller holds the final global model.  The whole
    log stream is a pure function of (config, scenario, initial model, data).
    """
    if len(clients) != config.num_clients:
        raise ValueError(
            f"config expects {config.num_clients} clients, got {len(clients)}"
        )
    groups = lora_groups(
        model.adapter.rank, model.adapter.a.shape[1], model.adapter.b.shape[0]
    )
    for t in range(config.rounds):
        plan = plan_round(config, t)
        m = len(plan.sampled)
        bits = [0] * m
        comp = np.zeros(m)
        comm = np.zeros(m)
        rates = np.zeros(m)
        avail = np.zeros(m, dtype=bool)
        delivered = [False] * m
        responses: list[tuple[int, int, bytes]] = []
        distortions: list[float] = []
        retained: list[float] = []
        for pos, cid in enumerate(plan.sampled):
            rates[pos] = sample_rate(scenario.profile, cid, t, config.seed)
            if not plan.available[pos]:
                continue
            result = client_round(clients[cid], model, config, t)
            if result is None:  # empty shard: effectively unavailable
                continue
            avail[pos] = True
            bits[pos] = result.payload.total_bits
            comp[pos] = scenario.compute.client_seconds(cid, config.seed, comp_multiplier)
            comm[pos] = comm_time(bits[pos], rates[pos])
            distortions.append(result.distortion)
            retained.append(result.retained_fraction)
            ok = apply_packet_loss(
                len(result.wire), scenario.loss_rate, scenario.chunk_bytes,
                (config.seed, t, cid),
            )
            delivered[pos] = ok
            if ok:
                responses.append((cid, result.n_samples, result.wire))
        new_adapter, _bad = server_aggregate(
            model.adapter, responses, groups, config.eta_server
        )
        model.adapter = new_adapter
        timing = round_time(comp, comm, avail, scenario.server_seconds)
        energy = round_energy(scenario.energy, comp, comm, avail)
        yield RoundLog(
            round_index=t,
            client_ids=list(plan.sampled),
            available=[bool(a) for a in avail],
            payload_bits=bits,
            comp_seconds=[float(x) for x in comp],
            comm_seconds=[float(x) for x in comm],
            rate_bps=[float(x) for x in rates],
            delivered=delivered,
            round_seconds=timing.round_seconds,
            mean_energy_joules=energy.mean_joules,
            straggler_energy_joules=energy.straggler_joules,
            accuracy=evaluate_critical_accuracy(model, holdout),
            mean_distortion=float(np.mean(distortions)) if distortions else 0.0,
            retained_fraction=float(np.mean(retained)) if retained else 1.0,
        )
