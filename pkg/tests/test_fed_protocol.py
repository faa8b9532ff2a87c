"""Partitioning, round planning, client/server protocol, and FedAvg parity."""

import collections

import numpy as np
import pytest

from fstq.codec import (
    CompressionPolicyConfig,
    compress_update,
    dequantize_message,
    lora_groups,
    pack,
)
from fstq.datasets import SyntheticTaskSpec, generate_synthetic_dataset, holdout_split
from fstq.fed_protocol import (
    ClientState,
    FederatedConfig,
    client_round,
    partition_dirichlet,
    plan_round,
    run_federation,
    server_aggregate,
)
from fstq.netsim import NetworkScenario
from fstq.toy_model import (
    LoraAdapter,
    build_model,
    flatten_adapter,
    unflatten_adapter,
)
from helpers import plain_local_sgd_delta


def small_task(size=40, seed=0, num_critical=3, vocab=16):
    spec = SyntheticTaskSpec(
        vocab_size=vocab, seq_len=21, num_critical=num_critical, size=size, seed=seed
    )
    return generate_synthetic_dataset(spec)


def small_model(vocab=16, seed=0):
    return build_model(vocab_size=vocab, embed_dim=6, rank=2, alpha_lora=4.0, seed=seed)


def item_key(it):
    return (it.tokens, it.label, it.critical_pos)


# --- partitioning ---


def test_partition_single_client_gets_everything():
    items = small_task()
    shards = partition_dirichlet(items, num_clients=1, alpha=0.1, seed=0)
    assert len(shards) == 1
    assert sorted(map(item_key, shards[0])) == sorted(map(item_key, items))


def test_partition_is_disjoint_and_exhaustive():
    items = small_task(size=97)
    shards = partition_dirichlet(items, num_clients=7, alpha=0.5, seed=4)
    assert len(shards) == 7
    flat = [it for shard in shards for it in shard]
    assert len(flat) == len(items)
    assert collections.Counter(map(item_key, flat)) == collections.Counter(
        map(item_key, items)
    )


def test_partition_skew_grows_as_alpha_shrinks():
    items = small_task(size=300, num_critical=6, vocab=20)

    def mean_max_class_share(alpha, seed):
        shards = partition_dirichlet(items, num_clients=10, alpha=alpha, seed=seed)
        shares = []
        for shard in shards:
            if not shard:
                continue
            counts = collections.Counter(it.label for it in shard)
            shares.append(max(counts.values()) / len(shard))
        return float(np.mean(shares))

    skewed = np.mean([mean_max_class_share(0.1, s) for s in range(50)])
    mixed = np.mean([mean_max_class_share(10.0, s) for s in range(50)])
    assert skewed > mixed


def test_partition_determinism_empty_and_validation():
    items = small_task(size=30)
    a = partition_dirichlet(items, 5, 0.3, seed=8)
    b = partition_dirichlet(items, 5, 0.3, seed=8)
    assert [list(map(item_key, s)) for s in a] == [list(map(item_key, s)) for s in b]
    empty = partition_dirichlet([], 4, 1.0, seed=0)
    assert empty == [[], [], [], []]
    with pytest.raises(ValueError):
        partition_dirichlet(items, 0, 1.0, seed=0)
    with pytest.raises(ValueError):
        partition_dirichlet(items, 3, 0.0, seed=0)


# --- round planning ---


def test_plan_round_shape_determinism_and_zero_dropout():
    config = FederatedConfig(num_clients=30, sampled_per_round=8, p_drop=0.0, seed=5)
    plan = plan_round(config, 3)
    assert plan.round_index == 3
    assert len(plan.sampled) == 8
    assert len(set(plan.sampled)) == 8
    assert plan.sampled == tuple(sorted(plan.sampled))
    assert all(0 <= c < 30 for c in plan.sampled)
    assert all(plan.available)
    assert plan_round(config, 3) == plan
    assert plan_round(config, 4) != plan


def test_plan_round_ignores_training_and_compression_knobs():
    base = FederatedConfig(num_clients=40, sampled_per_round=6, p_drop=0.3, seed=11)
    variant = FederatedConfig(
        num_clients=40,
        sampled_per_round=6,
        p_drop=0.3,
        seed=11,
        eta=0.7,
        local_steps=1,
        b_max=2048,
        policy=CompressionPolicyConfig(mode="qsgd"),
    )
    for t in range(6):
        assert plan_round(base, t) == plan_round(variant, t)
    with pytest.raises(ValueError):
        plan_round(base, -1)


def test_config_validation():
    with pytest.raises(ValueError):
        FederatedConfig(p_drop=1.0)  # would stall every round
    with pytest.raises(ValueError):
        FederatedConfig(num_clients=4, sampled_per_round=5)
    with pytest.raises(ValueError):
        FederatedConfig(mask_interval=0)
    with pytest.raises(ValueError):
        FederatedConfig(token_keep_ratio=0.0)
    with pytest.raises(ValueError):
        FederatedConfig(eta=0.0)
    with pytest.raises(ValueError):
        FederatedConfig(rho=1.0)


def test_effective_policy_prefers_config_budget():
    cfg = FederatedConfig(b_max=4000)
    assert cfg.effective_policy().mode == "budget"
    assert cfg.effective_policy().b_max == 4000
    assert FederatedConfig().effective_policy().mode == "percentile"
    qsgd = FederatedConfig(policy=CompressionPolicyConfig(mode="qsgd"), b_max=4000)
    assert qsgd.effective_policy().mode == "qsgd"  # budget only steers ladder modes


# --- client rounds ---


def identity_config(local_steps=3, **kw):
    return FederatedConfig(
        num_clients=1,
        sampled_per_round=1,
        local_steps=local_steps,
        eta=0.05,
        mask_interval=1,
        token_keep_ratio=1.0,
        p_drop=0.0,
        policy=CompressionPolicyConfig(mode="lossless"),
        **kw,
    )




def test_client_round_identity_config_transmits_the_sgd_delta():
    items = small_task(size=12, seed=2)
    model = small_model(seed=3)
    config = identity_config()
    result = client_round(ClientState(0, items), model, config, round_index=0)
    assert result is not None
    assert result.steps_run == 3
    assert result.retained_fraction == 1.0
    ref = plain_local_sgd_delta(model, items, steps=3, eta=config.eta)
    groups = lora_groups(2, 6, 16)
    dense = dequantize_message(result.message, groups)
    # lossless wire carries the float32 image of the exact delta
    np.testing.assert_array_equal(dense, np.float64(np.float32(ref)))
    np.testing.assert_allclose(dense, ref, rtol=2e-7, atol=1e-12)
    # the local run must not have touched the caller's global model
    np.testing.assert_array_equal(model.adapter.b, np.zeros_like(model.adapter.b))


def test_client_round_zero_steps_sends_header_only():
    items = small_task(size=6, seed=1)
    model = small_model(seed=1)
    result = client_round(ClientState(0, items), model, identity_config(local_steps=0), 0)
    assert result.message.retained == 0
    assert result.payload.total_bits == len(result.wire) * 8
    assert result.payload.index_bits == 0 and result.payload.value_bits == 0
    assert result.distortion == 0.0


def test_client_round_empty_shard_sits_out():
    assert client_round(ClientState(0, []), small_model(), FederatedConfig(), 0) is None


def test_client_round_masked_steps_change_training():
    # a sparse keep ratio with rare refreshes must diverge from full-loss SGD
    items = small_task(size=12, seed=6)
    model = small_model(seed=7)
    config = FederatedConfig(
        num_clients=1,
        sampled_per_round=1,
        local_steps=4,
        eta=0.05,
        mask_interval=2,
        token_keep_ratio=0.3,
        policy=CompressionPolicyConfig(mode="lossless"),
    )
    result = client_round(ClientState(0, items), model, config, 0)
    assert result.retained_fraction == pytest.approx(0.3, abs=0.05)
    ref = plain_local_sgd_delta(model, items, steps=4, eta=0.05)
    dense = dequantize_message(result.message, lora_groups(2, 6, 16))
    assert not np.allclose(dense, ref, rtol=1e-3)


# --- aggregation ---


def lossless_wire(delta, groups):
    policy = CompressionPolicyConfig(mode="lossless")
    res = compress_update(np.asarray(delta, dtype=np.float64), np.ones(len(delta)), groups, policy)
    return pack(res.message, groups), dequantize_message(res.message, groups)


def test_server_aggregate_single_client_identity():
    rng = np.random.default_rng(0)
    adapter = LoraAdapter(rng.standard_normal((2, 4)), rng.standard_normal((5, 2)), 4.0)
    groups = lora_groups(2, 4, 5)
    delta = rng.standard_normal(adapter.num_coords)
    wire, dense = lossless_wire(delta, groups)
    new, bad = server_aggregate(adapter, [(0, 3, wire)], groups, eta_server=1.0)
    assert bad == []
    expected = flatten_adapter(adapter.a, adapter.b) + dense
    np.testing.assert_allclose(flatten_adapter(new.a, new.b), expected, atol=1e-15)
    # input adapter untouched
    assert new is not adapter


def test_server_aggregate_sample_weighted_quarters():
    rng = np.random.default_rng(1)
    adapter = LoraAdapter(rng.standard_normal((1, 3)), rng.standard_normal((4, 1)), 2.0)
    groups = lora_groups(1, 3, 4)
    d1 = rng.standard_normal(adapter.num_coords)
    d2 = rng.standard_normal(adapter.num_coords)
    w1, dense1 = lossless_wire(d1, groups)
    w2, dense2 = lossless_wire(d2, groups)
    new, bad = server_aggregate(adapter, [(0, 1, w1), (1, 3, w2)], groups, eta_server=0.5)
    assert bad == []
    expected = flatten_adapter(adapter.a, adapter.b) + 0.5 * (0.25 * dense1 + 0.75 * dense2)
    np.testing.assert_allclose(flatten_adapter(new.a, new.b), expected, atol=1e-15)


def test_server_aggregate_drops_undecodable_and_reweights(caplog):
    rng = np.random.default_rng(2)
    adapter = LoraAdapter(rng.standard_normal((1, 3)), rng.standard_normal((4, 1)), 2.0)
    groups = lora_groups(1, 3, 4)
    d1 = rng.standard_normal(adapter.num_coords)
    d2 = rng.standard_normal(adapter.num_coords)
    w1, dense1 = lossless_wire(d1, groups)
    w2, _ = lossless_wire(d2, groups)
    corrupt = b"XXXX" + w2[4:]  # break the magic
    with caplog.at_level("WARNING", logger="fstq.fed_protocol"):
        new, bad = server_aggregate(adapter, [(0, 1, w1), (7, 9, corrupt)], groups, 1.0)
    assert bad == [7]
    assert any("client 7" in rec.getMessage() for rec in caplog.records)
    # survivor weight renormalizes to 1.0
    expected = flatten_adapter(adapter.a, adapter.b) + dense1
    np.testing.assert_allclose(flatten_adapter(new.a, new.b), expected, atol=1e-15)


def test_server_aggregate_no_responders_keeps_parameters():
    rng = np.random.default_rng(3)
    adapter = LoraAdapter(rng.standard_normal((1, 3)), rng.standard_normal((4, 1)), 2.0)
    groups = lora_groups(1, 3, 4)
    new, bad = server_aggregate(adapter, [], groups, 1.0)
    np.testing.assert_array_equal(new.a, adapter.a)
    np.testing.assert_array_equal(new.b, adapter.b)
    assert bad == []


def test_server_aggregate_validation():
    rng = np.random.default_rng(4)
    adapter = LoraAdapter(rng.standard_normal((1, 3)), rng.standard_normal((4, 1)), 2.0)
    groups = lora_groups(1, 3, 4)
    wire, _ = lossless_wire(rng.standard_normal(7), groups)
    with pytest.raises(ValueError):
        server_aggregate(adapter, [(0, 0, wire)], groups, 1.0)
    with pytest.raises(ValueError):
        server_aggregate(adapter, [(0, 1, wire)], groups, -1.0)
    small_groups = lora_groups(1, 2, 3)
    small_wire, _ = lossless_wire(rng.standard_normal(5), small_groups)
    with pytest.raises(ValueError):
        server_aggregate(adapter, [(0, 1, small_wire)], small_groups, 1.0)


# --- full federation loop ---


def fed_setup(num_clients=6, size=60, seed=0, rounds=10, **cfg_kw):
    items = small_task(size=size, seed=seed)
    train, hold = holdout_split(items, 0.2)
    config = FederatedConfig(
        num_clients=num_clients,
        sampled_per_round=min(4, num_clients),
        local_steps=2,
        eta=0.05,
        mask_interval=1,
        token_keep_ratio=1.0,
        p_drop=0.1,
        dirichlet_alpha=0.5,
        rounds=rounds,
        seed=seed,
        policy=CompressionPolicyConfig(mode="lossless"),
        **cfg_kw,
    )
    shards = partition_dirichlet(train, num_clients, config.dirichlet_alpha, seed)
    clients = [ClientState(cid, shard) for cid, shard in enumerate(shards)]
    model = small_model(seed=seed)
    return config, clients, model, hold, shards


def test_run_federation_zero_rounds_and_determinism():
    config, clients, model, hold, _ = fed_setup(rounds=0)
    assert list(run_federation(config, NetworkScenario(), model, clients, hold)) == []
    config, clients, model, hold, _ = fed_setup(rounds=4)
    logs_a = [
        log.to_dict()
        for log in run_federation(config, NetworkScenario(), model, clients, hold)
    ]
    config, clients, model, hold, _ = fed_setup(rounds=4)
    logs_b = [
        log.to_dict()
        for log in run_federation(config, NetworkScenario(), model, clients, hold)
    ]
    assert logs_a == logs_b


def test_run_federation_matches_reference_fedavg():
    config, clients, model, hold, shards = fed_setup(rounds=10)
    reference = small_model(seed=config.seed)
    w0_before = model.w0.copy()
    emb_before = model.embeddings.vectors.copy()

    logs = []
    stream = run_federation(config, NetworkScenario(), model, clients, hold)
    for t, log in enumerate(stream):
        logs.append(log)
        # advance the reference with plain FedAvg over the same plan
        plan = plan_round(config, t)
        deltas = []
        for pos, cid in enumerate(plan.sampled):
            if not plan.available[pos] or not shards[cid]:
                continue
            delta = plain_local_sgd_delta(
                reference, shards[cid], config.local_steps, config.eta, config.clip
            )
            deltas.append((len(shards[cid]), delta))
        if deltas:
            total = sum(n for n, _ in deltas)
            agg = sum((n / total) * d for n, d in deltas)
            flat = flatten_adapter(reference.adapter.a, reference.adapter.b) + agg
            reference.adapter.a, reference.adapter.b = unflatten_adapter(
                flat, reference.adapter.a.shape, reference.adapter.b.shape
            )
        diff = np.abs(
            flatten_adapter(model.adapter.a, model.adapter.b)
            - flatten_adapter(reference.adapter.a, reference.adapter.b)
        )
        assert diff.max() <= 1e-6

    assert len(logs) == 10
    # frozen parts stay bit-identical
    np.testing.assert_array_equal(model.w0, w0_before)
    np.testing.assert_array_equal(model.embeddings.vectors, emb_before)
    for log in logs:
        # responders are always a subset of the sampled-and-available set
        for avail, bits, ok in zip(log.available, log.payload_bits, log.delivered):
            if not avail:
                assert bits == 0 and not ok


def test_run_federation_empty_shard_counts_as_unavailable():
    items = small_task(size=10, seed=3)
    config = FederatedConfig(
        num_clients=2,
        sampled_per_round=2,
        local_steps=1,
        p_drop=0.0,
        rounds=1,
        seed=3,
        policy=CompressionPolicyConfig(mode="lossless"),
    )
    clients = [ClientState(0, items), ClientState(1, [])]
    model = small_model(seed=3)
    (log,) = run_federation(config, NetworkScenario(), model, clients, items)
    pos = log.client_ids.index(1)
    assert not log.available[pos]
    assert log.payload_bits[pos] == 0
    assert not log.delivered[pos]


def test_run_federation_client_count_mismatch():
    config, clients, model, hold, _ = fed_setup(num_clients=6)
    with pytest.raises(ValueError):
        next(run_federation(config, NetworkScenario(), model, clients[:-1], hold))
