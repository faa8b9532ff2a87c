"""Recall, round-log folding, and rigged-model evaluation oracles."""

import numpy as np
import pytest

from fstq.datasets import SyntheticTaskSpec, generate_synthetic_dataset
from fstq.metrics import (
    RoundLog,
    compute_metrics,
    evaluate_critical_accuracy,
    reference_top_set,
    retained_mask_set,
    sensitivity_scores,
    token_recall,
)
from fstq.toy_model import (
    EmbeddingTable,
    LoraAdapter,
    ToyModel,
    batch_backward,
)


def make_log(i, accuracy, payload_bits, delivered=None, round_seconds=10.0):
    n = len(payload_bits)
    delivered = [True] * n if delivered is None else delivered
    return RoundLog(
        round_index=i,
        client_ids=list(range(n)),
        available=[True] * n,
        payload_bits=payload_bits,
        comp_seconds=[0.02] * n,
        comm_seconds=[0.01] * n,
        rate_bps=[20e6] * n,
        delivered=delivered,
        round_seconds=round_seconds,
        mean_energy_joules=1.0,
        straggler_energy_joules=2.0,
        accuracy=accuracy,
        mean_distortion=0.0,
        retained_fraction=1.0,
    )


def one_hot_model(vocab_size: int) -> ToyModel:
    """Identity embeddings, zero head, zero adapter: every logit is 0."""
    emb = EmbeddingTable(np.eye(vocab_size))
    adapter = LoraAdapter(
        np.zeros((1, vocab_size)), np.zeros((vocab_size, 1)), alpha_lora=1.0
    )
    return ToyModel(emb, np.zeros((vocab_size, vocab_size)), adapter)


# --- token recall ---


def test_token_recall_hand_case():
    ref = {(0, 1), (0, 2), (1, 0)}
    kept = {(0, 1), (1, 0), (5, 5)}
    assert token_recall(ref, kept) == pytest.approx(2 / 3)
    assert token_recall(set(), kept) == 1.0
    assert token_recall(ref, set()) == 0.0


# --- log folding ---


def test_compute_metrics_time_to_target_hand_case():
    logs = [
        make_log(0, 0.2, [800, 800]),
        make_log(1, 0.9, [800, 1600]),
        make_log(2, 0.95, [400, 400]),
    ]
    report = compute_metrics(logs, target_accuracy=0.85)
    assert report.reached_target
    assert report.time_to_target_seconds == pytest.approx(20.0)
    assert report.rounds_to_target == 2
    assert report.uplink_bytes_to_target == (800 + 800 + 800 + 1600) // 8
    assert report.cumulative_uplink_bytes == (800 + 800 + 800 + 1600 + 400 + 400) // 8
    assert report.total_time_seconds == pytest.approx(30.0)
    assert report.final_accuracy == 0.95
    assert report.rounds == 3


def test_compute_metrics_target_counts_delivered_bytes_only():
    logs = [make_log(0, 0.99, [800, 800], delivered=[True, False])]
    report = compute_metrics(logs, target_accuracy=0.5)
    assert report.cumulative_uplink_bytes == 100
    assert logs[0].delivered_bytes() == 100


def test_compute_metrics_never_reached_and_empty():
    logs = [make_log(0, 0.2, [80]), make_log(1, 0.3, [80])]
    report = compute_metrics(logs, target_accuracy=0.99)
    assert not report.reached_target
    assert report.time_to_target_seconds is None
    assert report.rounds_to_target is None
    assert report.uplink_bytes_to_target is None
    assert report.cumulative_uplink_bytes == 20
    empty = compute_metrics([], target_accuracy=0.5)
    assert empty.rounds == 0 and empty.final_accuracy == 0.0
    assert any("zero rounds" in n for n in empty.notes)


def test_round_log_dict_round_trip():
    log = make_log(7, 0.5, [392])
    assert RoundLog.from_dict(log.to_dict()) == log


# --- rigged-model evaluation ---


def test_critical_accuracy_zero_and_one_endpoints():
    spec = SyntheticTaskSpec(vocab_size=8, num_critical=1, size=20, seed=5)
    items = generate_synthetic_dataset(spec)
    model = one_hot_model(8)
    # all-zero logits: argmax is token 0, never the target (id 1)
    assert evaluate_critical_accuracy(model, items) == 0.0
    # bias the target row: its logit is the positive prefix mass, rest stay 0
    model.w0[1, :] = 10.0
    assert evaluate_critical_accuracy(model, items) == 1.0


def test_critical_accuracy_counts_only_solvable_class():
    # two classes; only class 0's target row reacts to the planted token
    spec = SyntheticTaskSpec(vocab_size=10, num_critical=2, size=60, seed=6)
    items = generate_synthetic_dataset(spec)
    model = one_hot_model(10)
    # logit of target 2 = 5 * (share of token 0 in the prefix); token 0 only
    # occurs in class-0 sequences, so class 1 stays at the all-zero tie
    model.w0[2, 0] = 5.0
    expected = sum(it.label == 0 for it in items) / len(items)
    assert 0.0 < expected < 1.0
    assert evaluate_critical_accuracy(model, items) == pytest.approx(expected)
    with pytest.raises(ValueError):
        evaluate_critical_accuracy(model, [])


# --- sensitivity scoring ---


def test_sensitivity_scores_match_direct_backward():
    spec = SyntheticTaskSpec(vocab_size=16, num_critical=3, size=7, seed=8)
    items = generate_synthetic_dataset(spec)
    rng = np.random.default_rng(0)
    emb = EmbeddingTable(rng.standard_normal((16, 5)))
    adapter = LoraAdapter(rng.standard_normal((2, 5)), rng.standard_normal((16, 2)), 8.0)
    model = ToyModel(emb, rng.standard_normal((16, 5)), adapter)
    scores = sensitivity_scores(model, items)
    assert len(scores) == len(items)
    for it, s in zip(items, scores):
        assert s.shape == (len(it) - 1,)
        assert (s >= 0.0).all()
        tokens = np.array([it.tokens])
        _, _, _, grads = batch_backward(model, tokens, need_embed_grads=True)
        direct = (grads[0] ** 2).sum(axis=-1)[:-1]
        np.testing.assert_allclose(s, direct, rtol=1e-12)


# --- top-set selection ---


def test_reference_top_set_orders_and_breaks_ties_low():
    scores = [np.array([3.0, 1.0]), np.array([2.0, 2.0])]
    assert reference_top_set(scores, 0.5) == {(0, 0), (1, 0)}
    assert reference_top_set(scores, 1.0) == {(0, 0), (0, 1), (1, 0), (1, 1)}
    # k = ceil(0.3 * 4) = 2
    assert reference_top_set(scores, 0.3) == {(0, 0), (1, 0)}
    with pytest.raises(ValueError):
        reference_top_set(scores, 0.0)
    with pytest.raises(ValueError):
        reference_top_set(scores, 1.2)


def test_retained_mask_set_applies_ratio_per_sequence():
    scores = [np.array([5.0, 1.0, 9.0]), np.array([1.0, 1.0, 0.0])]
    # ceil(0.5 * 3) = 2 per sequence; ties keep the lower position
    kept = retained_mask_set(scores, 0.5)
    assert kept == {(0, 2), (0, 0), (1, 0), (1, 1)}
    full = retained_mask_set(scores, 1.0)
    assert len(full) == 6
