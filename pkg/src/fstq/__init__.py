"""Fisher-guided sparse mixed-precision uplink compression, simulated end to end.

The package splits into a numeric core (toy_model, fisher), the codec
(allocation, quantization, wire format, baselines), the protocol layer
(fed_protocol), the network cost model (netsim), data/metrics helpers, and a
CLI (``fstq``) that drives full experiments from a JSON config.
"""

from .codec import (
    BitAllocation,
    CompressionPolicyConfig,
    CostModel,
    MessageDecodeError,
    QuantGroup,
    SparseUpdateMessage,
    canonical_test_vector,
    compress_update,
    dequantize_message,
    greedy_budget_allocate,
    lora_groups,
    pack,
    payload_bits,
    percentile_allocate,
    unpack,
)
from .datasets import SyntheticTaskSpec, generate_synthetic_dataset, holdout_split
from .fed_protocol import (
    ClientState,
    FederatedConfig,
    client_round,
    partition_dirichlet,
    plan_round,
    run_federation,
    server_aggregate,
)
from .fisher import DiagonalFisher, TokenSensitivityTracker, retained_count, topk_mask
from .metrics import MetricsReport, RoundLog, compute_metrics, evaluate_critical_accuracy
from .netsim import ChannelProfile, ComputeModel, EnergyModel, NetworkScenario, comm_time
from .toy_model import LoraAdapter, ToyModel, batch_backward, batch_forward, build_model

__version__ = "0.1.0"

__all__ = [
    "BitAllocation",
    "ChannelProfile",
    "ClientState",
    "CompressionPolicyConfig",
    "ComputeModel",
    "CostModel",
    "DiagonalFisher",
    "EnergyModel",
    "FederatedConfig",
    "LoraAdapter",
    "MessageDecodeError",
    "MetricsReport",
    "NetworkScenario",
    "QuantGroup",
    "RoundLog",
    "SparseUpdateMessage",
    "SyntheticTaskSpec",
    "TokenSensitivityTracker",
    "ToyModel",
    "batch_backward",
    "batch_forward",
    "build_model",
    "canonical_test_vector",
    "client_round",
    "comm_time",
    "compress_update",
    "compute_metrics",
    "dequantize_message",
    "evaluate_critical_accuracy",
    "generate_synthetic_dataset",
    "greedy_budget_allocate",
    "holdout_split",
    "lora_groups",
    "pack",
    "partition_dirichlet",
    "payload_bits",
    "percentile_allocate",
    "plan_round",
    "retained_count",
    "run_federation",
    "server_aggregate",
    "topk_mask",
    "unpack",
]
