"""Experiment driver: run, compare, and report on federated compression runs.

Configuration is a single JSON document with a ``schema_version`` and one
object per subsystem (model/data/federation/policy/network/energy/compute/
metrics).  Every key has a default, unknown keys are rejected, and command
line flags override the file.  Outputs are plain text and line-delimited
JSON, written deterministically so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import dataclass

from .codec import CompressionPolicyConfig, canonical_test_vector
from .datasets import LabeledSequence, SyntheticTaskSpec, generate_synthetic_dataset, holdout_split
from .fed_protocol import ClientState, FederatedConfig, partition_dirichlet, run_federation
from .metrics import (
    MetricsReport,
    RoundLog,
    compute_metrics,
    reference_top_set,
    retained_mask_set,
    sensitivity_scores,
    token_recall,
)
from .netsim import ChannelProfile, ComputeModel, EnergyModel, NetworkScenario
from .toy_model import ToyModel, build_model

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

# key -> (kind, default); kinds ending in "?" also accept null
_SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "model": {
        "vocab_size": ("int", 32),
        "embed_dim": ("int", 16),
        "rank": ("int", 8),
        "alpha": ("number", 16.0),
    },
    # noise_rate 0.9 keeps filler targets near-uniform so the planted mapping
    # is the dominant learnable signal; early critical positions keep it from
    # drowning in the prefix mean
    "data": {
        "seq_len": ("int", 21),
        "num_critical": ("int", 4),
        "noise_rate": ("number", 0.9),
        "size": ("int", 360),
        "holdout_fraction": ("number", 0.2),
        "critical_pos_lo": ("int", 1),
        "critical_pos_hi": ("int?", 3),
    },
    "federation": {
        "num_clients": ("int", 20),
        "sampled_per_round": ("int", 8),
        "local_steps": ("int", 5),
        "eta": ("number", 0.3),
        "eta_server": ("number", 1.0),
        "mask_interval": ("int", 5),
        "rho": ("number", 0.9),
        "token_keep_ratio": ("number", 0.8),
        "b_max": ("int?", None),
        "p_drop": ("number", 0.1),
        "dirichlet_alpha": ("number", 0.5),
        "rounds": ("int", 40),
        "clip": ("number?", 1.0),  # global-norm clip keeps eta=0.3 stable
        "seed": ("int", 0),
    },
    "policy": {
        "mode": ("str", "percentile"),
        "lam": ("number", 1e-3),
        "p_high": ("number", 99.0),
        "p_mid": ("number", 90.0),
        "p_low": ("number", 50.0),
        "epsilon_scale": ("number", 1e-12),
        "qsgd_levels": ("int", 7),
        "qsgd_width": ("int", 4),
        "topk_fraction": ("number", 0.1),
    },
    "network": {
        "profile": ("str", "a"),
        "rate_bps": ("number", 20e6),
        "jitter": ("number", 0.0),
        "loss_rate": ("number", 0.0),
        "chunk_bytes": ("int", 1500),
        "server_seconds": ("number", 0.0),
    },
    "energy": {
        "p_comp_watts": ("number", 4.0),
        "p_tx_watts": ("number", 1.5),
    },
    "compute": {
        "base_seconds": ("number", 0.02),
        "jitter": ("number", 0.1),
    },
    "metrics": {
        "target_accuracy": ("number", 0.6),
        "top_fraction": ("number", 0.1),
    },
}


def default_config() -> dict:
    cfg: dict = {"schema_version": SCHEMA_VERSION}
    for section, keys in _SCHEMA.items():
        cfg[section] = {k: v for k, (_, v) in keys.items()}
    return cfg


def _kind_ok(value, kind: str) -> bool:
    if kind.endswith("?"):
        if value is None:
            return True
        kind = kind[:-1]
    if kind == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if kind == "number":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if kind == "str":
        return isinstance(value, str)
    raise AssertionError(kind)


def validate_config(raw: object) -> tuple[dict, list[str]]:
    """Overlay raw onto defaults; return (resolved, problems).

    Problems name the offending key (``section.key``) so a bad file is fixable
    in one pass; resolution still completes so all problems are reported.
    """
    errors: list[str] = []
    cfg = default_config()
    if not isinstance(raw, dict):
        return cfg, ["top level: expected a JSON object"]
    version = raw.get("schema_version")
    if version is None:
        errors.append("schema_version: missing (expected 1)")
    elif version != SCHEMA_VERSION:
        errors.append(f"schema_version: unsupported value {version!r} (expected 1)")
    for section, body in raw.items():
        if section == "schema_version":
            continue
        if section not in _SCHEMA:
            errors.append(f"{section}: unknown section")
            continue
        if not isinstance(body, dict):
            errors.append(f"{section}: expected an object")
            continue
        for key, value in body.items():
            if key not in _SCHEMA[section]:
                errors.append(f"{section}.{key}: unknown key")
                continue
            kind, _ = _SCHEMA[section][key]
            if not _kind_ok(value, kind):
                errors.append(
                    f"{section}.{key}: expected {kind.rstrip('?')}"
                    f"{' or null' if kind.endswith('?') else ''},"
                    f" got {type(value).__name__}"
                )
                continue
            cfg[section][key] = value
    return cfg, errors


def load_config(path: str | None) -> tuple[dict, list[str]]:
    if path is None:
        return default_config(), []
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        return default_config(), [f"cannot read config file: {exc}"]
    except json.JSONDecodeError as exc:
        return default_config(), [f"config is not valid JSON: {exc}"]
    return validate_config(raw)


@dataclass(frozen=True)
class MethodPreset:
    """How a named method reshapes the base configuration."""

    comp_multiplier: float  # local compute cost relative to plain FedAvg
    policy_mode: str | None  # None = honor the configured policy
    dense_tokens: bool  # True = keep every token, no mask schedule or budget


METHOD_PRESETS: dict[str, MethodPreset] = {
    "fed-fstq": MethodPreset(1.17, None, False),
    "fedavg-lossless": MethodPreset(1.0, "lossless", True),
    "qsgd": MethodPreset(1.03, "qsgd", True),
    "topk": MethodPreset(1.06, "topk", True),
}


@dataclass
class Experiment:
    """Everything a single-method run needs, built from one config dict."""

    method: str
    config: FederatedConfig
    scenario: NetworkScenario
    model: ToyModel
    clients: list[ClientState]
    holdout: list[LabeledSequence]
    comp_multiplier: float
    target_accuracy: float
    top_fraction: float


def build_experiment(cfg: dict, method: str) -> Experiment:
    """Instantiate model, data, partition, and protocol config for one method.

    Data, partition, client sampling, and channel draws depend only on the
    seed — never on the method — so methods sharing a seed face identical
    conditions.
    """
    if method not in METHOD_PRESETS:
        raise ValueError(
            f"unknown method {method!r}; expected one of {sorted(METHOD_PRESETS)}"
        )
    preset = METHOD_PRESETS[method]
    fed, pol, mod = cfg["federation"], cfg["policy"], cfg["model"]
    dat, net = cfg["data"], cfg["network"]
    policy = CompressionPolicyConfig(
        mode=preset.policy_mode or pol["mode"],
        lam=pol["lam"],
        p_high=pol["p_high"],
        p_mid=pol["p_mid"],
        p_low=pol["p_low"],
        epsilon_scale=pol["epsilon_scale"],
        qsgd_levels=pol["qsgd_levels"],
        qsgd_width=pol["qsgd_width"],
        topk_fraction=pol["topk_fraction"],
    )
    config = FederatedConfig(
        num_clients=fed["num_clients"],
        sampled_per_round=fed["sampled_per_round"],
        local_steps=fed["local_steps"],
        eta=fed["eta"],
        eta_server=fed["eta_server"],
        mask_interval=1 if preset.dense_tokens else fed["mask_interval"],
        rho=fed["rho"],
        token_keep_ratio=1.0 if preset.dense_tokens else fed["token_keep_ratio"],
        b_max=None if preset.dense_tokens else fed["b_max"],
        p_drop=fed["p_drop"],
        dirichlet_alpha=fed["dirichlet_alpha"],
        rounds=fed["rounds"],
        seed=fed["seed"],
        clip=fed["clip"],
        policy=policy,
    )
    spec = SyntheticTaskSpec(
        vocab_size=mod["vocab_size"],
        seq_len=dat["seq_len"],
        num_critical=dat["num_critical"],
        noise_rate=dat["noise_rate"],
        size=dat["size"],
        seed=config.seed,
        critical_pos_lo=dat["critical_pos_lo"],
        critical_pos_hi=dat["critical_pos_hi"],
    )
    train, holdout = holdout_split(generate_synthetic_dataset(spec), dat["holdout_fraction"])
    shards = partition_dirichlet(train, config.num_clients, config.dirichlet_alpha, config.seed)
    clients = [ClientState(i, shard) for i, shard in enumerate(shards)]
    model = build_model(
        mod["vocab_size"], mod["embed_dim"], mod["rank"], mod["alpha"], config.seed
    )
    kind = net["profile"].lower()
    if kind == "a":
        profile = ChannelProfile.fixed(net["rate_bps"])
    elif kind == "b":
        profile = ChannelProfile.heterogeneous(jitter=net["jitter"])
    else:
        raise ValueError(f"network.profile: expected 'a' or 'b', got {net['profile']!r}")
    scenario = NetworkScenario(
        profile=profile,
        energy=EnergyModel(cfg["energy"]["p_comp_watts"], cfg["energy"]["p_tx_watts"]),
        compute=ComputeModel(cfg["compute"]["base_seconds"], cfg["compute"]["jitter"]),
        loss_rate=net["loss_rate"],
        chunk_bytes=net["chunk_bytes"],
        server_seconds=net["server_seconds"],
    )
    return Experiment(
        method=method,
        config=config,
        scenario=scenario,
        model=model,
        clients=clients,
        holdout=holdout,
        comp_multiplier=preset.comp_multiplier,
        target_accuracy=cfg["metrics"]["target_accuracy"],
        top_fraction=cfg["metrics"]["top_fraction"],
    )


def final_token_recall(exp: Experiment) -> float:
    """Overlap between the mask policy's kept positions and the exact top set.

    Both sets come from full-loss sensitivities of the final global model on
    the holdout corpus, so the number isolates what masking discards.
    """
    scores = sensitivity_scores(exp.model, exp.holdout)
    reference = reference_top_set(scores, exp.top_fraction)
    kept = retained_mask_set(scores, exp.config.token_keep_ratio)
    return token_recall(reference, kept)


def _write_atomic(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def format_summary(method: str, report: MetricsReport) -> str:
    def opt_num(x) -> str:
        return "n/a" if x is None else f"{x:.6f}"

    def opt_int(x) -> str:
        return "n/a" if x is None else str(x)

    lines = [
        f"method: {method}",
        f"rounds: {report.rounds}",
        f"final_accuracy: {report.final_accuracy:.6f}",
        f"target_accuracy: {report.target_accuracy:.6f}",
        f"reached_target: {'yes' if report.reached_target else 'no'}",
        f"rounds_to_target: {opt_int(report.rounds_to_target)}",
        f"time_to_target_seconds: {opt_num(report.time_to_target_seconds)}",
        f"uplink_bytes_to_target: {opt_int(report.uplink_bytes_to_target)}",
        f"cumulative_uplink_bytes: {report.cumulative_uplink_bytes}",
        f"total_time_seconds: {report.total_time_seconds:.6f}",
        f"token_recall: {opt_num(report.token_recall)}",
        f"notes: {'; '.join(report.notes) if report.notes else '-'}",
    ]
    return "\n".join(lines) + "\n"


def run_experiment(cfg: dict, method: str, out_dir: str) -> MetricsReport:
    """Run one method and leave rounds.jsonl, run.json, summary.txt in out_dir.

    rounds.jsonl is appended and flushed round by round, so a long run can be
    tailed and a crash keeps everything already simulated.
    """
    exp = build_experiment(cfg, method)
    os.makedirs(out_dir, exist_ok=True)
    logs: list[RoundLog] = []
    rounds_path = os.path.join(out_dir, "rounds.jsonl")
    with open(rounds_path, "w", encoding="utf-8") as fh:
        for entry in run_federation(
            exp.config, exp.scenario, exp.model, exp.clients, exp.holdout,
            comp_multiplier=exp.comp_multiplier,
        ):
            fh.write(json.dumps(entry.to_dict(), sort_keys=True) + "\n")
            fh.flush()
            logs.append(entry)
    recall = final_token_recall(exp)
    report = compute_metrics(logs, exp.target_accuracy, recall)
    run_meta = {
        "schema_version": SCHEMA_VERSION,
        "method": method,
        "config": cfg,
        "token_recall": recall,
    }
    _write_atomic(
        os.path.join(out_dir, "run.json"),
        json.dumps(run_meta, indent=2, sort_keys=True) + "\n",
    )
    _write_atomic(os.path.join(out_dir, "summary.txt"), format_summary(method, report))
    return report


_CSV_FIELDS = [
    "method",
    "rounds",
    "final_accuracy",
    "reached_target",
    "rounds_to_target",
    "time_to_target_seconds",
    "uplink_bytes_to_target",
    "cumulative_uplink_bytes",
    "total_time_seconds",
    "token_recall",
]


def _csv_row(method: str, report: MetricsReport) -> dict[str, str]:
    def opt(x, fmt: str = "{}") -> str:
        return "" if x is None else fmt.format(x)

    return {
        "method": method,
        "rounds": str(report.rounds),
        "final_accuracy": f"{report.final_accuracy:.6f}",
        "reached_target": "yes" if report.reached_target else "no",
        "rounds_to_target": opt(report.rounds_to_target),
        "time_to_target_seconds": opt(report.time_to_target_seconds, "{:.6f}"),
        "uplink_bytes_to_target": opt(report.uplink_bytes_to_target),
        "cumulative_uplink_bytes": str(report.cumulative_uplink_bytes),
        "total_time_seconds": f"{report.total_time_seconds:.6f}",
        "token_recall": opt(report.token_recall, "{:.6f}"),
    }


def write_compare_csv(path: str, rows: list[dict[str, str]]) -> None:
    """Rewrite the whole table atomically; partial files never appear."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=_CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    _write_atomic(path, buf.getvalue())


def compare_methods(cfg: dict, methods: list[str], out_dir: str) -> dict[str, MetricsReport]:
    """Run each method on the shared seed; refresh compare.csv after each."""
    os.makedirs(out_dir, exist_ok=True)
    reports: dict[str, MetricsReport] = {}
    rows: list[dict[str, str]] = []
    for method in methods:
        report = run_experiment(cfg, method, os.path.join(out_dir, method))
        reports[method] = report
        rows.append(_csv_row(method, report))
        write_compare_csv(os.path.join(out_dir, "compare.csv"), rows)
    return reports


def regenerate_summary(out_dir: str) -> str:
    """Rebuild summary.txt for a finished run directory from its artifacts."""
    with open(os.path.join(out_dir, "run.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    logs = []
    with open(os.path.join(out_dir, "rounds.jsonl"), encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                logs.append(RoundLog.from_dict(json.loads(line)))
    report = compute_metrics(
        logs, meta["config"]["metrics"]["target_accuracy"], meta["token_recall"]
    )
    text = format_summary(meta["method"], report)
    _write_atomic(os.path.join(out_dir, "summary.txt"), text)
    return text


def _apply_overrides(cfg: dict, args: argparse.Namespace) -> None:
    if getattr(args, "seed", None) is not None:
        cfg["federation"]["seed"] = args.seed
    if getattr(args, "rounds", None) is not None:
        cfg["federation"]["rounds"] = args.rounds
    if getattr(args, "target_acc", None) is not None:
        cfg["metrics"]["target_accuracy"] = args.target_acc
    if getattr(args, "profile", None) is not None:
        cfg["network"]["profile"] = args.profile


def _fail_config(errors: list[str]) -> int:
    for err in errors:
        print(f"config error: {err}", file=sys.stderr)
    return 2


def _cmd_run(args: argparse.Namespace) -> int:
    cfg, errors = load_config(args.config)
    if errors:
        return _fail_config(errors)
    _apply_overrides(cfg, args)
    try:
        report = run_experiment(cfg, args.method, args.out)
    except ValueError as exc:
        return _fail_config([str(exc)])
    sys.stdout.write(format_summary(args.method, report))
    return 0


def _cmd_compare(args: argparse.Namespace) -> int:
    cfg, errors = load_config(args.config)
    if errors:
        return _fail_config(errors)
    _apply_overrides(cfg, args)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    if not methods:
        return _fail_config(["--methods: no methods given"])
    unknown = [m for m in methods if m not in METHOD_PRESETS]
    if unknown:
        return _fail_config(
            [f"--methods: unknown method {m!r}; expected one of "
             f"{sorted(METHOD_PRESETS)}" for m in unknown]
        )
    try:
        reports = compare_methods(cfg, methods, args.out)
    except ValueError as exc:
        return _fail_config([str(exc)])
    for method in methods:
        sys.stdout.write(format_summary(method, reports[method]))
        sys.stdout.write("\n")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    try:
        text = regenerate_summary(args.out)
    except OSError as exc:
        print(f"report error: {exc}", file=sys.stderr)
        return 1
    sys.stdout.write(text)
    return 0


def _cmd_emit_test_vector(args: argparse.Namespace) -> int:
    _, wire = canonical_test_vector()
    _write_atomic(args.out, wire.hex() + "\n")
    print(f"wrote {len(wire)} bytes ({len(wire) * 8} bits) to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fstq",
        description="Desk-scale simulator for Fisher-guided sparse uplink compression.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON config file (defaults apply if omitted)")
        p.add_argument("--seed", type=int, help="override federation.seed")
        p.add_argument("--rounds", type=int, help="override federation.rounds")
        p.add_argument(
            "--target-acc", type=float, dest="target_acc",
            help="override metrics.target_accuracy",
        )
        p.add_argument(
            "--profile", choices=["a", "b"], help="override network.profile"
        )

    p_run = sub.add_parser("run", help="run one method and write its artifacts")
    add_common(p_run)
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument(
        "--method", default="fed-fstq", choices=sorted(METHOD_PRESETS),
        help="method preset (default: fed-fstq)",
    )
    p_run.set_defaults(func=_cmd_run)

    p_cmp = sub.add_parser("compare", help="run several methods on a shared seed")
    add_common(p_cmp)
    p_cmp.add_argument("--out", required=True, help="output directory")
    p_cmp.add_argument(
        "--methods", default=",".join(sorted(METHOD_PRESETS)),
        help="comma-separated method list (default: all)",
    )
    p_cmp.set_defaults(func=_cmd_compare)

    p_rep = sub.add_parser("report", help="regenerate summary.txt from a run directory")
    p_rep.add_argument("--out", required=True, help="run directory to summarize")
    p_rep.set_defaults(func=_cmd_report)

    p_vec = sub.add_parser(
        "emit-test-vector", help="write the canonical 392-bit wire message as hex"
    )
    p_vec.add_argument(
        "--out", default="message_392bit.hex", help="output file (default: %(default)s)"
    )
    p_vec.set_defaults(func=_cmd_emit_test_vector)
    return parser


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("FSTQ_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
