"""Command-line entry point wiring the full pipeline: calibration,
commitment, optimistic execution with disputes, replay, attacks, and
microbenchmarks.

Exit codes: 0 ok, 2 verification failure, 3 timeout loss, 4 config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import dispute as dsp
from .attack import evaluate, honest_false_positive_rate, write_results_csv
from .calibration import (ThresholdSet, build_thresholds, calibrate,
                          stability_report, stability_samples_from_calibration)
from .commitments import canonical_json_bytes, sha256
from .config import RunConfig
from .engine import load_trace, save_trace
from .graph import load_graph, save_graph
from .models import MODEL_NAMES, ModelSpec, build_chain, build_model
from .tensor import Rng, load_tensor, save_tensor

EXIT_OK = 0
EXIT_VERIFICATION = 2
EXIT_TIMEOUT = 3
EXIT_CONFIG = 4


class CliError(Exception):
    def __init__(self, message, code=EXIT_CONFIG):
        super().__init__(message)
        self.code = code


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for key in ("graph", "weights", "thresholds", "ledger", "model", "n_partition",
                "window", "alpha", "dataset_size", "data_seed", "attack_seed",
                "committee_size", "mode"):
        if hasattr(args, key):
            overrides[key] = getattr(args, key)
    cfg.apply_overrides(overrides)
    return cfg


def _model_spec(cfg: RunConfig) -> ModelSpec:
    if cfg.graph:
        if not cfg.weights:
            raise CliError("--graph requires --weights")
        g = load_graph(cfg.graph, cfg.weights)
        kinds = {}
        for name, shape in g.inputs:
            kinds[name] = ("uniform", -1.0, 1.0)
        return ModelSpec("file", g, kinds, n_classes=0)
    if cfg.model.startswith("chain:"):
        return build_chain(n_nodes=int(cfg.model.split(":", 1)[1]), seed=cfg.data_seed)
    return build_model(cfg.model)


def _thresholds(cfg: RunConfig, spec: ModelSpec, allow_build=False) -> ThresholdSet:
    if cfg.thresholds and Path(cfg.thresholds).exists():
        return ThresholdSet.load(cfg.thresholds)
    if not allow_build:
        raise CliError(f"threshold file {cfg.thresholds!r} not found; run calibrate first")
    return _calibrate_thresholds(cfg, spec)[0]


def _calibrate_thresholds(cfg: RunConfig, spec: ModelSpec):
    profiles = cfg.calibration_profiles()
    if len(profiles) < 2:
        raise CliError("calibration needs at least 2 device profiles")
    rng = Rng(cfg.data_seed)
    dataset = [spec.make_inputs(rng) for _ in range(cfg.dataset_size)]
    envelopes = calibrate(spec.graph, dataset, profiles, epsilon=cfg.epsilon)
    thresholds = build_thresholds(envelopes, alpha=cfg.alpha, epsilon=cfg.epsilon)
    return thresholds, envelopes


def _state_digest(state: dsp.DisputeState) -> str:
    doc = asdict(state)
    doc["outcome"] = asdict(state.outcome) if state.outcome else None
    canonical = json.loads(json.dumps(doc, default=list))  # tuples -> lists
    return sha256(canonical_json_bytes(canonical)).hex()


def _write_state_summary(path, state: dsp.DisputeState) -> None:
    with open(path, "w") as fh:
        json.dump({"state_digest": _state_digest(state)}, fh)


def _outcome_exit_code(state: dsp.DisputeState) -> int:
    v = state.outcome
    if v is None:
        return EXIT_VERIFICATION
    if v.path == "timeout":
        return EXIT_TIMEOUT
    if v.path == "record":
        return EXIT_VERIFICATION
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _load_config(args)
    spec = _model_spec(cfg)
    thresholds, envelopes = _calibrate_thresholds(cfg, spec)
    out = args.out or cfg.thresholds or "thresholds.json"
    thresholds.save(out)
    print(f"wrote {out} ({len(thresholds.ops)} operators, alpha={thresholds.alpha})")

    if cfg.dataset_size > 10:
        samples = stability_samples_from_calibration(envelopes)
        report = stability_report(samples, window=min(10, cfg.dataset_size - 1),
                                  epsilon=cfg.epsilon)
        stability_out = args.stability_out or "stability.csv"
        Path(stability_out).write_text(report.to_csv())
        print(f"wrote {stability_out}")
        for metric in ("SupNorm", "Jackknife", "TailAdj", "RollSD"):
            mid = [report.aggregate[metric][p]["p50"] for p in report.percentiles]
            hi = [report.aggregate[metric][p]["p90"] for p in report.percentiles]
            print(f"  {metric:10s} @50 max={max(mid):.4f}  @90 max={max(hi):.4f}")
    return EXIT_OK


def _setup_run(cfg: RunConfig, args):
    spec = _model_spec(cfg)
    thresholds = _thresholds(cfg, spec, allow_build=True)
    profiles = cfg.device_profiles()
    rng = Rng(cfg.data_seed + 7)
    inputs = spec.make_inputs(rng)
    inject = None
    if getattr(args, "inject", None):
        from .engine import execute

        fields = dict(kv.split("=", 1) for kv in args.inject.split(","))
        name = fields["node"]
        scale = float(fields.get("scale", 10.0))
        index = {n.name: n.index for n in spec.graph.nodes}[name]
        _, trace = execute(spec.graph, inputs, profiles[0])
        inject = {index: dsp.make_injection(thresholds, name,
                                            trace.tensors[index].shape, scale)}
    return spec, thresholds, profiles, inputs, inject


def cmd_run(args) -> int:
    cfg = _load_config(args)
    spec, thresholds, profiles, inputs, inject = _setup_run(cfg, args)
    protocol = cfg.protocol()
    proposer = dsp.Proposer(spec.graph, inputs, profiles[0], thresholds, protocol,
                            inject=inject)
    challenger = dsp.Challenger(spec.graph, inputs, profiles[1 % len(profiles)],
                                thresholds, protocol,
                                force_challenge=bool(getattr(args, "force", False)))
    result = dsp.run_dispute(spec.graph, inputs, proposer, challenger, protocol,
                             cfg.committee_pool())
    ledger_path = cfg.ledger or "ledger.jsonl"
    result.ledger.save_jsonl(ledger_path)
    _write_state_summary(str(ledger_path) + ".state.json", result.state)
    v = result.state.outcome
    print(f"settled: winner={v.winner} path={v.path} rounds={result.state.round}")
    if v.path in ("theoretical", "committee", "timeout", "record"):
        print(f"dcr: {result.dcr()}")
    print(f"ledger: {ledger_path}")
    return _outcome_exit_code(result.state)


def cmd_commit(args) -> int:
    cfg = _load_config(args)
    spec = _model_spec(cfg)
    thresholds = _thresholds(cfg, spec, allow_build=True)
    profiles = cfg.device_profiles()
    rng = Rng(cfg.data_seed + 7)
    inputs = spec.make_inputs(rng)
    protocol = cfg.protocol()
    proposer = dsp.Proposer(spec.graph, inputs, profiles[0], thresholds, protocol)

    outdir = Path(args.out or "commit_artifacts")
    outdir.mkdir(parents=True, exist_ok=True)
    save_trace(outdir / "trace", proposer.trace)
    (outdir / "inputs").mkdir(exist_ok=True)
    for name, t in inputs.items():
        save_tensor(outdir / "inputs" / f"{name}.naot", t)
    save_graph(outdir / "graph.json", spec.graph, outdir / "weights")
    thresholds.save(outdir / "thresholds.json")
    with open(outdir / "commitment.json", "w") as fh:
        json.dump(proposer.commitment().to_json(), fh, sort_keys=True, indent=1)
    ledger = dsp.Ledger()
    ledger.append("proposer", "commit", proposer.commit_payload())
    ledger.save_jsonl(outdir / "ledger.jsonl")
    print(f"committed c0={proposer.commitment().c0.hex()} -> {outdir}")
    return EXIT_OK


def cmd_challenge(args) -> int:
    cfg = _load_config(args)
    artifacts = Path(args.artifacts)
    if not artifacts.exists():
        raise CliError(f"artifact directory {artifacts} not found")
    g = load_graph(artifacts / "graph.json", artifacts / "weights")
    thresholds = ThresholdSet.load(artifacts / "thresholds.json")
    trace = load_trace(artifacts / "trace")
    inputs = {}
    for f in sorted((artifacts / "inputs").glob("*.naot")):
        inputs[f.stem] = load_tensor(f)
    profiles = cfg.device_profiles()
    proposer_profile = next((p for p in profiles if p.id == trace.profile_id), profiles[0])
    challenger_profile = next((p for p in profiles if p.id != trace.profile_id),
                              profiles[1 % len(profiles)])
    protocol = cfg.protocol()
    proposer = dsp.Proposer(g, inputs, proposer_profile, thresholds, protocol, trace=trace)
    challenger = dsp.Challenger(g, inputs, challenger_profile, thresholds, protocol,
                                force_challenge=bool(getattr(args, "force", False)))
    result = dsp.run_dispute(g, inputs, proposer, challenger, protocol,
                             cfg.committee_pool())
    ledger_path = cfg.ledger or str(artifacts / "dispute.jsonl")
    result.ledger.save_jsonl(ledger_path)
    _write_state_summary(str(ledger_path) + ".state.json", result.state)
    v = result.state.outcome
    print(f"settled: winner={v.winner} path={v.path} rounds={result.state.round}")
    return _outcome_exit_code(result.state)


def cmd_replay(args) -> int:
    ledger = dsp.Ledger.load_jsonl(args.ledger)
    state = dsp.replay(ledger)
    digest = _state_digest(state)
    print(f"replayed {len(ledger.entries)} entries -> phase={state.phase} "
          f"digest={digest[:16]}")
    summary = Path(str(args.ledger) + ".state.json")
    if summary.exists():
        with open(summary) as fh:
            expected = json.load(fh)["state_digest"]
        if expected != digest:
            print("replay divergence: terminal state does not match the recorded digest",
                  file=sys.stderr)
            return EXIT_VERIFICATION
        print("replay matches the recorded terminal state")
    if state.outcome:
        print(f"winner={state.outcome.winner} path={state.outcome.path}")
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = _load_config(args)
    if not cfg.graph and cfg.model in ("mlp", "cnn", "transformer"):
        spec = build_model(cfg.model, batch=1)  # margins read batch row 0
    else:
        spec = _model_spec(cfg)
    thresholds = _thresholds(cfg, spec, allow_build=True)
    profiles = cfg.device_profiles()
    configs = [(args.mode, args.alpha)]
    rows = evaluate(spec, args.samples, configs, thresholds, profiles[0],
                    seed=cfg.attack_seed, budget=args.budget, lam=cfg.lam)
    fp = honest_false_positive_rate(spec, thresholds, [args.alpha], profiles,
                                    n_runs=args.fp_runs, seed=cfg.attack_seed + 1)
    out = args.out or "attack_results.csv"
    write_results_csv(out, rows)
    asr = sum(r["asr"] * r["n"] for r in rows) / max(1, sum(r["n"] for r in rows))
    print(f"mode={args.mode} alpha={args.alpha} ASR={asr:.1%} "
          f"honest FP rate={fp[args.alpha]:.1%}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    spec = build_chain(n_nodes=args.nodes, seed=cfg.data_seed)
    cfg.dataset_size = min(cfg.dataset_size, args.calibration_inputs)
    thresholds, _ = _calibrate_thresholds(cfg, spec)
    profiles = cfg.device_profiles()
    rng = Rng(cfg.data_seed + 13)
    inputs = spec.make_inputs(rng)
    site_rng = Rng(cfg.data_seed + 17)

    rows = []
    for n_way in args.n_values:
        protocol = cfg.protocol()
        protocol.n_partition = n_way
        site = int(site_rng.integers(0, spec.graph.n_nodes, 1)[0])
        name = spec.graph.nodes[site].name
        from .engine import execute

        _, trace = execute(spec.graph, inputs, profiles[0])
        inject = {site: dsp.make_injection(thresholds, name, trace.tensors[site].shape,
                                           args.inject_scale)}
        start = time.perf_counter()
        proposer = dsp.Proposer(spec.graph, inputs, profiles[0], thresholds, protocol,
                                inject=inject)
        challenger = dsp.Challenger(spec.graph, inputs, profiles[1], thresholds, protocol)
        result = dsp.run_dispute(spec.graph, inputs, proposer, challenger, protocol,
                                 cfg.committee_pool())
        elapsed = time.perf_counter() - start
        rounds = result.state.round
        rows.append(
            {
                "n": n_way,
                "rounds": rounds,
                "time_s": round(elapsed, 3),
                "time_per_round_s": round(elapsed / max(1, rounds), 3),
                "merkle_checks": result.merkle_checks,
                "challenger_flops": result.state.challenger_flops,
                "cost_ratio": round(result.dcr()["cost_ratio"], 4),
                "winner": result.state.outcome.winner,
                "leaf": result.state.leaf_index,
                "injected": site,
            }
        )
        print(rows[-1])

    out = args.out or "bench.csv"
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fpverify",
        description="Tolerance-aware optimistic verification for tensor programs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--graph", help="graph JSON path")
        p.add_argument("--weights", help="weight tensor directory")
        p.add_argument("--thresholds", help="threshold JSON path")
        p.add_argument("--model", help=f"built-in model ({', '.join(MODEL_NAMES)} "
                                       "or chain:<nodes>)")
        p.add_argument("--data-seed", dest="data_seed", type=int)

    p = sub.add_parser("calibrate", help="calibrate empirical thresholds")
    common(p)
    p.add_argument("--out", help="threshold JSON output path")
    p.add_argument("--stability-out", dest="stability_out", help="stability CSV path")
    p.add_argument("--alpha", type=float)
    p.add_argument("--dataset-size", dest="dataset_size", type=int)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("commit", help="execute and write commitment artifacts")
    common(p)
    p.add_argument("--out", help="artifact output directory")
    p.set_defaults(func=cmd_commit)

    p = sub.add_parser("run", help="end-to-end optimistic run with optional dispute")
    common(p)
    p.add_argument("--ledger", help="ledger JSONL output")
    p.add_argument("--n", dest="n_partition", type=int, help="partition fan-out")
    p.add_argument("--inject", help="fault spec node=NAME,scale=S")
    p.add_argument("--force", action="store_true", help="challenge even when clean")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("challenge", help="challenge committed artifacts")
    common(p)
    p.add_argument("--artifacts", required=True, help="directory from `commit`")
    p.add_argument("--ledger", help="dispute ledger output")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_challenge)

    p = sub.add_parser("replay", help="replay a dispute transcript")
    p.add_argument("--ledger", required=True)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("attack", help="bound-aware PGD attack sweep")
    common(p)
    p.add_argument("--mode", default="emp", choices=["theo-d", "theo-p", "emp", "free"])
    p.add_argument("--alpha", type=float, default=3.0)
    p.add_argument("--budget", type=int, default=500)
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--fp-runs", dest="fp_runs", type=int, default=50)
    p.add_argument("--out", help="results CSV path")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("bench", help="dispute microbenchmarks vs partition fan-out")
    common(p)
    p.add_argument("--nodes", type=int, default=2048)
    p.add_argument("--n-values", dest="n_values", type=int, nargs="+",
                   default=[2, 4, 8, 12])
    p.add_argument("--calibration-inputs", dest="calibration_inputs", type=int, default=8)
    p.add_argument("--inject-scale", dest="inject_scale", type=float, default=10.0)
    p.add_argument("--out", help="bench CSV path")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
