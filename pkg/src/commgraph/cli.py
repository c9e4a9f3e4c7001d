"""Command-line entry point: train, run, eval, inspect.

Exit codes: 0 success, 1 setup error, 2 at least one episode failed while the
run itself completed.
"""
from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from .agents import ConfigError, load_team
from .evaluation import behavior_stats, token_totals
from .executor import TRACE_SCHEMA_VERSION, EpisodeError, EpisodeRunner
from .policy.graph import DecodeConfig
from .policy.params import (MAGIC, CheckpointError, init_params, load_params,
                            save_params)
from .trainer import TrainerConfig, run_training


def _read_dataset(path: str, *, require_gold: bool) -> list[dict]:
    rows: list[dict] = []
    source = Path(path)
    if not source.exists():
        raise ConfigError(f"dataset file not found: {source}")
    with open(source, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(
                    f"{source}:{line_no}: invalid JSON: {exc}") from exc
            if "query" not in row:
                raise ConfigError(f"{source}:{line_no}: missing 'query'")
            if require_gold and row.get("gold") is None:
                raise ConfigError(
                    f"{source}:{line_no}: training rows need a 'gold' answer")
            rows.append({"id": row.get("id", line_no), "query": str(row["query"]),
                         "gold": (None if row.get("gold") is None
                                  else str(row["gold"]))})
    if not rows:
        raise ConfigError(f"{source}: dataset is empty")
    return rows


def cmd_train(args: argparse.Namespace) -> int:
    team = load_team(args.config)
    training = team.training
    if args.seed is not None:
        training = TrainerConfig(**{**training.__dict__, "seed": args.seed})
    if args.updates is not None:
        training = TrainerConfig(**{**training.__dict__,
                                    "updates": args.updates})

    rows = _read_dataset(args.dataset,
                         require_gold=team.reward.kind == "task")
    params = init_params(team.embedder.dimension, team.hidden_dim,
                         team.ff_dim, team.dropout,
                         rng=np.random.default_rng([training.seed, 0]))
    runner = EpisodeRunner.from_team(team, params)

    def episode(rng: np.random.Generator, _params):
        row = rows[int(rng.integers(len(rows)))]
        _, sample = runner.collect_training_episode(
            row["query"], rng, row["gold"], reward_rule=team.reward)
        return sample

    log_path = args.log or f"{args.out}.log.jsonl"
    history = run_training(params, episode, training, log_path=log_path)
    save_params(params, args.out)

    if history:
        last = history[-1]
        print(f"trained {training.updates} updates: "
              f"mean_reward={last.mean_reward:.4f} "
              f"mean_edges={last.mean_edge_count:.2f} "
              f"grad_norm={last.grad_norm:.4f}")
    print(f"checkpoint written to {args.out}; log at {log_path}")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    team = load_team(args.config)
    if args.workers is not None:
        team.workers = args.workers
    decode = DecodeConfig(
        mode=args.decode or team.decode.mode,
        temperature=(args.temperature if args.temperature is not None
                     else team.decode.temperature))
    team.decode = decode

    params = load_params(args.checkpoint)
    if params.embed_dim != team.embedder.dimension:
        raise ConfigError(
            f"checkpoint embed_dim {params.embed_dim} does not match "
            f"embedder dimension {team.embedder.dimension}")
    runner = EpisodeRunner.from_team(team, params)

    if args.query is not None:
        rows = [{"id": 0, "query": args.query, "gold": args.gold}]
    else:
        if args.dataset is None:
            raise ConfigError("run needs either --dataset or --query")
        rows = _read_dataset(args.dataset, require_gold=False)

    seed = args.seed if args.seed is not None else 0

    def one(indexed) -> tuple[int, dict, bool]:
        index, row = indexed
        rng = np.random.default_rng([seed, index])
        try:
            trace = runner.run_episode(row["query"], rng, row["gold"])
            return index, trace.to_json_dict(), True
        except EpisodeError as exc:
            record = {"schema_version": TRACE_SCHEMA_VERSION,
                      "query": row["query"],
                      "error": {"stage": exc.stage, "message": str(exc)}}
            return index, record, False

    items = list(enumerate(rows))
    if team.workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=team.workers) as pool:
            results = list(pool.map(one, items))
    else:
        results = [one(item) for item in items]
    results.sort(key=lambda r: r[0])

    with open(args.out, "w", encoding="utf-8") as fh:
        for _, record, _ in results:
            fh.write(json.dumps(record) + "\n")

    ok_traces = [record for _, record, success in results if success]
    failures = len(results) - len(ok_traces)
    labeled = [t["task_reward"] for t in ok_traces
               if t.get("task_reward") is not None]
    accuracy = (f"{sum(labeled) / len(labeled):.4f}" if labeled else "n/a")
    mean_edges = (sum(len(t["plan"]["edges"]) for t in ok_traces)
                  / len(ok_traces) if ok_traces else 0.0)
    prompt, completion, total = token_totals(ok_traces)
    print(f"episodes={len(results)} failures={failures} accuracy={accuracy} "
          f"mean_edges={mean_edges:.2f} "
          f"tokens={total} (prompt={prompt}, completion={completion})")
    return 2 if failures else 0


def _read_traces(path: str) -> tuple[list[dict], int]:
    source = Path(path)
    if not source.exists():
        raise ConfigError(f"trace file not found: {source}")
    traces: list[dict] = []
    errors = 0
    with open(source, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(
                    f"{source}:{line_no}: invalid JSON: {exc}") from exc
            version = record.get("schema_version")
            if version != TRACE_SCHEMA_VERSION:
                raise ConfigError(
                    f"{source}:{line_no}: schema_version {version!r} "
                    f"unsupported (expected {TRACE_SCHEMA_VERSION})")
            if "error" in record:
                errors += 1
            else:
                traces.append(record)
    return traces, errors


def cmd_eval(args: argparse.Namespace) -> int:
    traces, errors = _read_traces(args.traces)
    if not traces:
        raise ConfigError("no episodes to evaluate")

    labeled = all(t.get("task_reward") is not None
                  and t.get("draft_task_reward") is not None for t in traces)
    if labeled:
        stats = behavior_stats(traces)
        payload = stats.to_json_dict()
        table = stats.format_table()
    else:
        prompt, completion, total = token_totals(traces)
        edges = [len(t["plan"]["edges"]) for t in traces]
        feasible = [len(t["plan"]["edge_probs"]) for t in traces]
        low = sum(1 for e, m in zip(edges, feasible) if e <= m / 2)
        payload = {
            "episodes": len(traces),
            "note": "correctness rates omitted: traces lack gold labels",
            "low_edge_fraction": low / len(traces),
            "mean_edge_count": sum(edges) / len(traces),
            "prompt_tokens": prompt,
            "completion_tokens": completion,
            "total_tokens": total,
        }
        width = max(len(k) for k in payload)
        table = "\n".join(f"{k.ljust(width)}  {v}" for k, v in payload.items())
    if errors:
        payload["failed_episodes"] = errors

    print(table)
    if args.json:
        if args.json == "-":
            print(json.dumps(payload))
        else:
            Path(args.json).write_text(json.dumps(payload, indent=2) + "\n",
                                       encoding="utf-8")
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    path = Path(args.path)
    if not path.exists():
        raise ConfigError(f"file not found: {path}")
    head = path.open("rb").read(len(MAGIC))
    if head == MAGIC:
        params = load_params(path)
        print(f"policy checkpoint (format version {params.version})")
        print(f"embed_dim={params.embed_dim} hidden_dim={params.hidden_dim} "
              f"ff_dim={params.ff_dim} dropout={params.dropout}")
        for name, tensor in params.tensor_items():
            norm = float(np.linalg.norm(tensor.astype(np.float64)))
            print(f"  {name:10s} shape={str(tensor.shape):14s} l2={norm:.6f}")
        return 0

    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(
            f"{path}: neither a policy checkpoint nor JSON: {exc}") from exc
    plan = payload.get("plan", payload)
    if not isinstance(plan, dict) or "order" not in plan:
        raise ConfigError(f"{path}: JSON does not describe a plan")
    print(f"order: {plan['order']}")
    edges = plan.get("edges", [])
    if not edges:
        print("parallel regime (no edges)")
    else:
        for m, n in edges:
            probs = {(int(a), int(b)): p for a, b, p in plan["edge_probs"]}
            print(f"  {m} -> {n}  p={probs[(int(m), int(n))]:.4f}")
    print(f"log_prob: {plan['log_prob']:.6f}  decode: {plan['decode_mode']} "
          f"@ T={plan['temperature']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="commgraph",
        description="Learned communication-graph orchestration for "
                    "multi-agent LLM teams")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a policy on a JSONL dataset")
    train.add_argument("--config", required=True)
    train.add_argument("--dataset", required=True)
    train.add_argument("--out", required=True,
                       help="checkpoint output path")
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--updates", type=int, default=None,
                       help="override the configured update count")
    train.add_argument("--log", default=None,
                       help="training log path (default: <out>.log.jsonl)")
    train.set_defaults(func=cmd_train)

    run = sub.add_parser("run", help="run episodes and stream traces")
    run.add_argument("--config", required=True)
    run.add_argument("--checkpoint", required=True)
    run.add_argument("--dataset", default=None)
    run.add_argument("--query", default=None,
                     help="single query instead of a dataset")
    run.add_argument("--gold", default=None,
                     help="gold answer for --query")
    run.add_argument("--out", required=True, help="trace JSONL output path")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--decode", choices=["sample", "threshold"], default=None)
    run.add_argument("--temperature", type=float, default=None)
    run.add_argument("--workers", type=int, default=None)
    run.set_defaults(func=cmd_run)

    ev = sub.add_parser("eval", help="aggregate diagnostics over traces")
    ev.add_argument("--traces", required=True)
    ev.add_argument("--json", default=None,
                    help="write stats JSON to this path ('-' for stdout)")
    ev.set_defaults(func=cmd_eval)

    inspect = sub.add_parser("inspect",
                             help="describe a checkpoint or plan file")
    inspect.add_argument("path")
    inspect.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
