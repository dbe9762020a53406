"""`engine` command line: serve the session API, replay a dataset through
the pipeline, score a run, and the dataset utilities."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .data import (
    REGIMES,
    dataset_stats,
    default_icl_sources,
    emit_augmentation_prompts,
    emit_training_examples,
    load_dataset,
    merge_implicit_knowledge,
    save_dataset,
    write_pairs,
)
from .engine import Engine, EngineConfig, replay_dataset
from .knowledge import EntityDatabase
from .metrics import RunOutput, evaluate, format_report_table


def _load_db(args, ds) -> EntityDatabase:
    if getattr(args, "db", None):
        return EntityDatabase.load(args.db)
    if ds.database_path:
        base = Path(args.dataset).parent
        return EntityDatabase.load(base / ds.database_path)
    raise SystemExit("no database: pass --db or set 'database' in the dataset file")


def cmd_serve(args) -> int:
    from .service import serve

    serve(args.config, host=args.host, port=args.port)
    return 0


def cmd_replay(args) -> int:
    ds = load_dataset(args.dataset)
    engine = Engine.from_config(EngineConfig.load(args.config))
    dialogs = ds.splits.get(args.split, [])
    run = replay_dataset(dialogs, engine)
    Path(args.out).write_text(json.dumps(run.to_json(), indent=2) + "\n", encoding="utf-8")
    print(f"replayed {len(dialogs)} dialogs -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    ds = load_dataset(args.dataset)
    db = _load_db(args, ds)
    run = RunOutput.load(args.run, ds.domains, ds.slots)
    dialogs = ds.splits.get(args.split, [])
    report = evaluate(run, dialogs, db, mode=args.mode, subset=args.subset)
    print(json.dumps(report.to_json(), indent=2))
    print()
    print(format_report_table({f"{args.mode}/{args.subset}": report}))
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_json(), indent=2) + "\n", encoding="utf-8")
    return 0


def cmd_stats(args) -> int:
    stats = dataset_stats(load_dataset(args.dataset))
    print(json.dumps(stats.to_json(), indent=2))
    return 0


def cmd_emit_pairs(args) -> int:
    ds = load_dataset(args.dataset)
    db = None
    try:
        db = _load_db(args, ds)
    except SystemExit:
        pass  # TOD knowledge falls back to empty without a database
    pairs = emit_training_examples(
        ds.splits.get(args.split, []), args.task, regime=args.regime, db=db
    )
    write_pairs(pairs, args.out)
    print(f"wrote {len(pairs)} pairs -> {args.out}")
    return 0


def cmd_emit_prompts(args) -> int:
    ds = load_dataset(args.dataset)
    pool = ds.splits.get("train") or ds.all_dialogs()
    policy_examples, kb_examples = default_icl_sources(pool)
    rows = [
        {"dialog_id": did, "turn_index": idx, "prompt": prompt}
        for did, idx, prompt in emit_augmentation_prompts(
            ds.splits.get(args.split, []),
            args.method,
            policy_examples=policy_examples,
            kb_examples=kb_examples,
        )
    ]
    Path(args.out).write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {len(rows)} prompts -> {args.out}")
    return 0


def cmd_merge(args) -> int:
    ds = load_dataset(args.dataset)
    completions = json.loads(Path(args.completions).read_text(encoding="utf-8"))
    merged = merge_implicit_knowledge(ds, completions)
    save_dataset(merged, args.out)
    print(f"merged {len(completions)} completions -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="engine", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the HTTP session service")
    p.add_argument("--config", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("replay", help="replay a dataset split through the engine")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(fn=cmd_replay)

    p = sub.add_parser("eval", help="score a replay run")
    p.add_argument("--run", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--mode", choices=["full", "tod", "qa"], default="full")
    p.add_argument("--subset", choices=["all", "answerable", "unanswerable"], default="all")
    p.add_argument("--split", default="test")
    p.add_argument("--db")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("stats", help="dataset statistics")
    p.add_argument("--dataset", required=True)
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("emit-pairs", help="emit training (input, target) pairs")
    p.add_argument("--dataset", required=True)
    p.add_argument("--task", choices=["state_prediction", "response_generation"], required=True)
    p.add_argument("--regime", choices=sorted(REGIMES), default="tq_ek_ik_kb")
    p.add_argument("--split", default="train")
    p.add_argument("--db")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_emit_pairs)

    p = sub.add_parser("emit-prompts", help="emit offline augmentation prompts")
    p.add_argument("--dataset", required=True)
    p.add_argument("--method", choices=["policy_model", "knowledge_base"], required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_emit_prompts)

    p = sub.add_parser("merge-knowledge", help="merge offline completions into a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--completions", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_merge)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
