#!/usr/bin/env python3
"""Replay the bundled fixture corpus through two engines (the gold-replay
oracle and an always-database router) and print the metric table for every
mode, mirroring how a trained model's run would be scored."""

from __future__ import annotations

import dataclasses
from pathlib import Path

from dialog_engine.data import default_icl_sources, load_dataset
from dialog_engine.engine import (
    Engine,
    build_implicit_oracle_script,
    build_oracle_script,
    replay_dataset,
)
from dialog_engine.generation import ScriptedBackend, StaticBackend, WindowConfig
from dialog_engine.knowledge import EntityDatabase, FixtureSearchClient
from dialog_engine.metrics import evaluate, format_report_table

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


def main() -> None:
    ds = load_dataset(FIXTURES / "dataset.json")
    db = EntityDatabase.load(FIXTURES / "database.json")
    cfg = WindowConfig()
    test = ds.splits["test"]
    policy_examples, kb_examples = default_icl_sources(ds.splits["train"])

    oracle = Engine(
        cfg=cfg,
        backend=ScriptedBackend(build_oracle_script(test, db, cfg)),
        db=db,
        search_client=FixtureSearchClient.from_dataset(ds.all_dialogs()),
        implicit_client=ScriptedBackend(
            build_implicit_oracle_script(test, "knowledge_base", policy_examples, kb_examples)
        ),
        implicit_mode="knowledge_base",
        domains=ds.domains,
        slots=ds.slots,
        policy_examples=policy_examples,
        kb_examples=kb_examples,
    )
    closed_book = dataclasses.replace(
        oracle, backend=StaticBackend("Database: restaurant area = north")
    )

    reports = {}
    for name, engine in (("gold-replay", oracle), ("always-database", closed_book)):
        run = replay_dataset(test, engine)
        for mode in ("tod", "qa", "full"):
            reports[f"{name}/{mode}"] = evaluate(run, test, db, mode=mode)

    print(format_report_table(reports))


if __name__ == "__main__":
    main()
