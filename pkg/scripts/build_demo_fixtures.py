#!/usr/bin/env python3
"""Regenerate the scripted provider fixtures and demo config from the
bundled dataset, so `engine serve --config fixtures/demo_config.json` can
replay the fixture dialogs live (type the fixture utterances, or open with
a question turn directly)."""

from __future__ import annotations

import json
from pathlib import Path

from dialog_engine.data import default_icl_sources, load_dataset
from dialog_engine.engine import (
    build_implicit_oracle_script,
    build_opener_script,
    build_oracle_script,
)
from dialog_engine.generation import WindowConfig
from dialog_engine.knowledge import EntityDatabase, FixtureSearchClient

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


def main() -> None:
    ds = load_dataset(FIXTURES / "dataset.json")
    db = EntityDatabase.load(FIXTURES / "database.json")
    cfg = WindowConfig()
    dialogs = ds.all_dialogs()
    policy_examples, kb_examples = default_icl_sources(ds.splits["train"])

    backend = build_oracle_script(dialogs, db, cfg)
    backend.update(build_opener_script(dialogs, db, cfg))
    implicit = build_implicit_oracle_script(dialogs, "knowledge_base", policy_examples, kb_examples)
    implicit.update(
        build_implicit_oracle_script(dialogs, "policy_model", policy_examples, kb_examples)
    )
    search = FixtureSearchClient.from_dataset(dialogs).table

    (FIXTURES / "oracle_backend.json").write_text(json.dumps(backend, indent=2) + "\n")
    (FIXTURES / "implicit_backend.json").write_text(json.dumps(implicit, indent=2) + "\n")
    (FIXTURES / "search_fixture.json").write_text(json.dumps(search, indent=2) + "\n")

    config = {
        "window": {},
        "implicit_mode": "knowledge_base",
        "database_path": "database.json",
        "backend": {
            "kind": "scripted",
            "path": "oracle_backend.json",
            "fallback": {"kind": "rule"},
        },
        "search": {"kind": "fixture", "path": "search_fixture.json"},
        "implicit": {"kind": "scripted", "path": "implicit_backend.json"},
        "icl_dataset_path": "dataset.json",
        "session_log": "demo_sessions.ndjson",
    }
    (FIXTURES / "demo_config.json").write_text(json.dumps(config, indent=2) + "\n")
    print(f"backend entries: {len(backend)}, implicit entries: {len(implicit)}, "
          f"search queries: {len(search)}")


if __name__ == "__main__":
    main()
