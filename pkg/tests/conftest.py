from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))  # for the oracles module

from dialog_engine.data import default_icl_sources, load_dataset
from dialog_engine.engine import (
    Engine,
    build_implicit_oracle_script,
    build_oracle_script,
)
from dialog_engine.generation import ScriptedBackend, WindowConfig
from dialog_engine.knowledge import EntityDatabase, FixtureSearchClient

REPO = Path(__file__).resolve().parent.parent
FIXTURES = REPO / "fixtures"


@pytest.fixture(scope="session")
def dataset():
    return load_dataset(FIXTURES / "dataset.json")


@pytest.fixture(scope="session")
def database():
    return EntityDatabase.load(FIXTURES / "database.json")


@pytest.fixture(scope="session")
def window_cfg():
    return WindowConfig()


@pytest.fixture()
def oracle_engine(dataset, database, window_cfg):
    """Engine whose backend replays the gold states and responses of the
    fixture test split, with fixture-backed knowledge providers."""
    test = dataset.splits["test"]
    policy_examples, kb_examples = default_icl_sources(dataset.splits["train"])
    backend = ScriptedBackend(build_oracle_script(test, database, window_cfg))
    implicit = ScriptedBackend(
        build_implicit_oracle_script(test, "knowledge_base", policy_examples, kb_examples)
    )
    return Engine(
        cfg=window_cfg,
        backend=backend,
        db=database,
        search_client=FixtureSearchClient.from_dataset(dataset.all_dialogs()),
        implicit_client=implicit,
        implicit_mode="knowledge_base",
        domains=dataset.domains,
        slots=dataset.slots,
        policy_examples=policy_examples,
        kb_examples=kb_examples,
    )
