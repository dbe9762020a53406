"""Knowledge acquisition: database lookup, web search, LM completion.

The routing state decides the source; this module turns it into a single
KnowledgeItem. External providers speak two tiny wire protocols:

    search      GET  {base}/search?q=...          -> {"results": [{"title", "snippet", "url"}, ...]}
    generation  POST {base}/complete              -> {"text": ...}
                body {"prompt", "max_tokens", "stop"}

Results are ranked best-first; the top snippet is taken as explicit
knowledge. Acquisition is cached so a run sees deterministic retrieval.
"""

from __future__ import annotations

import json
import threading
import time
import urllib.parse
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Protocol, Sequence

import requests

from .core import DialogExample, Turn
from .errors import (
    BadExampleCount,
    EmptyHistory,
    EmptyQuery,
    ProviderUnavailable,
    UnknownDomain,
)
from .states import BeliefState, KnowledgeSource, State, serialize_belief

Record = dict[str, str]


class Provenance(str, Enum):
    DATABASE = "database"
    EXPLICIT = "explicit"
    IMPLICIT_POLICY = "implicit_policy"
    IMPLICIT_KB = "implicit_kb"
    NONE = "none"


@dataclass(frozen=True)
class KnowledgeItem:
    provenance: Provenance
    text: str
    raw: Optional[Any] = None
    query_used: Optional[str] = None

    def __post_init__(self):
        if self.provenance is not Provenance.NONE and not self.text:
            raise ValueError("knowledge text empty for a non-none provenance")


@dataclass
class EntityDatabase:
    """Per-domain entity records. Every record carries a ``name`` column;
    remaining columns keep the file's order, which drives rendering."""

    records: dict[str, list[Record]]

    def __post_init__(self):
        for domain, recs in self.records.items():
            for i, rec in enumerate(recs):
                if "name" not in rec:
                    raise ValueError(f"record {i} in domain {domain!r} has no name")

    @staticmethod
    def load(path: str | Path) -> "EntityDatabase":
        with open(path, encoding="utf-8") as fh:
            return EntityDatabase(json.load(fh))

    def domains(self) -> tuple[str, ...]:
        return tuple(self.records)


def _norm(value: str) -> str:
    return " ".join(value.lower().split())


def query_database(
    db: EntityDatabase, belief: BeliefState
) -> list[tuple[str, list[Record]]]:
    """Return, per belief block, the records matching every constraint.

    Matching is exact after lowercasing and whitespace collapsing; a record
    missing a constrained slot never matches. Record order is preserved.
    """
    out: list[tuple[str, list[Record]]] = []
    for domain, pairs in belief.blocks:
        if domain not in db.records:
            raise UnknownDomain(f"domain {domain!r} not in database")
        matched = []
        for rec in db.records[domain]:
            if all(slot in rec and _norm(rec[slot]) == _norm(value) for slot, value in pairs):
                matched.append(rec)
        out.append((domain, matched))
    return out


def render_db_state(results: Sequence[tuple[str, Sequence[Record]]]) -> str:
    """Plain-text database state: match counts plus the first record."""
    if not results:
        return "matched = 0"
    segments = []
    for domain, records in results:
        seg = f"{domain} matched = {len(records)}"
        if records:
            first = records[0]
            parts = [f"name = {first['name']}"]
            parts += [f"{slot} = {value}" for slot, value in first.items() if slot != "name"]
            seg += " ; " + " ; ".join(parts)
        segments.append(seg)
    return " | ".join(segments)


def build_policy_prompt(examples: Sequence[DialogExample], history: Sequence[Turn]) -> str:
    """Completion prompt that treats the provider as a dialog policy.

    Two sample dialogs, each rendered as one utterance per line, then the
    live history, ending after the current user utterance so the provider
    writes the next system turn.
    """
    if not history:
        raise EmptyHistory("policy prompt needs at least the current user turn")
    if len(examples) != 2:
        raise BadExampleCount(f"policy prompt takes exactly 2 example dialogs, got {len(examples)}")
    blocks = ["\n".join(t.text for t in ex.turns) for ex in examples]
    blocks.append("\n".join(t.text for t in history))
    return "\n\n".join(blocks) + "\n"


def build_kb_prompt(examples: Sequence[tuple[str, str]], query: str) -> str:
    """Completion prompt that treats the provider as a lookup table:
    query/knowledge pairs, then the live query on its own line."""
    if not query.strip():
        raise EmptyQuery("kb prompt needs a non-empty query")
    if not examples:
        raise BadExampleCount("kb prompt needs at least one query/knowledge pair")
    blocks = [f"{q}\n{k}" for q, k in examples]
    blocks.append(query.strip())
    return "\n\n".join(blocks) + "\n"


class SearchClient(Protocol):
    def search(self, query: str) -> list[dict[str, str]]: ...


class GenerationClient(Protocol):
    def generate(self, prompt: str, max_new_tokens: int) -> str: ...


def _with_retries(fn, retries: int = 2, backoff: float = 0.25):
    delay = backoff
    for attempt in range(retries + 1):
        try:
            return fn()
        except (requests.RequestException, ValueError) as exc:
            if attempt == retries:
                raise ProviderUnavailable(str(exc)) from exc
            time.sleep(delay)
            delay *= 2


class HttpSearchClient:
    """Search provider over the GET /search wire protocol."""

    def __init__(self, base_url: str, timeout: float = 10.0, backoff: float = 0.25):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.backoff = backoff
        self._session = requests.Session()

    def search(self, query: str) -> list[dict[str, str]]:
        url = f"{self.base_url}/search?q={urllib.parse.quote(query)}"

        def call():
            resp = self._session.get(url, timeout=self.timeout)
            resp.raise_for_status()
            return resp.json()["results"]

        return _with_retries(call, backoff=self.backoff)


class HttpGenerationClient:
    """Generation provider over the POST /complete wire protocol."""

    def __init__(
        self,
        base_url: str,
        timeout: float = 30.0,
        stop: Sequence[str] = ("\n\n",),
        backoff: float = 0.25,
    ):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.stop = list(stop)
        self.backoff = backoff
        self._session = requests.Session()

    def generate(self, prompt: str, max_new_tokens: int) -> str:
        body = {"prompt": prompt, "max_tokens": max_new_tokens, "stop": self.stop}

        def call():
            resp = self._session.post(
                f"{self.base_url}/complete", json=body, timeout=self.timeout
            )
            resp.raise_for_status()
            return resp.json()["text"]

        return _with_retries(call, backoff=self.backoff)


class FixtureSearchClient:
    """Search client backed by an in-memory query -> results table."""

    def __init__(self, table: Mapping[str, Sequence[Mapping[str, str]]]):
        self.table = {_norm(q): [dict(r) for r in rs] for q, rs in table.items()}
        self.calls = 0

    @staticmethod
    def from_dataset(dialogs: Iterable[DialogExample]) -> "FixtureSearchClient":
        """Answerable annotations become top-1 search results for their gold query."""
        table: dict[str, list[dict[str, str]]] = {}
        for ex in dialogs:
            for turn in ex.turns:
                ann = turn.annotation
                if ann and ann.gold_query and ann.selected_knowledge:
                    table[_norm(ann.gold_query)] = [
                        {"title": ann.gold_query, "snippet": ann.selected_knowledge, "url": ""}
                    ]
        return FixtureSearchClient(table)

    def search(self, query: str) -> list[dict[str, str]]:
        self.calls += 1
        return [dict(r) for r in self.table.get(_norm(query), [])]


@dataclass
class RetrievalCache:
    """Deterministic memo of acquisitions, keyed by (provenance, query)."""

    _items: dict[tuple[str, str], KnowledgeItem] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @staticmethod
    def key(provenance: Provenance, query: str) -> tuple[str, str]:
        return provenance.value, _norm(query)

    def get(self, provenance: Provenance, query: str) -> Optional[KnowledgeItem]:
        with self._lock:
            return self._items.get(self.key(provenance, query))

    def put(self, provenance: Provenance, query: str, item: KnowledgeItem) -> KnowledgeItem:
        with self._lock:
            return self._items.setdefault(self.key(provenance, query), item)

    def __len__(self) -> int:
        return len(self._items)


def acquire(
    state: State,
    history: Sequence[Turn],
    *,
    db: EntityDatabase,
    explicit_client: SearchClient,
    implicit_client: GenerationClient,
    implicit_mode: str = "knowledge_base",
    cache: Optional[RetrievalCache] = None,
    policy_examples: Sequence[DialogExample] = (),
    kb_examples: Sequence[tuple[str, str]] = (),
    implicit_max_tokens: int = 314,
) -> KnowledgeItem:
    """Acquire knowledge for a parsed state.

    database  -> rendered database state for the belief
    explicit  -> top-ranked search snippet for the query
    implicit  -> provider completion, either of the policy prompt over the
                 history (implicit_mode="policy_model") or of the kb prompt
                 over the query (implicit_mode="knowledge_base")

    An empty retrieval yields a provenance-none item rather than an error.
    Identical (provenance, query) acquisitions are served from the cache.
    """
    if state.source is KnowledgeSource.DATABASE:
        assert state.belief is not None
        provenance, cache_query = Provenance.DATABASE, serialize_belief(state.belief)
    elif state.source is KnowledgeSource.EXPLICIT:
        provenance, cache_query = Provenance.EXPLICIT, state.query or ""
    elif implicit_mode == "policy_model":
        provenance = Provenance.IMPLICIT_POLICY
        cache_query = build_policy_prompt(policy_examples, history)
    else:
        provenance, cache_query = Provenance.IMPLICIT_KB, state.query or ""

    if cache is not None:
        hit = cache.get(provenance, cache_query)
        if hit is not None:
            return hit

    if provenance is Provenance.DATABASE:
        results = query_database(db, state.belief)
        item = KnowledgeItem(
            Provenance.DATABASE, render_db_state(results), raw=results, query_used=cache_query
        )
    elif provenance is Provenance.EXPLICIT:
        results = explicit_client.search(cache_query)
        top = results[0].get("snippet", "") or results[0].get("title", "") if results else ""
        if not top:
            item = KnowledgeItem(Provenance.NONE, "", query_used=cache_query)
        else:
            item = KnowledgeItem(Provenance.EXPLICIT, top, raw=results, query_used=cache_query)
    else:
        if provenance is Provenance.IMPLICIT_POLICY:
            prompt = cache_query
        else:
            prompt = build_kb_prompt(kb_examples, cache_query)
        text = implicit_client.generate(prompt, implicit_max_tokens).strip()
        if not text:
            item = KnowledgeItem(Provenance.NONE, "", query_used=state.query)
        else:
            item = KnowledgeItem(provenance, text, query_used=state.query)

    if cache is not None:
        item = cache.put(provenance, cache_query, item)
    return item
