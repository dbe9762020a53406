"""End-to-end turn loop: predict the routing state, acquire knowledge,
generate a grounded response.

A turn is atomic: any abort leaves the session unchanged. State-parse
failures degrade to an empty database lookup instead of failing the turn,
so the agent always answers.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .core import DialogExample, QuestionType, Role, Session, Turn, TurnKind, append_turn
from .data import Dataset, default_icl_sources, load_dataset
from .errors import EngineError, ProviderUnavailable, UnknownDomain
from .generation import (
    KNOWLEDGE_MARKER,
    RESPONSE_PREFIX,
    STATE_PREFIX,
    EchoBackend,
    GenerationBackend,
    RemoteBackend,
    RuleBackend,
    ScriptedBackend,
    StaticBackend,
    WindowConfig,
    build_history_window,
    generate_response,
    input_fingerprint,
    predict_state,
)
from .knowledge import (
    EntityDatabase,
    FixtureSearchClient,
    GenerationClient,
    HttpGenerationClient,
    HttpSearchClient,
    KnowledgeItem,
    Provenance,
    RetrievalCache,
    SearchClient,
    acquire,
    build_kb_prompt,
    build_policy_prompt,
    query_database,
    render_db_state,
)
from .metrics import RunOutput, RunTurn
from .states import (
    EMPTY_BELIEF,
    KnowledgeSource,
    State,
    parse_state,
    serialize_state,
    vocab_from_config,
)

STATE_PARSE_FALLBACK = "state_parse_fallback"
UNKNOWN_DOMAIN_TAG = "unknown_domain"


@dataclass(frozen=True)
class TurnResult:
    raw_state_text: str
    parsed_state: Optional[State]
    knowledge: KnowledgeItem
    response_text: str
    timing_ms: Mapping[str, float] = field(default_factory=dict)
    errors: tuple[str, ...] = ()

    def source_badge(self) -> str:
        if self.knowledge.provenance in (Provenance.IMPLICIT_POLICY, Provenance.IMPLICIT_KB):
            return "implicit"
        return self.knowledge.provenance.value

    def to_json(self) -> dict:
        return {
            "raw_state_text": self.raw_state_text,
            "state": serialize_state(self.parsed_state) if self.parsed_state else None,
            "source": self.source_badge(),
            "knowledge": {
                "provenance": self.knowledge.provenance.value,
                "text": self.knowledge.text,
                "query_used": self.knowledge.query_used,
            },
            "response": self.response_text,
            "timing_ms": dict(self.timing_ms),
            "errors": list(self.errors),
        }


@dataclass
class EngineConfig:
    """File-backed engine configuration; all referenced files must exist."""

    window: WindowConfig = field(default_factory=WindowConfig)
    implicit_mode: str = "knowledge_base"
    database_path: str = ""
    backend: dict = field(default_factory=dict)
    search: dict = field(default_factory=dict)
    implicit: dict = field(default_factory=dict)
    domains: Optional[list[str]] = None
    slots: Optional[dict[str, list[str]]] = None
    icl_dataset_path: Optional[str] = None
    icl_policy_dialog_ids: Optional[list[str]] = None
    icl_kb_pair_count: int = 2
    implicit_max_tokens: int = 314
    session_log: Optional[str] = None

    @staticmethod
    def load(path: str | Path) -> "EngineConfig":
        base = Path(path).parent
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        window = WindowConfig(**raw.get("window", {}))
        cfg = EngineConfig(
            window=window,
            implicit_mode=raw.get("implicit_mode", "knowledge_base"),
            database_path=str(_resolve(base, raw["database_path"])),
            backend=raw.get("backend", {}),
            search=raw.get("search", {}),
            implicit=raw.get("implicit", {}),
            domains=raw.get("domains"),
            slots=raw.get("slots"),
            icl_dataset_path=(
                str(_resolve(base, raw["icl_dataset_path"]))
                if raw.get("icl_dataset_path")
                else None
            ),
            icl_policy_dialog_ids=raw.get("icl_policy_dialog_ids"),
            icl_kb_pair_count=raw.get("icl_kb_pair_count", 2),
            implicit_max_tokens=raw.get("implicit_max_tokens", 314),
            session_log=(
                str(_resolve(base, raw["session_log"], must_exist=False))
                if raw.get("session_log")
                else None
            ),
        )
        for spec in (cfg.backend, cfg.search, cfg.implicit):
            if spec.get("path"):
                spec["path"] = str(_resolve(base, spec["path"]))
        return cfg


def _resolve(base: Path, rel: str, must_exist: bool = True) -> Path:
    path = Path(rel) if Path(rel).is_absolute() else base / rel
    if must_exist and not path.exists():
        raise FileNotFoundError(f"configured file does not exist: {path}")
    return path


def _build_backend(spec: Mapping) -> GenerationBackend:
    kind = spec.get("kind", "remote")
    if kind == "remote":
        return RemoteBackend(spec["url"], timeout=spec.get("timeout_s", 30.0))
    if kind == "scripted":
        fallback = _build_backend(spec["fallback"]) if spec.get("fallback") else None
        return ScriptedBackend.load(spec["path"], fallback=fallback)
    if kind == "static":
        return StaticBackend(spec["text"])
    if kind == "echo":
        return EchoBackend()
    if kind == "rule":
        return RuleBackend()
    raise ValueError(f"unknown backend kind {kind!r}")


def _build_search(spec: Mapping) -> SearchClient:
    kind = spec.get("kind", "remote")
    if kind == "remote":
        return HttpSearchClient(spec["url"], timeout=spec.get("timeout_s", 10.0))
    if kind == "fixture":
        with open(spec["path"], encoding="utf-8") as fh:
            return FixtureSearchClient(json.load(fh))
    raise ValueError(f"unknown search kind {kind!r}")


def _build_implicit(spec: Mapping) -> GenerationClient:
    kind = spec.get("kind", "remote")
    if kind == "remote":
        return HttpGenerationClient(spec["url"], timeout=spec.get("timeout_s", 30.0))
    if kind == "scripted":
        return ScriptedBackend.load(spec["path"])
    if kind == "static":
        return StaticBackend(spec["text"])
    raise ValueError(f"unknown implicit kind {kind!r}")


@dataclass
class Engine:
    """Configured runtime: backend, knowledge providers, vocabularies."""

    cfg: WindowConfig
    backend: GenerationBackend
    db: EntityDatabase
    search_client: SearchClient
    implicit_client: GenerationClient
    implicit_mode: str = "knowledge_base"
    domains: frozenset[str] = frozenset()
    slots: dict = field(default_factory=dict)
    policy_examples: Sequence[DialogExample] = ()
    kb_examples: Sequence[tuple[str, str]] = ()
    implicit_max_tokens: int = 314
    cache: RetrievalCache = field(default_factory=RetrievalCache)

    @staticmethod
    def from_config(config: EngineConfig) -> "Engine":
        domains, slots = vocab_from_config(config.domains, config.slots)
        policy_examples: list[DialogExample] = []
        kb_examples: list[tuple[str, str]] = []
        if config.icl_dataset_path:
            icl_ds = load_dataset(config.icl_dataset_path)
            pool = icl_ds.splits.get("train") or icl_ds.all_dialogs()
            if config.icl_policy_dialog_ids:
                by_id = {ex.dialog_id: ex for ex in icl_ds.all_dialogs()}
                policy_examples = [by_id[i] for i in config.icl_policy_dialog_ids]
                _, kb_examples = default_icl_sources(pool, 0, config.icl_kb_pair_count)
            else:
                policy_examples, kb_examples = default_icl_sources(
                    pool, 2, config.icl_kb_pair_count
                )
        return Engine(
            cfg=config.window,
            backend=_build_backend(config.backend),
            db=EntityDatabase.load(config.database_path),
            search_client=_build_search(config.search),
            implicit_client=_build_implicit(config.implicit),
            implicit_mode=config.implicit_mode,
            domains=domains,
            slots=slots,
            policy_examples=policy_examples,
            kb_examples=kb_examples,
            implicit_max_tokens=config.implicit_max_tokens,
        )

    def acquire_for(self, state: State, history: Sequence[Turn]) -> KnowledgeItem:
        return acquire(
            state,
            history,
            db=self.db,
            explicit_client=self.search_client,
            implicit_client=self.implicit_client,
            implicit_mode=self.implicit_mode,
            cache=self.cache,
            policy_examples=self.policy_examples,
            kb_examples=self.kb_examples,
            implicit_max_tokens=self.implicit_max_tokens,
        )


def _override_state(
    engine: Engine,
    user_text: str,
    parsed: Optional[State],
    override_source: str,
    override_query: Optional[str],
) -> State:
    if override_source == "database":
        if override_query:
            from .states import parse_belief

            return State.database(parse_belief(override_query, engine.domains, engine.slots))
        return State.database(EMPTY_BELIEF)
    query = override_query or (parsed.query if parsed and parsed.query else user_text)
    if override_source == "explicit":
        return State.explicit(query)
    if override_source == "implicit":
        return State.implicit(query)
    raise ValueError(f"unknown override source {override_source!r}")


def run_turn(
    session: Session,
    user_text: str,
    engine: Engine,
    override_source: Optional[str] = None,
    override_query: Optional[str] = None,
) -> tuple[Session, TurnResult]:
    """Run one full turn and return the extended session and its trace entry.

    ProviderUnavailable aborts the turn (the input session is returned
    untouched by virtue of immutability); state-parse failures and unknown
    database domains degrade and are recorded as error tags.
    """
    timing: dict[str, float] = {}
    errors: list[str] = []

    working = append_turn(session, Role.USER, user_text)
    window_turns = working.turns[-(2 * engine.cfg.history_window_k + 1):]
    history_text = build_history_window(working.turns, engine.cfg)

    parsed: Optional[State]
    if override_source is not None:
        # what-if turn: the caller dictates the routing, skip prediction
        raw_state = ""
        parsed = _override_state(engine, user_text, None, override_source, override_query)
        effective = parsed
        timing["state_prediction"] = 0.0
    else:
        t0 = time.perf_counter()
        raw_state = predict_state(engine.backend, history_text, engine.cfg)
        timing["state_prediction"] = (time.perf_counter() - t0) * 1000
        try:
            parsed = parse_state(raw_state, engine.domains, engine.slots)
            effective = parsed
        except EngineError:
            parsed = None
            effective = State.database(EMPTY_BELIEF)
            errors.append(STATE_PARSE_FALLBACK)

    t0 = time.perf_counter()
    try:
        knowledge = engine.acquire_for(effective, window_turns)
    except UnknownDomain:
        knowledge = KnowledgeItem(Provenance.DATABASE, "matched = 0")
        errors.append(UNKNOWN_DOMAIN_TAG)
    timing["knowledge"] = (time.perf_counter() - t0) * 1000

    t0 = time.perf_counter()
    response = generate_response(engine.backend, history_text, knowledge.text, engine.cfg)
    timing["generation"] = (time.perf_counter() - t0) * 1000

    result = TurnResult(
        raw_state_text=raw_state,
        parsed_state=parsed,
        knowledge=knowledge,
        response_text=response,
        timing_ms=timing,
        errors=tuple(errors),
    )
    final = append_turn(working, Role.SYSTEM, response).with_trace(result)
    return final, result


def run_dialog(example: DialogExample, engine: Engine) -> list[TurnResult]:
    """Teacher-forced replay: every gold user turn is answered with gold
    history as context; gold system turns are references, not inputs."""
    results: list[TurnResult] = []
    gold = Session.new(f"replay-{example.dialog_id}")
    for i, turn in enumerate(example.turns):
        if turn.role is Role.USER:
            if i + 1 >= len(example.turns):
                break  # no reference response to predict
            try:
                _, result = run_turn(gold, turn.text, engine)
            except ProviderUnavailable as exc:
                raise ProviderUnavailable(f"{example.dialog_id}: {exc}") from exc
            results.append(result)
        gold = append_turn(gold, turn.role, turn.text)
    return results


def _offered_entities(result: TurnResult) -> dict[str, str]:
    if result.knowledge.provenance is not Provenance.DATABASE:
        return {}
    raw = result.knowledge.raw or []
    out = {}
    for domain, records in raw:
        if records:
            out[domain] = records[0]["name"]
    return out


def run_to_output(example: DialogExample, results: Sequence[TurnResult]) -> list[RunTurn]:
    rows = []
    for sys_idx, result in zip(example.system_turn_indices(), results):
        rows.append(
            RunTurn(
                turn_index=sys_idx,
                raw_state_text=result.raw_state_text,
                parsed_state=result.parsed_state,
                response_text=result.response_text,
                offered=_offered_entities(result),
            )
        )
    return rows


def replay_dataset(dialogs: Sequence[DialogExample], engine: Engine) -> RunOutput:
    return RunOutput(
        {ex.dialog_id: run_to_output(ex, run_dialog(ex, engine)) for ex in dialogs}
    )


def gold_knowledge_text(
    example: DialogExample,
    sys_idx: int,
    db: EntityDatabase,
    implicit_mode: str,
) -> str:
    """The knowledge the gold state would retrieve during replay."""
    prev = example.turns[sys_idx - 1]
    ann = prev.annotation
    if ann is not None and ann.turn_kind is TurnKind.QA:
        if ann.question_type is QuestionType.ANSWERABLE:
            return ann.selected_knowledge or ""
        return ann.implicit_knowledge or ""
    sys_ann = example.turns[sys_idx].annotation
    if sys_ann is None or sys_ann.gold_state is None or sys_ann.gold_state.belief is None:
        return ""
    return render_db_state(query_database(db, sys_ann.gold_state.belief))


def build_oracle_script(
    dialogs: Sequence[DialogExample],
    db: EntityDatabase,
    cfg: WindowConfig,
    implicit_mode: str = "knowledge_base",
) -> dict[str, str]:
    """Scripted-backend table that replays gold states and responses.

    Covers both task inputs for every system turn, keyed by the SHA-256 of
    the exact serialized input the engine will produce.
    """
    script: dict[str, str] = {}
    for ex in dialogs:
        for sys_idx in ex.system_turn_indices():
            window = build_history_window(ex.turns[:sys_idx], cfg)
            prev_ann = ex.turns[sys_idx - 1].annotation
            sys_ann = ex.turns[sys_idx].annotation
            if prev_ann is not None and prev_ann.turn_kind is TurnKind.QA:
                gold_state = prev_ann.gold_state
            else:
                gold_state = sys_ann.gold_state if sys_ann else None
            if gold_state is None:
                continue
            script[input_fingerprint(STATE_PREFIX + window)] = serialize_state(gold_state)
            knowledge = gold_knowledge_text(ex, sys_idx, db, implicit_mode)
            response_input = f"{RESPONSE_PREFIX}{window} {KNOWLEDGE_MARKER} {knowledge}"
            script[input_fingerprint(response_input)] = ex.turns[sys_idx].text
    return script


def build_opener_script(
    dialogs: Sequence[DialogExample],
    db: EntityDatabase,
    cfg: WindowConfig,
    implicit_mode: str = "knowledge_base",
) -> dict[str, str]:
    """Extra scripted-backend entries so each question turn also works as
    the first utterance of a fresh live session."""
    script: dict[str, str] = {}
    for ex in dialogs:
        for qa_idx in ex.qa_user_indices():
            if qa_idx + 1 >= len(ex.turns):
                continue
            ann = ex.turns[qa_idx].annotation
            assert ann is not None and ann.gold_state is not None
            window = build_history_window(ex.turns[qa_idx : qa_idx + 1], cfg)
            script[input_fingerprint(STATE_PREFIX + window)] = serialize_state(ann.gold_state)
            knowledge = gold_knowledge_text(ex, qa_idx + 1, db, implicit_mode)
            response_input = f"{RESPONSE_PREFIX}{window} {KNOWLEDGE_MARKER} {knowledge}"
            script[input_fingerprint(response_input)] = ex.turns[qa_idx + 1].text
    return script


def build_implicit_oracle_script(
    dialogs: Sequence[DialogExample],
    implicit_mode: str,
    policy_examples: Sequence[DialogExample],
    kb_examples: Sequence[tuple[str, str]],
) -> dict[str, str]:
    """Scripted completions for the implicit provider: each unanswerable
    question's prompt maps to its annotated implicit knowledge."""
    script: dict[str, str] = {}
    for ex in dialogs:
        for qa_idx in ex.qa_user_indices():
            ann = ex.turns[qa_idx].annotation
            assert ann is not None
            if ann.question_type is not QuestionType.UNANSWERABLE or not ann.implicit_knowledge:
                continue
            if implicit_mode == "policy_model":
                # cover the turn both mid-dialog and as a session opener
                prompts = [
                    build_policy_prompt(policy_examples, ex.turns[: qa_idx + 1]),
                    build_policy_prompt(policy_examples, ex.turns[qa_idx : qa_idx + 1]),
                ]
            else:
                query = (ann.gold_state.query if ann.gold_state else None) or ann.gold_query
                prompts = [build_kb_prompt(kb_examples, query or "")]
            for prompt in prompts:
                script[input_fingerprint(prompt)] = ann.implicit_knowledge
    return script
