"""Dataset loading, validation, statistics, subset expansion, and emission
of training pairs and offline augmentation prompts.

Dataset file schema (JSON):

    {
      "domains": [...],                  # optional vocabulary override
      "slots": {"<domain>": [...]},      # optional vocabulary override
      "database": "relative/path.json",  # optional database reference
      "splits": {
        "train"|"validation"|"test": [
          {
            "dialog_id": str,
            "goal": {"<domain>": {"constraints": {slot: value},
                                   "requested": [slot, ...]}},
            "turns": [
              {"role": "user"|"system", "text": str,
               "annotation": {             # optional
                 "turn_kind": "tod"|"qa",
                 "question_type": "answerable"|"unanswerable",
                 "gold_state": "<state string>",
                 "gold_query": str, "selected_knowledge": str,
                 "implicit_knowledge": str, "delexicalized_response": str}}
            ]
          }, ...
        ]
      }
    }

TOD system turns carry tod annotations; inserted question turns carry qa
annotations on the user turn, and the following system turn's text is the
reference answer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from .core import (
    DialogExample,
    GoalAnnotation,
    QuestionType,
    Role,
    Turn,
    TurnAnnotation,
    TurnKind,
)
from .errors import (
    EngineError,
    InvariantViolation,
    MissingAnnotation,
    SchemaError,
)
from .generation import (
    KNOWLEDGE_MARKER,
    RESPONSE_PREFIX,
    STATE_PREFIX,
    WindowConfig,
    build_history_window,
)
from .knowledge import (
    EntityDatabase,
    build_kb_prompt,
    build_policy_prompt,
    query_database,
    render_db_state,
)
from .states import (
    KnowledgeSource,
    State,
    parse_state,
    serialize_state,
    vocab_from_config,
)

SPLITS = ("train", "validation", "test")


@dataclass
class Dataset:
    splits: dict[str, list[DialogExample]]
    domains: frozenset[str]
    slots: dict[str, frozenset[str]]
    database_path: Optional[str] = None

    def all_dialogs(self) -> list[DialogExample]:
        return [ex for split in SPLITS for ex in self.splits.get(split, [])]


@dataclass
class SplitStats:
    n_dialogs: int = 0
    n_tod_turns: int = 0
    n_answerable: int = 0
    n_unanswerable: int = 0
    mean_lengths: dict[str, dict[str, Optional[float]]] = field(default_factory=dict)


@dataclass
class DatasetStats:
    per_split: dict[str, SplitStats]
    totals: SplitStats

    def to_json(self) -> dict:
        def enc(s: SplitStats) -> dict:
            return {
                "dialogs": s.n_dialogs,
                "tod_turns": s.n_tod_turns,
                "answerable": s.n_answerable,
                "unanswerable": s.n_unanswerable,
                "mean_token_lengths": s.mean_lengths,
            }

        out = {split: enc(stats) for split, stats in self.per_split.items()}
        out["total"] = enc(self.totals)
        return out


def _fail(dialog_id: str, turn_index: Optional[int], message: str) -> InvariantViolation:
    where = dialog_id if turn_index is None else f"{dialog_id} turn {turn_index}"
    return InvariantViolation(f"{where}: {message}")


def _parse_annotation(raw: Mapping, dialog_id: str, idx: int, domains, slots) -> TurnAnnotation:
    try:
        kind = TurnKind(raw["turn_kind"])
    except (KeyError, ValueError) as exc:
        raise _fail(dialog_id, idx, f"bad turn_kind: {exc}") from exc
    qtype = raw.get("question_type")
    gold_state = None
    if raw.get("gold_state"):
        try:
            gold_state = parse_state(raw["gold_state"], domains, slots)
        except EngineError as exc:
            raise _fail(dialog_id, idx, f"unparseable gold_state: {exc}") from exc
    try:
        return TurnAnnotation(
            turn_kind=kind,
            question_type=QuestionType(qtype) if qtype else None,
            gold_state=gold_state,
            gold_query=raw.get("gold_query"),
            selected_knowledge=raw.get("selected_knowledge"),
            implicit_knowledge=raw.get("implicit_knowledge"),
            delexicalized_response=raw.get("delexicalized_response"),
        )
    except ValueError as exc:
        raise _fail(dialog_id, idx, str(exc)) from exc


def _validate_annotation_placement(ex: DialogExample) -> None:
    for i, turn in enumerate(ex.turns):
        ann = turn.annotation
        if ann is None:
            continue
        if turn.role is Role.SYSTEM and ann.turn_kind is not TurnKind.TOD:
            raise _fail(ex.dialog_id, i, "system turns may only carry tod annotations")
        if turn.role is Role.USER and ann.turn_kind is not TurnKind.QA:
            raise _fail(ex.dialog_id, i, "user turns may only carry qa annotations")
        if ann.turn_kind is TurnKind.QA:
            if ann.gold_state is None:
                raise _fail(ex.dialog_id, i, "qa turn missing gold_state")
            if ann.question_type is QuestionType.ANSWERABLE:
                if ann.gold_state.source is not KnowledgeSource.EXPLICIT:
                    raise _fail(ex.dialog_id, i, "answerable turn must route explicit")
                if not ann.selected_knowledge:
                    raise _fail(ex.dialog_id, i, "answerable turn missing selected_knowledge")
            else:
                if ann.gold_state.source is not KnowledgeSource.IMPLICIT:
                    raise _fail(ex.dialog_id, i, "unanswerable turn must route implicit")


def _parse_dialog(raw: Mapping, domains, slots) -> DialogExample:
    try:
        dialog_id = raw["dialog_id"]
        raw_turns = raw["turns"]
    except KeyError as exc:
        raise SchemaError(f"dialog missing field {exc}") from exc

    goal_raw = raw.get("goal", {})
    constraints = {}
    requested = {}
    for domain, spec in goal_raw.items():
        if domain not in domains:
            raise _fail(dialog_id, None, f"goal domain {domain!r} not in vocabulary")
        constraints[domain] = dict(spec.get("constraints", {}))
        requested[domain] = tuple(spec.get("requested", ()))
    goal = GoalAnnotation(constraints=constraints, requested=requested)

    turns = []
    for i, rt in enumerate(raw_turns):
        try:
            role = Role(rt["role"])
            text = rt["text"]
        except (KeyError, ValueError) as exc:
            raise _fail(dialog_id, i, f"bad turn: {exc}") from exc
        ann = None
        if rt.get("annotation"):
            ann = _parse_annotation(rt["annotation"], dialog_id, i, domains, slots)
        try:
            turns.append(Turn(role, text, ann))
        except EngineError as exc:
            raise _fail(dialog_id, i, str(exc)) from exc

    try:
        ex = DialogExample(dialog_id, goal, tuple(turns))
    except EngineError as exc:
        raise _fail(dialog_id, None, str(exc)) from exc
    _validate_annotation_placement(ex)
    return ex


def load_dataset(path: str | Path) -> Dataset:
    """Load and fully validate a dataset file.

    Raises SchemaError for malformed JSON shape and InvariantViolation (with
    dialog_id and turn index) for semantic violations.
    """
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(payload, dict) or "splits" not in payload:
        raise SchemaError(f"{path}: top level must be an object with 'splits'")

    domains, slots = vocab_from_config(payload.get("domains"), payload.get("slots"))
    splits: dict[str, list[DialogExample]] = {}
    for split, raw_dialogs in payload["splits"].items():
        if split not in SPLITS:
            raise SchemaError(f"unknown split {split!r}")
        seen: set[str] = set()
        dialogs = []
        for raw in raw_dialogs:
            ex = _parse_dialog(raw, domains, slots)
            if ex.dialog_id in seen:
                raise _fail(ex.dialog_id, None, "duplicate dialog_id in split")
            seen.add(ex.dialog_id)
            dialogs.append(ex)
        splits[split] = dialogs
    return Dataset(
        splits=splits,
        domains=domains,
        slots=slots,
        database_path=payload.get("database"),
    )


def save_dataset(ds: Dataset, path: str | Path) -> None:
    """Write a dataset back out with canonical field order."""

    def enc_annotation(ann: TurnAnnotation) -> dict:
        out: dict = {"turn_kind": ann.turn_kind.value}
        if ann.question_type:
            out["question_type"] = ann.question_type.value
        if ann.gold_state is not None:
            out["gold_state"] = serialize_state(ann.gold_state)
        for name in ("gold_query", "selected_knowledge", "implicit_knowledge",
                     "delexicalized_response"):
            value = getattr(ann, name)
            if value is not None:
                out[name] = value
        return out

    def enc_turn(turn: Turn) -> dict:
        out: dict = {"role": turn.role.value, "text": turn.text}
        if turn.annotation is not None:
            out["annotation"] = enc_annotation(turn.annotation)
        return out

    def enc_dialog(ex: DialogExample) -> dict:
        goal = {}
        for domain in ex.goal.domains():
            entry: dict = {}
            if ex.goal.constraints.get(domain):
                entry["constraints"] = dict(ex.goal.constraints[domain])
            if ex.goal.requested.get(domain):
                entry["requested"] = list(ex.goal.requested[domain])
            goal[domain] = entry
        return {
            "dialog_id": ex.dialog_id,
            "goal": goal,
            "turns": [enc_turn(t) for t in ex.turns],
        }

    payload: dict = {
        "domains": sorted(ds.domains),
        "slots": {d: sorted(ss) for d, ss in sorted(ds.slots.items())},
    }
    if ds.database_path:
        payload["database"] = ds.database_path
    payload["splits"] = {
        split: [enc_dialog(ex) for ex in ds.splits.get(split, [])] for split in SPLITS
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _tod_exchange_count(ex: DialogExample) -> int:
    count = 0
    for sys_idx in ex.system_turn_indices():
        prev = ex.turns[sys_idx - 1]
        if prev.annotation is None or prev.annotation.turn_kind is not TurnKind.QA:
            count += 1
    return count


def _mean(values: list[int]) -> Optional[float]:
    return sum(values) / len(values) if values else None


def dataset_stats(ds: Dataset) -> DatasetStats:
    """Counts and mean whitespace-token lengths per split and overall."""
    per_split: dict[str, SplitStats] = {}
    lengths_total: dict[str, dict[str, list[int]]] = {}

    for split in SPLITS:
        dialogs = ds.splits.get(split, [])
        stats = SplitStats(n_dialogs=len(dialogs))
        lengths: dict[str, dict[str, list[int]]] = {
            "answerable": {"query": [], "knowledge": [], "response": []},
            "unanswerable": {"query": [], "knowledge": [], "response": []},
        }
        for ex in dialogs:
            stats.n_tod_turns += _tod_exchange_count(ex)
            for qa_idx in ex.qa_user_indices():
                ann = ex.turns[qa_idx].annotation
                assert ann is not None
                qtype = "answerable" if ann.question_type is QuestionType.ANSWERABLE else "unanswerable"
                if qtype == "answerable":
                    stats.n_answerable += 1
                else:
                    stats.n_unanswerable += 1
                if ann.gold_query:
                    lengths[qtype]["query"].append(len(ann.gold_query.split()))
                if ann.selected_knowledge:
                    lengths[qtype]["knowledge"].append(len(ann.selected_knowledge.split()))
                if qa_idx + 1 < len(ex.turns):
                    lengths[qtype]["response"].append(len(ex.turns[qa_idx + 1].text.split()))
        stats.mean_lengths = {
            qtype: {kind: _mean(vals) for kind, vals in kinds.items()}
            for qtype, kinds in lengths.items()
        }
        per_split[split] = stats
        for qtype, kinds in lengths.items():
            for kind, vals in kinds.items():
                lengths_total.setdefault(qtype, {}).setdefault(kind, []).extend(vals)

    totals = SplitStats(
        n_dialogs=sum(s.n_dialogs for s in per_split.values()),
        n_tod_turns=sum(s.n_tod_turns for s in per_split.values()),
        n_answerable=sum(s.n_answerable for s in per_split.values()),
        n_unanswerable=sum(s.n_unanswerable for s in per_split.values()),
        mean_lengths={
            qtype: {kind: _mean(vals) for kind, vals in kinds.items()}
            for qtype, kinds in lengths_total.items()
        },
    )
    return DatasetStats(per_split=per_split, totals=totals)


def _strip_qa_turns(ex: DialogExample, keep: QuestionType) -> tuple[tuple[Turn, ...], tuple[int, ...]]:
    """Drop question turns (and their responses) of the other type."""
    kept: list[Turn] = []
    kept_idx: list[int] = []
    skip_next_system = False
    for i, turn in enumerate(ex.turns):
        if skip_next_system:
            skip_next_system = False
            continue
        ann = turn.annotation
        if (
            turn.role is Role.USER
            and ann is not None
            and ann.turn_kind is TurnKind.QA
            and ann.question_type is not keep
        ):
            skip_next_system = True
            continue
        kept.append(turn)
        kept_idx.append(i)
    return tuple(kept), tuple(kept_idx)


def expand_by_question_type(
    dialogs: Iterable[DialogExample],
) -> tuple[list[DialogExample], list[DialogExample]]:
    """Split dialogs into answerable and unanswerable subsets.

    A dialog with only one question type lands in that subset unchanged; a
    dialog with both is duplicated, each copy keeping the TOD turns plus one
    question type, with ids suffixed -ans / -unans. Dialogs without question
    turns join neither subset.
    """
    answerable: list[DialogExample] = []
    unanswerable: list[DialogExample] = []
    for ex in dialogs:
        qtypes = {
            ex.turns[i].annotation.question_type  # type: ignore[union-attr]
            for i in ex.qa_user_indices()
        }
        if not qtypes:
            continue
        if qtypes == {QuestionType.ANSWERABLE}:
            answerable.append(ex)
        elif qtypes == {QuestionType.UNANSWERABLE}:
            unanswerable.append(ex)
        else:
            for keep, bucket, suffix in (
                (QuestionType.ANSWERABLE, answerable, "-ans"),
                (QuestionType.UNANSWERABLE, unanswerable, "-unans"),
            ):
                turns, kept_idx = _strip_qa_turns(ex, keep)
                bucket.append(
                    DialogExample(
                        dialog_id=ex.dialog_id + suffix,
                        goal=ex.goal,
                        turns=turns,
                        source_id=ex.dialog_id,
                        source_turns=kept_idx,
                    )
                )
    return answerable, unanswerable


@dataclass(frozen=True)
class Regime:
    """Training-data visibility switches.

    ``hidden_state_target`` picks the state target for question turns whose
    queries/knowledge are withheld: carry_db reuses the most recent TOD gold
    state, empty_db emits a bare database prefix, gold leaks the real state.
    """

    name: str
    include_qa: bool = True
    answerable_knowledge: bool = True
    unanswerable_knowledge: bool = True
    hidden_state_target: str = "carry_db"


REGIMES = {
    "t": Regime("t", include_qa=False, answerable_knowledge=False, unanswerable_knowledge=False),
    "tq": Regime("tq", answerable_knowledge=False, unanswerable_knowledge=False),
    "tq_ek": Regime("tq_ek", unanswerable_knowledge=False),
    "tq_ek_ik_pm": Regime("tq_ek_ik_pm"),
    "tq_ek_ik_kb": Regime("tq_ek_ik_kb"),
}


def _carry_state_text(ex: DialogExample, sys_idx: int, mode: str) -> str:
    if mode == "empty_db":
        return "Database:"
    for j in range(sys_idx - 1, -1, -1):
        ann = ex.turns[j].annotation
        if (
            ex.turns[j].role is Role.SYSTEM
            and ann is not None
            and ann.turn_kind is TurnKind.TOD
            and ann.gold_state is not None
        ):
            return serialize_state(ann.gold_state)
    return "Database:"


def _turn_targets(
    ex: DialogExample, sys_idx: int, regime: Regime, db: Optional[EntityDatabase]
) -> Optional[tuple[str, str]]:
    """(state target, knowledge text) for one system turn, or None to skip."""
    prev = ex.turns[sys_idx - 1]
    qa_ann = prev.annotation if prev.annotation and prev.annotation.turn_kind is TurnKind.QA else None

    if qa_ann is None:
        ann = ex.turns[sys_idx].annotation
        if ann is None or ann.gold_state is None:
            raise MissingAnnotation(
                f"{ex.dialog_id} turn {sys_idx}: tod turn lacks a gold state"
            )
        knowledge = ann.selected_knowledge or ""
        if not knowledge and db is not None and ann.gold_state.belief is not None:
            knowledge = render_db_state(query_database(db, ann.gold_state.belief))
        return serialize_state(ann.gold_state), knowledge

    if not regime.include_qa:
        return None
    answerable = qa_ann.question_type is QuestionType.ANSWERABLE
    visible = regime.answerable_knowledge if answerable else regime.unanswerable_knowledge
    if not visible:
        if regime.hidden_state_target == "gold":
            assert qa_ann.gold_state is not None
            return serialize_state(qa_ann.gold_state), ""
        return _carry_state_text(ex, sys_idx, regime.hidden_state_target), ""
    assert qa_ann.gold_state is not None
    knowledge = qa_ann.selected_knowledge if answerable else qa_ann.implicit_knowledge
    if not knowledge:
        raise MissingAnnotation(
            f"{ex.dialog_id} turn {sys_idx}: regime {regime.name!r} needs knowledge here"
        )
    return serialize_state(qa_ann.gold_state), knowledge


def emit_training_examples(
    dialogs: Iterable[DialogExample],
    task: str,
    regime: Regime | str = "tq_ek_ik_kb",
    cfg: Optional[WindowConfig] = None,
    db: Optional[EntityDatabase] = None,
) -> list[tuple[str, str]]:
    """Emit (input, target) text pairs for one of the two tasks.

    task "state_prediction" pairs the prefixed history window with the gold
    state string; "response_generation" appends the knowledge segment and
    targets the reference response (delexicalized where annotated). TOD-turn
    knowledge is the rendered database state when a database is given.
    """
    if task not in ("state_prediction", "response_generation"):
        raise ValueError(f"unknown task {task!r}")
    if isinstance(regime, str):
        regime = REGIMES[regime]
    cfg = cfg or WindowConfig()

    pairs: list[tuple[str, str]] = []
    for ex in dialogs:
        for sys_idx in ex.system_turn_indices():
            targets = _turn_targets(ex, sys_idx, regime, db)
            if targets is None:
                continue
            state_text, knowledge = targets
            window = build_history_window(ex.turns[:sys_idx], cfg)
            if task == "state_prediction":
                pairs.append((STATE_PREFIX + window, state_text))
            else:
                sys_turn = ex.turns[sys_idx]
                target = sys_turn.text
                if sys_turn.annotation and sys_turn.annotation.delexicalized_response:
                    target = sys_turn.annotation.delexicalized_response
                prompt = f"{RESPONSE_PREFIX}{window} {KNOWLEDGE_MARKER} {knowledge}"
                words = knowledge.split()
                while words and cfg.token_counter(prompt) > cfg.max_input_tokens:
                    words.pop()
                    prompt = f"{RESPONSE_PREFIX}{window} {KNOWLEDGE_MARKER} {' '.join(words)}"
                pairs.append((prompt, target))
    return pairs


def write_pairs(pairs: Sequence[tuple[str, str]], path: str | Path) -> None:
    """Tab-separated pairs, one per line; tabs/newlines escaped as literals."""

    def esc(text: str) -> str:
        return text.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n")

    with open(path, "w", encoding="utf-8") as fh:
        for inp, tgt in pairs:
            fh.write(f"{esc(inp)}\t{esc(tgt)}\n")


def default_icl_sources(
    dialogs: Sequence[DialogExample],
    n_policy: int = 2,
    n_kb: int = 2,
) -> tuple[list[DialogExample], list[tuple[str, str]]]:
    """Deterministic in-context example sources: the first dialogs of the
    pool, and the first answerable query/knowledge pairs."""
    policy = list(dialogs[:n_policy])
    kb: list[tuple[str, str]] = []
    for ex in dialogs:
        for i in ex.qa_user_indices():
            ann = ex.turns[i].annotation
            assert ann is not None
            if ann.question_type is QuestionType.ANSWERABLE and ann.gold_query and ann.selected_knowledge:
                kb.append((ann.gold_query, ann.selected_knowledge))
            if len(kb) >= n_kb:
                break
        if len(kb) >= n_kb:
            break
    return policy, kb


def emit_augmentation_prompts(
    dialogs: Iterable[DialogExample],
    method: str,
    policy_examples: Sequence[DialogExample] = (),
    kb_examples: Sequence[tuple[str, str]] = (),
) -> list[tuple[str, int, str]]:
    """One prompt per unanswerable question turn, for offline completion.

    Returns (dialog_id, turn_index, prompt) so completions can be merged
    back by position. method "policy_model" builds dialog-continuation
    prompts over the history; "knowledge_base" builds query->knowledge
    prompts over the gold query.
    """
    if method not in ("policy_model", "knowledge_base"):
        raise ValueError(f"unknown method {method!r}")
    out: list[tuple[str, int, str]] = []
    for ex in dialogs:
        for qa_idx in ex.qa_user_indices():
            ann = ex.turns[qa_idx].annotation
            assert ann is not None
            if ann.question_type is not QuestionType.UNANSWERABLE:
                continue
            if method == "policy_model":
                prompt = build_policy_prompt(policy_examples, ex.turns[: qa_idx + 1])
            else:
                query = ann.gold_query or (ann.gold_state.query if ann.gold_state else "")
                prompt = build_kb_prompt(kb_examples, query or "")
            out.append((ex.dialog_id, qa_idx, prompt))
    return out


def merge_implicit_knowledge(
    ds: Dataset,
    completions: Iterable[Mapping],
) -> Dataset:
    """Fold offline completions back into the dataset as implicit knowledge.

    Each completion is {"dialog_id", "turn_index", "text"}; the target turn
    must be an unanswerable question turn.
    """
    by_key = {(c["dialog_id"], c["turn_index"]): c["text"] for c in completions}
    new_splits: dict[str, list[DialogExample]] = {}
    for split, dialogs in ds.splits.items():
        out = []
        for ex in dialogs:
            turns = list(ex.turns)
            changed = False
            for qa_idx in ex.qa_user_indices():
                text = by_key.pop((ex.dialog_id, qa_idx), None)
                if text is None:
                    continue
                ann = turns[qa_idx].annotation
                assert ann is not None
                if ann.question_type is not QuestionType.UNANSWERABLE:
                    raise InvariantViolation(
                        f"{ex.dialog_id} turn {qa_idx}: completion targets an answerable turn"
                    )
                turns[qa_idx] = replace(
                    turns[qa_idx], annotation=replace(ann, implicit_knowledge=text)
                )
                changed = True
            out.append(replace(ex, turns=tuple(turns)) if changed else ex)
        new_splits[split] = out
    if by_key:
        missing = ", ".join(f"{d}:{t}" for d, t in list(by_key)[:5])
        raise InvariantViolation(f"completions target unknown turns: {missing}")
    return Dataset(new_splits, ds.domains, ds.slots, ds.database_path)
