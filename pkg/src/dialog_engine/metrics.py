"""Evaluation suite: BLEU, Inform, Success, Combined, routing Accuracy,
Query F1 and the QA Success Rate, over TOD / QA / full-task modes.

Scores are on the 0-100 scale throughout. Combined = (Inform + Success) * 0.5
+ BLEU. A dialog counts for the QA metrics only if it contains inserted
question turns; it succeeds there when its mean Query F1 is at least 20.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

from .core import DialogExample, QuestionType, Role, TurnKind
from .errors import (
    EmptyCorpus,
    EmptyGoldQuery,
    LengthMismatch,
    MissingGoal,
    MissingPrediction,
)
from .knowledge import EntityDatabase, query_database
from .states import BeliefState, KnowledgeSource, State, parse_state, serialize_state

QA_SUCCESS_THRESHOLD = 20.0
_STRIP = str.maketrans("", "", ".,!?;:'\"()")


def tokenize(text: str) -> list[str]:
    """Lowercase, drop punctuation characters, split on whitespace."""
    return [t for t in text.lower().translate(_STRIP).split() if t]


def query_f1(predicted: str, gold: str) -> float:
    """Token-overlap F1 between predicted and gold queries, 0-100.

    Overlap is the clipped multiset intersection; an empty prediction scores
    0, an empty gold query is a caller error.
    """
    gold_tokens = tokenize(gold)
    if not gold_tokens:
        raise EmptyGoldQuery(f"gold query {gold!r} has no tokens")
    pred_tokens = tokenize(predicted)
    if not pred_tokens:
        return 0.0
    common = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
    if common == 0:
        return 0.0
    precision = common / len(pred_tokens)
    recall = common / len(gold_tokens)
    return 100.0 * 2 * precision * recall / (precision + recall)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(candidates: Sequence[str], references: Sequence[str]) -> float:
    """Corpus-level BLEU-4 with clipped counts and brevity penalty, 0-100.

    One reference per candidate, no smoothing: any zero n-gram precision
    zeroes the score.
    """
    if len(candidates) != len(references):
        raise LengthMismatch(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise EmptyCorpus("no candidate/reference pairs")
    cand = [tokenize(c) for c in candidates]
    refs = [tokenize(r) for r in references]
    c = sum(len(t) for t in cand)
    r = sum(len(t) for t in refs)
    if c == 0:
        return 0.0
    log_precisions = 0.0
    for n in range(1, 5):
        clipped = 0
        total = 0
        for hyp, ref in zip(cand, refs):
            counts = _ngrams(hyp, n)
            clipped += sum((counts & _ngrams(ref, n)).values())
            total += sum(counts.values())
        if total == 0 or clipped == 0:
            return 0.0
        log_precisions += 0.25 * math.log(clipped / total)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return 100.0 * bp * math.exp(log_precisions)


@dataclass(frozen=True)
class RunTurn:
    """One prediction: the system turn at ``turn_index`` of its dialog."""

    turn_index: int
    raw_state_text: str
    parsed_state: Optional[State]
    response_text: str
    offered: Mapping[str, str] = field(default_factory=dict)


@dataclass
class RunOutput:
    """Replay output keyed by dialog_id."""

    dialogs: dict[str, list[RunTurn]]

    def entry(self, dialog_id: str, turn_index: int) -> Optional[RunTurn]:
        for rt in self.dialogs.get(dialog_id, ()):
            if rt.turn_index == turn_index:
                return rt
        return None

    def to_json(self) -> dict:
        out: dict[str, list[dict]] = {}
        for did, turns in self.dialogs.items():
            rows = []
            for rt in turns:
                row = {
                    "turn_index": rt.turn_index,
                    "raw_state_text": rt.raw_state_text,
                    "state": serialize_state(rt.parsed_state) if rt.parsed_state else None,
                    "response": rt.response_text,
                }
                if rt.offered:
                    row["offered"] = dict(rt.offered)
                rows.append(row)
            out[did] = rows
        return out

    @staticmethod
    def from_json(payload: Mapping, domain_vocab, slot_vocab) -> "RunOutput":
        from .errors import EngineError

        dialogs: dict[str, list[RunTurn]] = {}
        for did, rows in payload.items():
            turns = []
            for row in rows:
                state = None
                if row.get("state"):
                    try:
                        state = parse_state(row["state"], domain_vocab, slot_vocab)
                    except EngineError:
                        state = None
                turns.append(
                    RunTurn(
                        turn_index=row["turn_index"],
                        raw_state_text=row.get("raw_state_text", ""),
                        parsed_state=state,
                        response_text=row.get("response", ""),
                        offered=row.get("offered", {}),
                    )
                )
            dialogs[did] = turns
        return RunOutput(dialogs)

    @staticmethod
    def load(path, domain_vocab, slot_vocab) -> "RunOutput":
        with open(path, encoding="utf-8") as fh:
            return RunOutput.from_json(json.load(fh), domain_vocab, slot_vocab)


@dataclass
class MetricReport:
    mode: str
    bleu: Optional[float] = None
    inform: Optional[float] = None
    success: Optional[float] = None
    combined: Optional[float] = None
    accuracy: Optional[float] = None
    query_f1: Optional[float] = None
    qa_success_rate: Optional[float] = None
    counts: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {"mode": self.mode, "counts": dict(self.counts)}
        for name in ("bleu", "inform", "success", "combined", "accuracy",
                     "query_f1", "qa_success_rate"):
            value = getattr(self, name)
            if value is not None:
                out[name] = round(value, 4)
        return out


def combined_score(bleu: float, inform: float, success: float) -> float:
    return (inform + success) * 0.5 + bleu


def _run_lookup(run: RunOutput, example: DialogExample, turn_index: int) -> Optional[RunTurn]:
    """Find the run entry for a (possibly subset-expanded) dialog turn."""
    if example.source_id is not None and example.source_turns is not None:
        return run.entry(example.source_id, example.source_turns[turn_index])
    return run.entry(example.dialog_id, turn_index)


def _gold_query(example: DialogExample, qa_index: int) -> str:
    ann = example.turns[qa_index].annotation
    assert ann is not None
    if ann.gold_query:
        return ann.gold_query
    if ann.gold_state is not None and ann.gold_state.query:
        return ann.gold_state.query
    raise EmptyGoldQuery(f"{example.dialog_id} turn {qa_index} has no gold query")


def _predicted_query(rt: RunTurn) -> str:
    if rt.parsed_state is None or rt.parsed_state.source is KnowledgeSource.DATABASE:
        return ""
    return rt.parsed_state.query or ""


def _qa_dialogs(dialogs: Iterable[DialogExample]) -> list[DialogExample]:
    return [ex for ex in dialogs if ex.qa_user_indices()]


def _require_entry(run: RunOutput, ex: DialogExample, system_index: int) -> RunTurn:
    rt = _run_lookup(run, ex, system_index)
    if rt is None:
        raise MissingPrediction(f"no prediction for {ex.dialog_id} turn {system_index}")
    return rt


def dialog_query_f1s(run: RunOutput, ex: DialogExample) -> list[float]:
    scores = []
    for qa_idx in ex.qa_user_indices():
        rt = _require_entry(run, ex, qa_idx + 1)
        scores.append(query_f1(_predicted_query(rt), _gold_query(ex, qa_idx)))
    return scores


def source_accuracy(run: RunOutput, dialogs: Sequence[DialogExample]) -> float:
    """Share of QA-bearing dialogs whose every question turn was routed to
    its annotated source; database routing on a question turn is wrong."""
    qa_dialogs = _qa_dialogs(dialogs)
    if not qa_dialogs:
        raise EmptyCorpus("no dialogs with question turns")
    correct = 0
    for ex in qa_dialogs:
        ok = True
        for qa_idx in ex.qa_user_indices():
            ann = ex.turns[qa_idx].annotation
            assert ann is not None and ann.gold_state is not None
            rt = _require_entry(run, ex, qa_idx + 1)
            pred = rt.parsed_state.source if rt.parsed_state else None
            if pred is not ann.gold_state.source:
                ok = False
        correct += ok
    return 100.0 * correct / len(qa_dialogs)


def qa_success_rate(run: RunOutput, dialogs: Sequence[DialogExample]) -> float:
    """Share of QA-bearing dialogs whose mean Query F1 reaches the threshold
    (inclusive)."""
    qa_dialogs = _qa_dialogs(dialogs)
    if not qa_dialogs:
        raise EmptyCorpus("no dialogs with question turns")
    successes = 0
    for ex in qa_dialogs:
        scores = dialog_query_f1s(run, ex)
        if sum(scores) / len(scores) >= QA_SUCCESS_THRESHOLD:
            successes += 1
    return 100.0 * successes / len(qa_dialogs)


def _is_qa_system_turn(ex: DialogExample, system_index: int) -> bool:
    prev = ex.turns[system_index - 1] if system_index >= 1 else None
    return (
        prev is not None
        and prev.annotation is not None
        and prev.annotation.turn_kind is TurnKind.QA
    )


def _boundary_contains(haystack: str, needle: str) -> bool:
    pattern = r"(?<!\w)" + re.escape(" ".join(needle.lower().split())) + r"(?!\w)"
    return re.search(pattern, haystack.lower()) is not None


def inform_success(
    run: RunOutput,
    dialogs: Sequence[DialogExample],
    db: EntityDatabase,
    mode: str = "tod",
) -> tuple[float, float]:
    """Dialog-level Inform / Success rates over the generated responses.

    Inform: every constrained goal domain has a satisfying entity named in
    the responses (or recorded as offered during replay). Success: Inform
    plus every requested slot surfaced as a [domain_slot] or [value_slot]
    placeholder. In full mode a dialog whose mean Query F1 falls below the
    threshold fails both outright.
    """
    if not dialogs:
        raise EmptyCorpus("no dialogs to evaluate")
    informs = 0
    successes = 0
    for ex in dialogs:
        if ex.goal is None:
            raise MissingGoal(ex.dialog_id)
        if mode == "full" and ex.qa_user_indices():
            scores = dialog_query_f1s(run, ex)
            if sum(scores) / len(scores) < QA_SUCCESS_THRESHOLD:
                continue

        responses = []
        offered: dict[str, set[str]] = {}
        for sys_idx in ex.system_turn_indices():
            rt = _run_lookup(run, ex, sys_idx)
            if rt is None:
                continue
            responses.append(rt.response_text)
            for domain, name in rt.offered.items():
                offered.setdefault(domain, set()).add(" ".join(name.lower().split()))
        blob = " ".join(responses)

        inform_ok = True
        for domain, slots in ex.goal.constraints.items():
            if not slots:
                continue
            belief = BeliefState.of([(domain, list(slots.items()))])
            matches = query_database(db, belief)[0][1]
            names = {" ".join(rec["name"].lower().split()) for rec in matches}
            mentioned = any(_boundary_contains(blob, name) for name in names)
            if not mentioned and not (names & offered.get(domain, set())):
                inform_ok = False
                break

        success_ok = inform_ok
        if success_ok:
            for domain, slots in ex.goal.requested.items():
                for slot in slots:
                    if f"[{domain}_{slot}]" not in blob and f"[value_{slot}]" not in blob:
                        success_ok = False
                        break
                if not success_ok:
                    break

        informs += inform_ok
        successes += success_ok
    return 100.0 * informs / len(dialogs), 100.0 * successes / len(dialogs)


def evaluate(
    run: RunOutput,
    dialogs: Sequence[DialogExample],
    db: EntityDatabase,
    mode: str = "full",
    subset: str = "all",
) -> MetricReport:
    """Score a run in one of the three modes, optionally on a question-type
    subset (the subset expansion is applied to the dialogs first)."""
    if subset != "all":
        from .data import expand_by_question_type

        answerable, unanswerable = expand_by_question_type(dialogs)
        dialogs = answerable if subset == "answerable" else unanswerable
    if not dialogs:
        raise EmptyCorpus(f"no dialogs in subset {subset!r}")

    candidates: list[str] = []
    references: list[str] = []
    qa_scores: list[float] = []
    n_tod = 0
    n_qa = 0
    for ex in dialogs:
        for sys_idx in ex.system_turn_indices():
            is_qa = _is_qa_system_turn(ex, sys_idx)
            n_qa += is_qa
            n_tod += not is_qa
            if mode == "tod" and is_qa:
                continue
            if mode == "qa" and not is_qa:
                continue
            rt = _require_entry(run, ex, sys_idx)
            candidates.append(rt.response_text)
            references.append(ex.turns[sys_idx].text)
        if mode == "qa":
            qa_scores.extend(dialog_query_f1s(run, ex) if ex.qa_user_indices() else [])

    report = MetricReport(mode=mode)
    report.counts = {
        "dialogs": len(dialogs),
        "qa_dialogs": len(_qa_dialogs(dialogs)),
        "tod_turns": n_tod,
        "qa_turns": n_qa,
    }
    report.bleu = corpus_bleu(candidates, references)

    if mode in ("tod", "full"):
        inform, success = inform_success(run, dialogs, db, mode=mode)
        report.inform = inform
        report.success = success
        report.combined = combined_score(report.bleu, inform, success)
    if mode == "qa":
        report.accuracy = source_accuracy(run, dialogs)
        report.qa_success_rate = qa_success_rate(run, dialogs)
        report.query_f1 = sum(qa_scores) / len(qa_scores) if qa_scores else 0.0
    return report


_COLUMNS = ("bleu", "success", "inform", "combined", "accuracy", "qa_success_rate", "query_f1")


def format_report_table(reports: Mapping[str, MetricReport]) -> str:
    """Aligned plain-text table, one row per named report."""
    headers = ["run"] + [c.replace("qa_success_rate", "success rate") for c in _COLUMNS]
    rows = [headers]
    for name, rep in reports.items():
        row = [name]
        for col in _COLUMNS:
            value = getattr(rep, col)
            row.append("-" if value is None else f"{value:.2f}")
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(headers))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines)
