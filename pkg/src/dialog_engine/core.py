"""Dialog domain types: turns, annotations, examples, live sessions.

Everything here is an immutable value; appending a turn returns a new
Session. Dialogs always start with a user turn and alternate strictly.
"""

from __future__ import annotations

import time
import uuid
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Mapping, Optional

from .errors import AlternationViolation, EmptyUtterance
from .states import State


class Role(str, Enum):
    USER = "user"
    SYSTEM = "system"


class TurnKind(str, Enum):
    TOD = "tod"
    QA = "qa"


class QuestionType(str, Enum):
    ANSWERABLE = "answerable"
    UNANSWERABLE = "unanswerable"


@dataclass(frozen=True)
class TurnAnnotation:
    """Gold labels carried by annotated turns.

    TOD system turns carry ``turn_kind=tod`` with the gold routing state and
    the delexicalized reference response. Inserted question turns carry
    ``turn_kind=qa`` on the *user* turn, with the question type, gold state,
    gold search query and (depending on answerability) the selected or
    language-model knowledge.
    """

    turn_kind: TurnKind
    question_type: Optional[QuestionType] = None
    gold_state: Optional[State] = None
    gold_query: Optional[str] = None
    selected_knowledge: Optional[str] = None
    implicit_knowledge: Optional[str] = None
    delexicalized_response: Optional[str] = None

    def __post_init__(self):
        if (self.question_type is not None) != (self.turn_kind is TurnKind.QA):
            raise ValueError("question_type present iff turn_kind is qa")


@dataclass(frozen=True)
class Turn:
    role: Role
    text: str
    annotation: Optional[TurnAnnotation] = None

    def __post_init__(self):
        if not self.text.strip():
            raise EmptyUtterance("turn text is empty after trimming")


@dataclass(frozen=True)
class GoalAnnotation:
    """Per-domain goal: hard constraints and the slots the user will ask for."""

    constraints: Mapping[str, Mapping[str, str]] = field(default_factory=dict)
    requested: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def domains(self) -> tuple[str, ...]:
        seen = dict.fromkeys(list(self.constraints) + list(self.requested))
        return tuple(seen)


@dataclass(frozen=True)
class DialogExample:
    """One annotated dialog. ``source_id``/``source_turns`` are only set on
    dialogs derived by subset expansion and point back at the original."""

    dialog_id: str
    goal: GoalAnnotation
    turns: tuple[Turn, ...]
    source_id: Optional[str] = None
    source_turns: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        check_alternation(self.turns)

    def system_turn_indices(self) -> tuple[int, ...]:
        return tuple(i for i, t in enumerate(self.turns) if t.role is Role.SYSTEM)

    def qa_user_indices(self) -> tuple[int, ...]:
        return tuple(
            i
            for i, t in enumerate(self.turns)
            if t.role is Role.USER
            and t.annotation is not None
            and t.annotation.turn_kind is TurnKind.QA
        )


def check_alternation(turns: tuple[Turn, ...]) -> None:
    for i, turn in enumerate(turns):
        expected = Role.USER if i % 2 == 0 else Role.SYSTEM
        if turn.role is not expected:
            raise AlternationViolation(
                f"turn {i} must be {expected.value}, got {turn.role.value}"
            )


@dataclass(frozen=True)
class Session:
    """A live conversation plus the per-turn trace of engine results."""

    session_id: str
    turns: tuple[Turn, ...] = ()
    trace: tuple[Any, ...] = ()  # TurnResult entries, one per system turn
    created_at: float = 0.0

    @staticmethod
    def new(session_id: Optional[str] = None) -> "Session":
        return Session(session_id or uuid.uuid4().hex, created_at=time.time())

    def with_trace(self, result: Any) -> "Session":
        return replace(self, trace=self.trace + (result,))


def append_turn(session: Session, role: Role, text: str) -> Session:
    """Append a turn, enforcing user/system alternation and non-empty text."""
    stripped = text.strip()
    if not stripped:
        raise EmptyUtterance("refusing to append an empty utterance")
    if session.turns:
        last = session.turns[-1].role
        expected = Role.SYSTEM if last is Role.USER else Role.USER
    else:
        expected = Role.USER
    if role is not expected:
        raise AlternationViolation(
            f"expected a {expected.value} turn, got {role.value}"
        )
    return replace(session, turns=session.turns + (Turn(role, stripped),))
