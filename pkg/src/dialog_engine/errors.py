"""Exception types shared across the engine."""

from __future__ import annotations


class EngineError(Exception):
    """Base class for every error raised by this package."""


# dialog sessions
class AlternationViolation(EngineError):
    pass


class EmptyUtterance(EngineError):
    pass


# state grammar
class UnknownPrefix(EngineError):
    pass


class EmptyPayload(EngineError):
    pass


class BeliefParseError(EngineError):
    """Belief-string rejection; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


# knowledge routing
class UnknownDomain(EngineError):
    pass


class BadExampleCount(EngineError):
    pass


class EmptyHistory(EngineError):
    pass


class EmptyQuery(EngineError):
    pass


class ProviderUnavailable(EngineError):
    pass


# serialization / windowing
class LastTurnNotUser(EngineError):
    pass


# metrics
class EmptyGoldQuery(EngineError):
    pass


class LengthMismatch(EngineError):
    pass


class EmptyCorpus(EngineError):
    pass


class MissingPrediction(EngineError):
    pass


class MissingGoal(EngineError):
    pass


# dataset loading
class SchemaError(EngineError):
    pass


class InvariantViolation(EngineError):
    pass


class MissingAnnotation(EngineError):
    pass
