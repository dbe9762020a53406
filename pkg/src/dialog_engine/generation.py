"""Model-facing serialization and the pluggable generation backend.

Inputs to the backend are plain text with a task prefix:

    State Prediction: user: ... system: ... user: ...
    Response Generation: user: ... system: ... user: ... <|knowledge|> ...

The history window keeps at most 2k+1 utterances ending at the current user
turn and is trimmed, oldest utterance first, to the history token budget;
knowledge is trimmed from the right to honor the total input budget.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Optional, Protocol, Sequence

from .core import Role, Turn
from .errors import LastTurnNotUser, ProviderUnavailable
from .knowledge import HttpGenerationClient

STATE_PREFIX = "State Prediction: "
RESPONSE_PREFIX = "Response Generation: "
KNOWLEDGE_MARKER = "<|knowledge|>"


def whitespace_tokens(text: str) -> int:
    return len(text.split())


@dataclass(frozen=True)
class WindowConfig:
    history_window_k: int = 2
    max_input_tokens: int = 512
    max_history_tokens: int = 256
    max_generation_tokens: int = 80
    token_counter: Callable[[str], int] = whitespace_tokens

    def __post_init__(self):
        if min(self.history_window_k, self.max_input_tokens,
               self.max_history_tokens, self.max_generation_tokens) <= 0:
            raise ValueError("window parameters must be positive")
        if self.max_history_tokens > self.max_input_tokens:
            raise ValueError("history budget exceeds input budget")


class GenerationBackend(Protocol):
    def generate(self, input_text: str, max_new_tokens: int) -> str: ...


def render_utterance(turn: Turn) -> str:
    return f"{turn.role.value}: {turn.text}"


def _drop_leading_words(text: str, counter: Callable[[str], int], budget: int) -> str:
    words = text.split()
    while len(words) > 1 and counter(" ".join(words)) > budget:
        words.pop(0)
    return " ".join(words)


def build_history_window(turns: Sequence[Turn], cfg: WindowConfig) -> str:
    """Render the trailing history window ending at the current user turn.

    Keeps at most 2k+1 utterances; drops whole utterances from the left
    until the rendered text fits the history budget, always keeping the
    current user utterance (word-trimmed from the left as a last resort).
    """
    if not turns or turns[-1].role is not Role.USER:
        raise LastTurnNotUser("history window must end on a user turn")
    span = 2 * cfg.history_window_k + 1
    window = [render_utterance(t) for t in turns[-span:]]
    while len(window) > 1 and cfg.token_counter(" ".join(window)) > cfg.max_history_tokens:
        window.pop(0)
    text = " ".join(window)
    if cfg.token_counter(text) > cfg.max_history_tokens:
        text = _drop_leading_words(text, cfg.token_counter, cfg.max_history_tokens)
    return text


def predict_state(backend: GenerationBackend, history_text: str, cfg: WindowConfig) -> str:
    """Ask the backend for the raw state string; parsing is the caller's job."""
    if not history_text:
        raise ValueError("history_text must be non-empty")
    return backend.generate(STATE_PREFIX + history_text, cfg.max_generation_tokens)


def generate_response(
    backend: GenerationBackend,
    history_text: str,
    knowledge_text: str,
    cfg: WindowConfig,
) -> str:
    """Ask the backend for a grounded response.

    The knowledge segment is cut from the right until the whole input fits
    the input budget; the history segment was already budgeted upstream.
    """
    if not history_text:
        raise ValueError("history_text must be non-empty")
    prompt = f"{RESPONSE_PREFIX}{history_text} {KNOWLEDGE_MARKER} {knowledge_text}"
    words = knowledge_text.split()
    while words and cfg.token_counter(prompt) > cfg.max_input_tokens:
        words.pop()
        prompt = f"{RESPONSE_PREFIX}{history_text} {KNOWLEDGE_MARKER} {' '.join(words)}"
    return backend.generate(prompt, cfg.max_generation_tokens)


def input_fingerprint(input_text: str) -> str:
    return hashlib.sha256(input_text.encode("utf-8")).hexdigest()


class ScriptedBackend:
    """Deterministic fixture backend: SHA-256 of the full input -> output.

    Unknown inputs raise ProviderUnavailable unless a fallback backend is
    supplied.
    """

    def __init__(self, script: Mapping[str, str], fallback: Optional["GenerationBackend"] = None):
        self.script = dict(script)
        self.fallback = fallback
        self.calls: list[str] = []

    @staticmethod
    def load(path: str | Path, fallback: Optional["GenerationBackend"] = None) -> "ScriptedBackend":
        with open(path, encoding="utf-8") as fh:
            return ScriptedBackend(json.load(fh), fallback=fallback)

    def generate(self, input_text: str, max_new_tokens: int) -> str:
        self.calls.append(input_text)
        key = input_fingerprint(input_text)
        if key in self.script:
            return self.script[key]
        if self.fallback is not None:
            return self.fallback.generate(input_text, max_new_tokens)
        raise ProviderUnavailable(
            f"scripted backend has no output for input starting {input_text[:60]!r}"
        )


class RuleBackend:
    """Tiny rule-based stand-in for a trained model.

    Routes every state prediction to an explicit search on the latest user
    utterance and answers by echoing the retrieved knowledge.
    """

    no_knowledge_reply = "I could not find anything on that, sorry."

    def generate(self, input_text: str, max_new_tokens: int) -> str:
        if input_text.startswith(RESPONSE_PREFIX):
            knowledge = input_text.split(KNOWLEDGE_MARKER, 1)[-1].strip()
            if not knowledge:
                return self.no_knowledge_reply
            words = knowledge.split()
            return " ".join(words[:max_new_tokens])
        window = input_text.removeprefix(STATE_PREFIX)
        last_user = window.rsplit("user:", 1)[-1].strip()
        return f"Explicit: {last_user or window.strip()}"


class StaticBackend:
    """Always returns the same configured text."""

    def __init__(self, text: str):
        self.text = text
        self.calls: list[str] = []

    def generate(self, input_text: str, max_new_tokens: int) -> str:
        self.calls.append(input_text)
        return self.text


class EchoBackend:
    """Returns the input unchanged; handy for asserting serialization."""

    def __init__(self):
        self.calls: list[str] = []

    def generate(self, input_text: str, max_new_tokens: int) -> str:
        self.calls.append(input_text)
        return input_text


class RemoteBackend:
    """Backend over the generation-provider wire protocol."""

    def __init__(self, base_url: str, timeout: float = 30.0, backoff: float = 0.25):
        self._client = HttpGenerationClient(base_url, timeout=timeout, backoff=backoff)

    def generate(self, input_text: str, max_new_tokens: int) -> str:
        return self._client.generate(input_text, max_new_tokens)
