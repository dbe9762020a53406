"""Routing-state grammar: parse and serialize the per-turn state string.

A state string selects one of three knowledge sources and carries the query
payload for it:

    Database: restaurant pricerange = expensive food = chinese area = north
    Explicit: cancel taxi booking extra charge
    Implicit: credit cards acceptance in alimentum restaurant

The database payload is a belief string: one or more domain blocks, each a
domain token followed by ``slot = value`` pairs. Pairs may be separated by
";" or simply juxtaposed; a value runs until the next known ``slot =``, the
next domain token, a ";", or end of input, so multi-word values need no
quoting. Everything is lowercased.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, Optional, Sequence

from .errors import BeliefParseError, EmptyPayload, UnknownPrefix

DEFAULT_DOMAINS = frozenset(
    {"restaurant", "hotel", "train", "taxi", "attraction", "hospital", "police"}
)

DEFAULT_SLOTS: dict[str, frozenset[str]] = {
    "restaurant": frozenset(
        {"food", "pricerange", "area", "name", "day", "time", "people",
         "phone", "address", "postcode"}
    ),
    "hotel": frozenset(
        {"name", "area", "parking", "pricerange", "stars", "internet", "type",
         "day", "people", "stay", "phone", "address", "postcode"}
    ),
    "train": frozenset(
        {"destination", "day", "departure", "arriveby", "leaveat", "people",
         "price", "duration", "trainid"}
    ),
    "taxi": frozenset(
        {"destination", "departure", "arriveby", "leaveat", "phone", "type"}
    ),
    "attraction": frozenset(
        {"name", "area", "type", "phone", "address", "postcode", "entrancefee"}
    ),
    "hospital": frozenset({"department", "phone", "address", "postcode"}),
    "police": frozenset({"phone", "address", "postcode"}),
}


class KnowledgeSource(str, Enum):
    DATABASE = "database"
    EXPLICIT = "explicit"
    IMPLICIT = "implicit"


@dataclass(frozen=True)
class BeliefState:
    """Ordered domain blocks, each an ordered list of (slot, value) pairs."""

    blocks: tuple[tuple[str, tuple[tuple[str, str], ...]], ...]

    @staticmethod
    def of(blocks: Iterable[tuple[str, Iterable[tuple[str, str]]]]) -> "BeliefState":
        return BeliefState(
            tuple((domain, tuple((s, v) for s, v in slots)) for domain, slots in blocks)
        )

    def constraints(self, domain: str) -> tuple[tuple[str, str], ...]:
        out: list[tuple[str, str]] = []
        for block_domain, slots in self.blocks:
            if block_domain == domain:
                out.extend(slots)
        return tuple(out)


EMPTY_BELIEF = BeliefState(())


@dataclass(frozen=True)
class State:
    """Knowledge-source decision plus its query payload.

    Exactly one of ``belief`` (database) and ``query`` (explicit/implicit)
    is populated.
    """

    source: KnowledgeSource
    belief: Optional[BeliefState] = None
    query: Optional[str] = None

    def __post_init__(self):
        if self.source is KnowledgeSource.DATABASE:
            if self.belief is None or self.query is not None:
                raise ValueError("database state carries a belief and no query")
        else:
            if self.query is None or self.belief is not None:
                raise ValueError(f"{self.source.value} state carries a query only")
            if not self.query.strip():
                raise ValueError("query must be non-empty")

    @staticmethod
    def database(belief: BeliefState) -> "State":
        return State(KnowledgeSource.DATABASE, belief=belief)

    @staticmethod
    def explicit(query: str) -> "State":
        return State(KnowledgeSource.EXPLICIT, query=query)

    @staticmethod
    def implicit(query: str) -> "State":
        return State(KnowledgeSource.IMPLICIT, query=query)


_PREFIXES = {
    "database:": KnowledgeSource.DATABASE,
    "dataset:": KnowledgeSource.DATABASE,  # both surface forms occur in the wild
    "explicit:": KnowledgeSource.EXPLICIT,
    "implicit:": KnowledgeSource.IMPLICIT,
}

_TOKEN_RE = re.compile(r";|=|[^\s;=]+")


def parse_state(
    text: str,
    domain_vocab: Iterable[str] = DEFAULT_DOMAINS,
    slot_vocab: Mapping[str, Iterable[str]] = DEFAULT_SLOTS,
) -> State:
    """Parse a raw state string into a State.

    Prefix matching is case-insensitive; "Database:" and "Dataset:" both
    route to the database source. Raises UnknownPrefix, EmptyPayload, or
    BeliefParseError.
    """
    stripped = text.lstrip()
    lowered = stripped.lower()
    for prefix, source in _PREFIXES.items():
        if lowered.startswith(prefix):
            payload = stripped[len(prefix):].strip()
            if not payload:
                raise EmptyPayload(f"nothing after {prefix!r} prefix")
            if source is KnowledgeSource.DATABASE:
                return State.database(parse_belief(payload, domain_vocab, slot_vocab))
            return State(source, query=payload)
    raise UnknownPrefix(f"no recognized state prefix in {text[:40]!r}")


def parse_belief(
    text: str,
    domain_vocab: Iterable[str] = DEFAULT_DOMAINS,
    slot_vocab: Mapping[str, Iterable[str]] = DEFAULT_SLOTS,
) -> BeliefState:
    """Parse a belief string into domain blocks of (slot, value) pairs.

    Grammar (all token comparisons on lowercased text):

        belief  := block+
        block   := DOMAIN pair+
        pair    := SLOT "=" value (";"?)
        value   := one or more tokens, ending before the next SLOT "=",
                   DOMAIN, ";", or end of input

    Raises BeliefParseError with the byte offset at which no domain, slot of
    the current domain, or separator could be consumed.
    """
    domains = {d.lower() for d in domain_vocab}
    slots = {d.lower(): {s.lower() for s in ss} for d, ss in slot_vocab.items()}

    tokens = [(m.group(0).lower(), m.start()) for m in _TOKEN_RE.finditer(text)]
    if not tokens:
        raise BeliefParseError("empty belief string", 0)

    blocks: list[tuple[str, list[tuple[str, str]]]] = []
    i = 0
    n = len(tokens)

    def starts_pair(idx: int, domain: str) -> bool:
        return (
            idx + 1 < n
            and tokens[idx][0] in slots.get(domain, ())
            and tokens[idx + 1][0] == "="
        )

    while i < n:
        tok, off = tokens[i]
        if tok not in domains:
            raise BeliefParseError(f"expected a domain, got {tok!r}", off)
        domain = tok
        i += 1
        pairs: list[tuple[str, str]] = []
        seen: set[str] = set()
        if i >= n or not starts_pair(i, domain):
            off = tokens[i][1] if i < n else len(text)
            raise BeliefParseError(f"expected a '{domain}' slot assignment", off)
        while i < n:
            if tokens[i][0] == ";":
                i += 1
                if i >= n:
                    break  # trailing separator is tolerated
                if tokens[i][0] in domains:
                    break  # next block
                if starts_pair(i, domain):
                    continue
                raise BeliefParseError(
                    "expected a slot assignment or domain after ';'", tokens[i][1]
                )
            if tokens[i][0] in domains:
                break
            if not starts_pair(i, domain):
                raise BeliefParseError(
                    f"cannot consume {tokens[i][0]!r} here", tokens[i][1]
                )
            slot = tokens[i][0]
            if slot in seen:
                raise BeliefParseError(f"duplicate slot {slot!r}", tokens[i][1])
            i += 2  # slot and "="
            value_words: list[str] = []
            while i < n:
                word = tokens[i][0]
                if word == ";" or word in domains or starts_pair(i, domain):
                    break
                if word == "=":
                    raise BeliefParseError("stray '='", tokens[i][1])
                value_words.append(word)
                i += 1
            if not value_words:
                off = tokens[i][1] if i < n else len(text)
                raise BeliefParseError(f"missing value for slot {slot!r}", off)
            seen.add(slot)
            pairs.append((slot, " ".join(value_words)))
        blocks.append((domain, pairs))

    return BeliefState.of(blocks)


def serialize_belief(belief: BeliefState) -> str:
    segments = []
    for domain, pairs in belief.blocks:
        if pairs:
            segments.append(domain + " " + " ; ".join(f"{s} = {v}" for s, v in pairs))
        else:
            segments.append(domain)
    return " ; ".join(segments)


def serialize_state(state: State) -> str:
    """Canonical surface form; parse_state(serialize_state(s)) == s."""
    if state.source is KnowledgeSource.DATABASE:
        assert state.belief is not None
        return f"Database: {serialize_belief(state.belief)}".rstrip()
    prefix = "Explicit" if state.source is KnowledgeSource.EXPLICIT else "Implicit"
    return f"{prefix}: {state.query}"


def normalize_slot_vocab(
    slot_vocab: Mapping[str, Iterable[str]],
) -> dict[str, frozenset[str]]:
    return {d.lower(): frozenset(s.lower() for s in ss) for d, ss in slot_vocab.items()}


def vocab_from_config(
    domains: Optional[Sequence[str]], slots: Optional[Mapping[str, Sequence[str]]]
) -> tuple[frozenset[str], dict[str, frozenset[str]]]:
    dom = frozenset(d.lower() for d in domains) if domains else DEFAULT_DOMAINS
    slo = normalize_slot_vocab(slots) if slots else dict(DEFAULT_SLOTS)
    return dom, slo
