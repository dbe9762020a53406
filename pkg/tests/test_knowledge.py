import pytest
from hypothesis import given, settings, strategies as st

from oracles import ref_db_matches

from dialog_engine.core import Role, Turn
from dialog_engine.errors import (
    BadExampleCount,
    EmptyHistory,
    EmptyQuery,
    ProviderUnavailable,
    UnknownDomain,
)
from dialog_engine.knowledge import (
    EntityDatabase,
    FixtureSearchClient,
    KnowledgeItem,
    Provenance,
    RetrievalCache,
    acquire,
    build_kb_prompt,
    build_policy_prompt,
    query_database,
    render_db_state,
)
from dialog_engine.states import BeliefState, State


@pytest.fixture()
def small_db():
    return EntityDatabase(
        {
            "restaurant": [
                {"name": "alimentum", "area": "north", "food": "chinese"},
                {"name": "golden wok", "area": "north", "food": "chinese"},
                {"name": "the cow pizza kitchen and bar", "area": "centre", "food": "italian"},
            ],
            "train": [],
        }
    )


def belief(*blocks):
    return BeliefState.of(list(blocks))


def test_query_single_constraint(small_db):
    results = query_database(small_db, belief(("restaurant", [("food", "italian")])))
    assert [r["name"] for r in results[0][1]] == ["the cow pizza kitchen and bar"]


def test_query_empty_constraints_match_all(small_db):
    results = query_database(small_db, belief(("restaurant", [])))
    assert len(results[0][1]) == 3


def test_query_unknown_domain(small_db):
    with pytest.raises(UnknownDomain):
        query_database(small_db, belief(("spa", [("area", "north")])))


def test_query_missing_slot_never_matches(small_db):
    results = query_database(small_db, belief(("restaurant", [("stars", "4")])))
    assert results[0][1] == []


def test_query_normalizes_case_and_spaces(small_db):
    results = query_database(small_db, belief(("restaurant", [("food", "  Chinese ")])))
    assert len(results[0][1]) == 2


def test_record_needs_name():
    with pytest.raises(ValueError):
        EntityDatabase({"restaurant": [{"area": "north"}]})


def test_render_no_results():
    assert render_db_state([("train", [])]) == "train matched = 0"


def test_render_empty_result_list():
    assert render_db_state([]) == "matched = 0"


def test_render_first_record_in_column_order():
    rendered = render_db_state(
        [("restaurant", [{"name": "alimentum", "area": "north"}])]
    )
    assert rendered == "restaurant matched = 1 ; name = alimentum ; area = north"


def test_render_joins_domains():
    rendered = render_db_state([("train", []), ("hotel", [])])
    assert rendered == "train matched = 0 | hotel matched = 0"


db_strategy = st.dictionaries(
    st.sampled_from(["restaurant", "hotel", "train"]),
    st.lists(
        st.fixed_dictionaries(
            {"name": st.sampled_from(["a", "b", "c", "d"])},
            optional={
                "area": st.sampled_from(["north", "south", "centre"]),
                "food": st.sampled_from(["chinese", "italian"]),
                "day": st.sampled_from(["friday", "monday"]),
            },
        ),
        max_size=50,
    ),
    min_size=1,
    max_size=3,
)

constraint_strategy = st.lists(
    st.tuples(
        st.sampled_from(["area", "food", "day"]),
        st.sampled_from(["north", "south", "centre", "chinese", "italian", "friday"]),
    ),
    max_size=4,
    unique_by=lambda p: p[0],
)


@given(db=db_strategy, constraints=constraint_strategy)
@settings(max_examples=200)
def test_query_matches_linear_scan_oracle(db, constraints):
    entity_db = EntityDatabase(db)
    domain = next(iter(db))
    results = query_database(entity_db, belief((domain, constraints)))
    assert results[0][1] == ref_db_matches(db[domain], constraints)


@given(db=db_strategy, constraints=constraint_strategy)
@settings(max_examples=100)
def test_extra_constraint_never_increases_matches(db, constraints):
    entity_db = EntityDatabase(db)
    domain = next(iter(db))
    base = query_database(entity_db, belief((domain, constraints)))[0][1]
    tightened = constraints + [("name", "a")]
    if any(slot == "name" for slot, _ in constraints):
        return
    narrowed = query_database(entity_db, belief((domain, tightened)))[0][1]
    assert len(narrowed) <= len(base)


# --- prompt builders ----------------------------------------------------------


def _dialog(dialog_id, *texts):
    from dialog_engine.core import DialogExample, GoalAnnotation

    turns = tuple(
        Turn(Role.USER if i % 2 == 0 else Role.SYSTEM, t) for i, t in enumerate(texts)
    )
    return DialogExample(dialog_id, GoalAnnotation(), turns)


def test_policy_prompt_layout():
    ex1 = _dialog("e1", "hello", "hi, how can I help?")
    ex2 = _dialog("e2", "find me a hotel", "sure, which area?")
    history = [Turn(Role.USER, "is parking free at the hotel?")]
    prompt = build_policy_prompt([ex1, ex2], history)
    assert prompt == (
        "hello\nhi, how can I help?\n\n"
        "find me a hotel\nsure, which area?\n\n"
        "is parking free at the hotel?\n"
    )
    assert prompt.count("\n\n") == 2
    assert prompt.endswith("is parking free at the hotel?\n")


def test_policy_prompt_example_count():
    ex = _dialog("e1", "hello", "hi")
    with pytest.raises(BadExampleCount):
        build_policy_prompt([ex], [Turn(Role.USER, "question?")])


def test_policy_prompt_empty_history():
    ex1 = _dialog("e1", "hello", "hi")
    ex2 = _dialog("e2", "yo", "hey")
    with pytest.raises(EmptyHistory):
        build_policy_prompt([ex1, ex2], [])
    with pytest.raises(EmptyHistory):
        build_policy_prompt([ex1], [])  # history check wins over example count


def test_kb_prompt_layout():
    prompt = build_kb_prompt([("q1 tokens", "k1 text")], "live query")
    assert prompt == "q1 tokens\nk1 text\n\nlive query\n"


def test_kb_prompt_needs_pairs_and_query():
    with pytest.raises(BadExampleCount):
        build_kb_prompt([], "q")
    with pytest.raises(EmptyQuery):
        build_kb_prompt([("q", "k")], "   ")


@given(st.integers(min_value=1, max_value=6))
def test_kb_prompt_separator_count(n_pairs):
    pairs = [(f"query {i}", f"knowledge {i}") for i in range(n_pairs)]
    prompt = build_kb_prompt(pairs, "live")
    assert prompt.count("\n\n") == n_pairs
    assert len(prompt.split("\n\n")) == n_pairs + 1


# --- acquire ------------------------------------------------------------------


class CountingGenClient:
    def __init__(self, text="generated knowledge"):
        self.text = text
        self.calls = 0

    def generate(self, prompt, max_new_tokens):
        self.calls += 1
        return self.text


def _deps(small_db, search=None, gen=None):
    return dict(
        db=small_db,
        explicit_client=search or FixtureSearchClient({}),
        implicit_client=gen or CountingGenClient(),
        kb_examples=[("q", "k")],
    )


def test_acquire_database(small_db):
    state = State.database(belief(("restaurant", [("food", "italian")])))
    item = acquire(state, [], **_deps(small_db))
    assert item.provenance is Provenance.DATABASE
    assert item.text.startswith("restaurant matched = 1 ; name = the cow pizza")


def test_acquire_explicit_top_snippet(small_db):
    search = FixtureSearchClient(
        {"cancel taxi booking extra charge": [
            {"title": "t1", "snippet": "top snippet", "url": "u"},
            {"title": "t2", "snippet": "second", "url": "u"},
        ]}
    )
    state = State.explicit("cancel taxi booking extra charge")
    item = acquire(state, [], **_deps(small_db, search=search))
    assert item.provenance is Provenance.EXPLICIT
    assert item.text == "top snippet"


def test_acquire_empty_retrieval_degrades(small_db):
    state = State.explicit("nothing indexed for this")
    item = acquire(state, [], **_deps(small_db))
    assert item.provenance is Provenance.NONE
    assert item.text == ""


def test_acquire_implicit_kb_uses_kb_prompt(small_db):
    gen = CountingGenClient("llm snippet")
    state = State.implicit("some question")
    item = acquire(state, [], implicit_mode="knowledge_base", **_deps(small_db, gen=gen))
    assert item.provenance is Provenance.IMPLICIT_KB
    assert item.text == "llm snippet"


def test_acquire_implicit_policy_uses_history(small_db):
    class RecordingGen(CountingGenClient):
        def generate(self, prompt, max_new_tokens):
            self.last_prompt = prompt
            return super().generate(prompt, max_new_tokens)

    gen = RecordingGen("policy knowledge")
    ex1 = _dialog("e1", "hello", "hi")
    ex2 = _dialog("e2", "yo", "hey")
    history = [Turn(Role.USER, "is it open late?")]
    state = State.implicit("ignored for prompting")
    item = acquire(
        state,
        history,
        implicit_mode="policy_model",
        policy_examples=[ex1, ex2],
        **_deps(small_db, gen=gen),
    )
    assert item.provenance is Provenance.IMPLICIT_POLICY
    assert gen.last_prompt.endswith("is it open late?\n")


def test_acquire_cache_hits_are_byte_identical(small_db):
    cache = RetrievalCache()
    gen = CountingGenClient()
    state = State.implicit("cached question")
    deps = _deps(small_db, gen=gen)
    first = acquire(state, [], cache=cache, **deps)
    second = acquire(state, [], cache=cache, **deps)
    assert gen.calls == 1
    assert first == second


def test_acquire_cache_normalizes_query(small_db):
    cache = RetrievalCache()
    search = FixtureSearchClient({"my query": [{"title": "t", "snippet": "s", "url": ""}]})
    deps = _deps(small_db, search=search)
    acquire(State.explicit("My  Query"), [], cache=cache, **deps)
    acquire(State.explicit("my query"), [], cache=cache, **deps)
    assert search.calls == 1


def test_knowledge_item_requires_text():
    with pytest.raises(ValueError):
        KnowledgeItem(Provenance.EXPLICIT, "")


def test_http_clients_raise_provider_unavailable():
    from dialog_engine.knowledge import HttpGenerationClient, HttpSearchClient

    search = HttpSearchClient("http://127.0.0.1:9", timeout=0.05, backoff=0.01)
    with pytest.raises(ProviderUnavailable):
        search.search("anything")
    gen = HttpGenerationClient("http://127.0.0.1:9", timeout=0.05, backoff=0.01)
    with pytest.raises(ProviderUnavailable):
        gen.generate("prompt", 10)
