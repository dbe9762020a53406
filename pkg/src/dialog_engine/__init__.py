"""Turn-level dialog engine that routes each turn to a local database, a web
search provider, or a language-model prompt, and scores the results."""

from .core import (
    DialogExample,
    GoalAnnotation,
    QuestionType,
    Role,
    Session,
    Turn,
    TurnAnnotation,
    TurnKind,
    append_turn,
)
from .data import (
    Dataset,
    DatasetStats,
    Regime,
    REGIMES,
    dataset_stats,
    emit_augmentation_prompts,
    emit_training_examples,
    expand_by_question_type,
    load_dataset,
    merge_implicit_knowledge,
    save_dataset,
)
from .engine import Engine, EngineConfig, TurnResult, run_dialog, run_turn
from .generation import (
    GenerationBackend,
    ScriptedBackend,
    StaticBackend,
    WindowConfig,
    build_history_window,
    generate_response,
    predict_state,
)
from .knowledge import (
    EntityDatabase,
    KnowledgeItem,
    Provenance,
    RetrievalCache,
    acquire,
    build_kb_prompt,
    build_policy_prompt,
    query_database,
    render_db_state,
)
from .metrics import (
    MetricReport,
    RunOutput,
    corpus_bleu,
    evaluate,
    inform_success,
    qa_success_rate,
    query_f1,
    source_accuracy,
)
from .states import (
    BeliefState,
    KnowledgeSource,
    State,
    parse_belief,
    parse_state,
    serialize_state,
)

__version__ = "0.1.0"
