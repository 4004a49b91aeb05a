"""Checkpoint-pair analysis toolkit.

Quantifies what a parameter update changed in a model: per-parameter
relative change with exact global top-k selection, update-mass
concentration, layer/module attribution, selective bit-exact restoration,
first-token KL shift, knowledge-mastery bucketing, and bucketed accuracy
scoring.
"""

from .delta_rank import (
    AttributionReport,
    ConcentrationTable,
    DeltaIndex,
    NameRules,
    ThresholdSelection,
    attribute,
    build_delta_index,
    concentration,
    relative_change,
    select_threshold,
)
from .errors import (
    ConfigError,
    ContainerError,
    DegenerateIndexError,
    EmptyBucketError,
    FtscopeError,
    MissingTrialsError,
    NoDataError,
    PairMismatchError,
    SchemaError,
)
from .evaluator import (
    AccuracyReport,
    PredictionRecord,
    RunSummary,
    load_predictions,
    score_run,
    summarize_runs,
)
from .logit_kl import (
    KlReport,
    LogitsPairRecord,
    aggregate_kl,
    kl,
    read_logits_pairs,
    renormalize,
)
from .mastery import (
    CompletionRecord,
    KnowledgeItem,
    MasteryReport,
    TemplatePack,
    assign_bucket,
    best_template,
    builtin_template_pack,
    filter_high_success,
    list_builtin_topics,
    load_completions,
    load_items,
    load_synonyms,
    load_template_pack,
    mastery_ratio,
    match_answer,
    split_dataset,
)
from .restorer import RestoreSummary, restore_layers, restore_topk
from .tensor_store import (
    Checkpoint,
    PairReport,
    TensorRecord,
    open_checkpoint,
    read_tensor,
    validate_pair,
    write_checkpoint,
)

__version__ = "0.1.0"

__all__ = [
    "AccuracyReport",
    "AttributionReport",
    "Checkpoint",
    "CompletionRecord",
    "ConcentrationTable",
    "ConfigError",
    "ContainerError",
    "DegenerateIndexError",
    "DeltaIndex",
    "EmptyBucketError",
    "FtscopeError",
    "KlReport",
    "KnowledgeItem",
    "LogitsPairRecord",
    "MasteryReport",
    "MissingTrialsError",
    "NameRules",
    "NoDataError",
    "PairMismatchError",
    "PairReport",
    "PredictionRecord",
    "RestoreSummary",
    "RunSummary",
    "SchemaError",
    "TemplatePack",
    "TensorRecord",
    "ThresholdSelection",
    "aggregate_kl",
    "assign_bucket",
    "attribute",
    "best_template",
    "build_delta_index",
    "builtin_template_pack",
    "concentration",
    "filter_high_success",
    "kl",
    "list_builtin_topics",
    "load_completions",
    "load_items",
    "load_predictions",
    "load_synonyms",
    "load_template_pack",
    "mastery_ratio",
    "match_answer",
    "open_checkpoint",
    "read_tensor",
    "relative_change",
    "renormalize",
    "restore_layers",
    "restore_topk",
    "score_run",
    "select_threshold",
    "split_dataset",
    "summarize_runs",
    "validate_pair",
    "write_checkpoint",
]
