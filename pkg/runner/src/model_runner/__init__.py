"""Thin adapter that runs causal language models to produce analysis inputs.

Three procedures, each emitting one JSON-lines artifact:

  - generate_completions: the full (item x template x sample) grid of
    stochastic continuations used for knowledge-mastery classification
  - generate_predictions: one greedy answer per item in chat format
  - export_logits_pairs: both models' first-token logits over the
    fine-tuned model's top-k token set, for distribution-shift analysis

The runner performs no analysis of its own; it exists to feed the files
the analysis toolkit consumes.
"""

from .engine import Generated, ModelHandle, map_in_batches, top_k_by_logit
from .errors import (
    GenerationError,
    JobError,
    ModelLoadError,
    RunnerError,
    SchemaError,
    TemplateError,
    VocabMismatchError,
)
from .io import (
    KnowledgeItem,
    TemplatePack,
    read_best_templates,
    read_items,
    read_template_pack,
    write_jsonl_atomic,
)
from .jobs import MIN_TOP_K, RunnerJob
from .prompts import assistant_turn, question_body, question_prompt
from .runner import (
    CompletionSummary,
    LogitsSummary,
    PredictionSummary,
    export_logits_pairs,
    generate_completions,
    generate_predictions,
)

__all__ = [
    "Generated",
    "ModelHandle",
    "map_in_batches",
    "top_k_by_logit",
    "RunnerError",
    "JobError",
    "SchemaError",
    "ModelLoadError",
    "VocabMismatchError",
    "TemplateError",
    "GenerationError",
    "KnowledgeItem",
    "TemplatePack",
    "read_items",
    "read_template_pack",
    "read_best_templates",
    "write_jsonl_atomic",
    "RunnerJob",
    "MIN_TOP_K",
    "question_body",
    "question_prompt",
    "assistant_turn",
    "generate_completions",
    "generate_predictions",
    "export_logits_pairs",
    "CompletionSummary",
    "PredictionSummary",
    "LogitsSummary",
]
