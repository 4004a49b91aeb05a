"""Job descriptions for the three generation procedures.

A RunnerJob bundles every knob a run needs: model paths, input files,
sampling/greedy limits, and the output location. Invariants are enforced
at construction so a bad job fails before any model is loaded:

  - temperature must be a positive finite number (sampling at 0 is
    meaningless; greedy decoding simply never reads it)
  - top_k for logits export must be at least MIN_TOP_K so downstream
    truncation to the top 10 always has enough entries
  - counts and limits must be >= 1

Single-model procedures (completions, predictions) read ``model_path``;
the logits-pair export reads ``ft_model_path`` and ``pre_model_path``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import JobError

MIN_TOP_K = 10
TEMPERATURE_DEFAULT = 0.7
N_SAMPLES_DEFAULT = 10
SAMPLE_MAX_NEW_DEFAULT = 32
GREEDY_MAX_NEW_DEFAULT = 16


@dataclass(frozen=True)
class RunnerJob:
    items_path: str
    out_path: str
    model_path: str | None = None
    pre_model_path: str | None = None
    ft_model_path: str | None = None
    template_path: str | None = None
    best_templates_path: str | None = None
    run_id: str = "run-0"
    temperature: float = TEMPERATURE_DEFAULT
    n_samples: int = N_SAMPLES_DEFAULT
    sample_max_new_tokens: int = SAMPLE_MAX_NEW_DEFAULT
    greedy_max_new_tokens: int = GREEDY_MAX_NEW_DEFAULT
    top_k: int = MIN_TOP_K
    batch_size: int = 8
    seed: int = 0
    device: str = "cpu"

    def __post_init__(self) -> None:
        if not self.items_path:
            raise JobError("items_path is required")
        if not self.out_path:
            raise JobError("out_path is required")
        if not isinstance(self.temperature, (int, float)) or isinstance(
            self.temperature, bool
        ) or not math.isfinite(self.temperature) or self.temperature <= 0:
            raise JobError(
                f"temperature must be a positive finite number, got {self.temperature!r}"
            )
        for name, value in (
            ("n_samples", self.n_samples),
            ("sample_max_new_tokens", self.sample_max_new_tokens),
            ("greedy_max_new_tokens", self.greedy_max_new_tokens),
            ("batch_size", self.batch_size),
        ):
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise JobError(f"{name} must be an integer >= 1, got {value!r}")
        if not isinstance(self.top_k, int) or isinstance(self.top_k, bool) or (
            self.top_k < MIN_TOP_K
        ):
            raise JobError(f"top_k must be an integer >= {MIN_TOP_K}, got {self.top_k!r}")
        if not isinstance(self.run_id, str) or not self.run_id:
            raise JobError("run_id must be a non-empty string")

    def require(self, *fields: str) -> None:
        """Raise JobError unless every named optional field is set."""
        for field in fields:
            if getattr(self, field) is None:
                raise JobError(f"this procedure requires {field}")
