"""Exception hierarchy for the model runner.

Everything raised on purpose derives from RunnerError so callers (and the
CLI) can distinguish domain failures from bugs.
"""

from __future__ import annotations


class RunnerError(Exception):
    """Base class for all runner failures."""


class JobError(RunnerError):
    """A job parameter violates an invariant or a required field is missing."""


class SchemaError(RunnerError):
    """An input file (items, template pack, best-template map) is malformed."""


class ModelLoadError(RunnerError):
    """A model directory could not be loaded."""


class VocabMismatchError(RunnerError):
    """The two models of a logits-pair export do not share a vocabulary."""


class TemplateError(RunnerError):
    """Template pack does not cover the items, or a template id is invalid."""


class GenerationError(RunnerError):
    """Generation failed even at batch size 1, or produced unusable output."""
