"""Chat-format prompt construction.

Question/answer prompts follow the exact training format:

    user turn:      bos + "<|question|> " + question.strip() + " <|answer|>"
    assistant turn: " " + answer.strip() + " " + eos

Generation therefore feeds the user turn (up to and including the
"<|answer|>" marker) and lets the model produce the assistant side, which
begins with a space and ends at eos. The bos/eos strings come from each
model's own tokenizer; models without them simply omit the affix.

Cloze probing prompts (the template-pack mappings) are *not* wrapped in
this format — they are plain continuations of the mapping text.
"""

from __future__ import annotations

QUESTION_MARKER = "<|question|>"
ANSWER_MARKER = "<|answer|>"


def question_body(question: str) -> str:
    """The user turn without the bos affix (bos is prepended as a token id)."""
    return f"{QUESTION_MARKER} {question.strip()} {ANSWER_MARKER}"


def question_prompt(question: str, bos_token: str | None = None) -> str:
    """The full rendered user turn, bos included when the model has one."""
    return (bos_token or "") + question_body(question)


def assistant_turn(answer: str, eos_token: str | None = None) -> str:
    """The assistant side of one exchange, for building fine-tuning data."""
    return f" {answer.strip()} " + (eos_token or "")
