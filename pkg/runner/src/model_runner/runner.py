"""The three generation procedures.

generate_completions
    One sampled continuation per (item, template, sample) cell — the full
    grid, in file order, at the job's temperature. Seeded, so the same job
    writes byte-identical files across runs.

generate_predictions
    One greedy answer per item under the job's run_id, prompted with the
    chat format from prompts.py.

export_logits_pairs
    Per item: encode the item's best cloze template, take the fine-tuned
    model's logits at the first generated position, keep the top_k token
    ids (ties broken by ascending id), and record the pre-update model's
    logits at those same ids. A greedy probe of the fine-tuned model is
    decoded alongside so each record carries the character offset at which
    the item's object first appears (-1 when it does not), letting
    downstream analysis filter on answer position.

All outputs are JSON lines matching the analysis toolkit's readers, written
atomically. The runner never analyses what it writes.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import torch

from .engine import ModelHandle, map_in_batches, top_k_by_logit
from .errors import TemplateError, VocabMismatchError
from .io import (
    KnowledgeItem,
    TemplatePack,
    read_best_templates,
    read_items,
    read_template_pack,
    write_jsonl_atomic,
)
from .jobs import RunnerJob
from .prompts import question_body


@dataclass(frozen=True)
class CompletionSummary:
    out_path: str
    n_records: int
    n_items: int
    n_templates: int
    n_samples: int
    max_generated_tokens: int

    def to_json_dict(self) -> dict:
        return {
            "out_path": self.out_path,
            "n_records": self.n_records,
            "n_items": self.n_items,
            "n_templates": self.n_templates,
            "n_samples": self.n_samples,
            "max_generated_tokens": self.max_generated_tokens,
        }


@dataclass(frozen=True)
class PredictionSummary:
    out_path: str
    n_records: int
    run_id: str
    max_generated_tokens: int

    def to_json_dict(self) -> dict:
        return {
            "out_path": self.out_path,
            "n_records": self.n_records,
            "run_id": self.run_id,
            "max_generated_tokens": self.max_generated_tokens,
        }


@dataclass(frozen=True)
class LogitsSummary:
    out_path: str
    n_records: int
    top_k: int
    shared_model: bool

    def to_json_dict(self) -> dict:
        return {
            "out_path": self.out_path,
            "n_records": self.n_records,
            "top_k": self.top_k,
            "shared_model": self.shared_model,
        }


def _check_topics(items: list[KnowledgeItem], pack: TemplatePack) -> None:
    for item in items:
        if item.topic != pack.topic:
            raise TemplateError(
                f"template pack covers topic {pack.topic!r} but item "
                f"{item.id!r} has topic {item.topic!r}"
            )


def generate_completions(job: RunnerJob) -> CompletionSummary:
    """Sample the full (item x template x sample) grid into a completion log."""
    job.require("model_path", "template_path")
    items = read_items(job.items_path)
    pack = read_template_pack(job.template_path)
    _check_topics(items, pack)
    handle = ModelHandle.load(job.model_path, job.device)

    rows: list[tuple[str, int, int]] = []
    prompts: list[list[int]] = []
    for item in items:
        for template_id in range(len(pack.mappings)):
            ids = handle.encode_prompt(pack.completion_prompt(template_id, item.subject))
            for sample_id in range(job.n_samples):
                rows.append((item.id, template_id, sample_id))
                prompts.append(ids)

    torch.manual_seed(job.seed)
    generated = map_in_batches(
        prompts,
        job.batch_size,
        lambda chunk: handle.sample(chunk, job.sample_max_new_tokens, job.temperature),
    )
    records = [
        {
            "item_id": item_id,
            "template_id": template_id,
            "sample_id": sample_id,
            "completion": gen.text,
        }
        for (item_id, template_id, sample_id), gen in zip(rows, generated)
    ]
    n = write_jsonl_atomic(job.out_path, records)
    return CompletionSummary(
        out_path=os.fspath(job.out_path),
        n_records=n,
        n_items=len(items),
        n_templates=len(pack.mappings),
        n_samples=job.n_samples,
        max_generated_tokens=max((g.n_tokens for g in generated), default=0),
    )


def generate_predictions(job: RunnerJob) -> PredictionSummary:
    """Greedy-decode one answer per item using the chat question format."""
    job.require("model_path", "template_path")
    items = read_items(job.items_path)
    pack = read_template_pack(job.template_path)
    _check_topics(items, pack)
    handle = ModelHandle.load(job.model_path, job.device)

    prompts = [
        handle.encode_prompt(question_body(pack.question(item.subject))) for item in items
    ]
    generated = map_in_batches(
        prompts,
        job.batch_size,
        lambda chunk: handle.greedy(chunk, job.greedy_max_new_tokens),
    )
    records = [
        {"item_id": item.id, "prediction": gen.text, "run_id": job.run_id}
        for item, gen in zip(items, generated)
    ]
    n = write_jsonl_atomic(job.out_path, records)
    return PredictionSummary(
        out_path=os.fspath(job.out_path),
        n_records=n,
        run_id=job.run_id,
        max_generated_tokens=max((g.n_tokens for g in generated), default=0),
    )


def _answer_offset(completion: str, answer: str) -> int:
    """Case-insensitive character offset of the answer in the completion."""
    needle = answer.strip().lower()
    if not needle:
        return -1
    return completion.lower().find(needle)


def export_logits_pairs(job: RunnerJob) -> LogitsSummary:
    """Record both models' first-token logits over the fine-tuned top_k set."""
    job.require("ft_model_path", "pre_model_path", "template_path", "best_templates_path")
    items = read_items(job.items_path)
    pack = read_template_pack(job.template_path)
    _check_topics(items, pack)
    best = read_best_templates(job.best_templates_path)
    for item in items:
        if item.topic not in best:
            raise TemplateError(
                f"best-template map has no entry for topic {item.topic!r} "
                f"(item {item.id!r})"
            )
        if not 0 <= best[item.topic] < len(pack.mappings):
            raise TemplateError(
                f"best template {best[item.topic]} for topic {item.topic!r} is "
                f"outside the pack's {len(pack.mappings)} mappings"
            )

    ft = ModelHandle.load(job.ft_model_path, job.device)
    shared = os.path.realpath(job.ft_model_path) == os.path.realpath(job.pre_model_path)
    pt = ft if shared else ModelHandle.load(job.pre_model_path, job.device)
    _check_vocab(ft, pt)

    prompts = [
        ft.encode_prompt(pack.completion_prompt(best[item.topic], item.subject))
        for item in items
    ]
    ft_rows = map_in_batches(prompts, job.batch_size, lambda c: list(ft.next_token_logits(c)))
    pt_rows = (
        ft_rows
        if pt is ft
        else map_in_batches(prompts, job.batch_size, lambda c: list(pt.next_token_logits(c)))
    )
    probes = map_in_batches(
        prompts, job.batch_size, lambda c: ft.greedy(c, job.greedy_max_new_tokens)
    )

    records = []
    for item, ids, ft_row, pt_row, probe in zip(items, prompts, ft_rows, pt_rows, probes):
        order = top_k_by_logit(ft_row, job.top_k)
        records.append(
            {
                "example_id": item.id,
                "token_ids": [int(t) for t in order],
                "ft_logits": [float(ft_row[t]) for t in order],
                "pt_logits": [float(pt_row[t]) for t in order],
                "meta": {
                    "topic": item.topic,
                    "template_id": best[item.topic],
                    "first_token_position": len(ids),
                    "answer_char_offset": _answer_offset(probe.text, item.object),
                },
            }
        )
    n = write_jsonl_atomic(job.out_path, records)
    return LogitsSummary(
        out_path=os.fspath(job.out_path),
        n_records=n,
        top_k=job.top_k,
        shared_model=shared,
    )


def _check_vocab(ft: ModelHandle, pt: ModelHandle) -> None:
    if ft.vocab_size != pt.vocab_size:
        raise VocabMismatchError(
            f"model vocabularies differ: {ft.vocab_size} vs {pt.vocab_size}"
        )
    if ft is not pt and ft.tokenizer.get_vocab() != pt.tokenizer.get_vocab():
        raise VocabMismatchError("models use different tokenizers")
