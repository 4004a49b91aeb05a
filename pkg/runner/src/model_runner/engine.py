"""Model loading and batched generation.

A ModelHandle wraps one (tokenizer, causal LM) pair. Prompts are encoded
to token ids with an explicit bos prefix (when the tokenizer defines one),
left-padded into fixed batches, and run under no_grad on a single device.
Decoded completions strip special tokens; the per-row token count reported
alongside each text counts only the non-special generated tokens, so it is
exactly what the decoded text contains.

map_in_batches drives any per-chunk function over a row list in order,
halving the chunk size on out-of-memory errors and failing only when a
single row still does not fit.
"""

from __future__ import annotations

import os
from typing import Callable, NamedTuple, Sequence, TypeVar

import numpy as np
import torch

from .errors import GenerationError, JobError, ModelLoadError

T = TypeVar("T")
R = TypeVar("R")


class Generated(NamedTuple):
    text: str
    n_tokens: int


def _is_oom(exc: BaseException) -> bool:
    if isinstance(exc, (MemoryError, torch.cuda.OutOfMemoryError)):
        return True
    return isinstance(exc, RuntimeError) and "out of memory" in str(exc).lower()


def map_in_batches(
    rows: Sequence[T], batch_size: int, fn: Callable[[list[T]], list[R]]
) -> list[R]:
    """Apply fn to chunks of rows in order; halve the chunk on OOM."""
    out: list[R] = []
    i = 0
    size = max(1, batch_size)
    while i < len(rows):
        chunk = list(rows[i : i + size])
        try:
            results = fn(chunk)
        except Exception as exc:
            if _is_oom(exc):
                if size == 1:
                    raise GenerationError(
                        "generation ran out of memory even at batch size 1"
                    ) from exc
                size = max(1, size // 2)
                continue
            raise
        if len(results) != len(chunk):
            raise GenerationError(
                f"batch function returned {len(results)} results for {len(chunk)} rows"
            )
        out.extend(results)
        i += len(chunk)
    return out


def top_k_by_logit(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest logits; equal values break by ascending index."""
    n = int(logits.shape[0])
    if k > n:
        raise JobError(f"top_k {k} exceeds vocabulary size {n}")
    order = np.lexsort((np.arange(n), -logits))
    return order[:k]


class ModelHandle:
    """One loaded causal LM plus its tokenizer, pinned to a device."""

    def __init__(self, path: str, tokenizer, model, device: str) -> None:
        self.path = path
        self.tokenizer = tokenizer
        self.model = model
        self.device = device
        pad = tokenizer.pad_token_id
        if pad is None:
            pad = tokenizer.eos_token_id
        self.pad_id = 0 if pad is None else int(pad)
        self._special_ids = frozenset(int(i) for i in tokenizer.all_special_ids)

    @classmethod
    def load(cls, path: str | os.PathLike, device: str = "cpu") -> "ModelHandle":
        path = os.fspath(path)
        if not os.path.isdir(path):
            raise ModelLoadError(f"model path is not a directory: {path}")
        from transformers import AutoModelForCausalLM, AutoTokenizer
        from transformers.utils import logging as hf_logging

        hf_logging.disable_progress_bar()
        try:
            tokenizer = AutoTokenizer.from_pretrained(path)
            model = AutoModelForCausalLM.from_pretrained(path)
        except Exception as exc:
            raise ModelLoadError(f"failed to load model from {path}: {exc}") from exc
        model.to(device)
        model.eval()
        return cls(path, tokenizer, model, device)

    @property
    def vocab_size(self) -> int:
        return int(self.model.config.vocab_size)

    def encode_prompt(self, text: str) -> list[int]:
        """Token ids for a prompt, with the tokenizer's bos prepended."""
        ids = self.tokenizer(text, add_special_tokens=False)["input_ids"]
        bos = self.tokenizer.bos_token_id
        return ([int(bos)] if bos is not None else []) + [int(i) for i in ids]

    def _pad_batch(self, prompt_ids: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor]:
        width = max(len(p) for p in prompt_ids)
        input_ids = torch.full((len(prompt_ids), width), self.pad_id, dtype=torch.long)
        mask = torch.zeros((len(prompt_ids), width), dtype=torch.long)
        for row, ids in enumerate(prompt_ids):
            if not ids:
                raise GenerationError("cannot generate from an empty prompt")
            input_ids[row, width - len(ids) :] = torch.tensor(ids, dtype=torch.long)
            mask[row, width - len(ids) :] = 1
        return input_ids.to(self.device), mask.to(self.device)

    def _generate(
        self, prompt_ids: Sequence[Sequence[int]], max_new: int, **decode_kwargs
    ) -> list[Generated]:
        if not prompt_ids:
            return []
        input_ids, mask = self._pad_batch(prompt_ids)
        with torch.no_grad():
            out = self.model.generate(
                input_ids=input_ids,
                attention_mask=mask,
                max_new_tokens=max_new,
                pad_token_id=self.pad_id,
                **decode_kwargs,
            )
        generated = out[:, input_ids.shape[1] :]
        results = []
        for row in generated.tolist():
            kept = [t for t in row if t not in self._special_ids]
            text = self.tokenizer.decode(row, skip_special_tokens=True)
            results.append(Generated(text=text, n_tokens=len(kept)))
        return results

    def sample(
        self, prompt_ids: Sequence[Sequence[int]], max_new: int, temperature: float
    ) -> list[Generated]:
        """One stochastic completion per prompt at the given temperature."""
        return self._generate(
            prompt_ids,
            max_new,
            do_sample=True,
            temperature=float(temperature),
            top_k=0,
            top_p=1.0,
        )

    def greedy(self, prompt_ids: Sequence[Sequence[int]], max_new: int) -> list[Generated]:
        """One deterministic argmax completion per prompt."""
        return self._generate(prompt_ids, max_new, do_sample=False)

    def next_token_logits(self, prompt_ids: Sequence[Sequence[int]]) -> np.ndarray:
        """Logits over the vocabulary at each prompt's first generated position."""
        if not prompt_ids:
            return np.zeros((0, self.vocab_size), dtype=np.float32)
        input_ids, mask = self._pad_batch(prompt_ids)
        with torch.no_grad():
            logits = self.model(input_ids=input_ids, attention_mask=mask).logits
        arr = logits[:, -1, :].float().cpu().numpy()
        if not np.isfinite(arr).all():
            raise GenerationError("model produced non-finite logits")
        return arr
