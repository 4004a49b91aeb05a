"""Shared fixtures: tiny offline causal LMs, a small knowledge corpus, and
subprocess helpers that drive both CLIs.

The models are built locally (random weights over a byte-level tokenizer
with no merges) so every test runs without network access. Byte-level
tokenization guarantees any prompt text is encodable and the vocabulary
stays tiny (259 entries, ~130 K parameters per model).
"""

from __future__ import annotations

import json
import subprocess
import sys

import pytest

TOPIC = "capital-of"

PACK = {
    "topic": TOPIC,
    "question_template": "What is the capital of {subject}?",
    "mappings": [
        "The capital of {subject} is",
        "{subject} has its capital at",
        "People of {subject} built the city of",
    ],
    "domain": "geography",
}


def _build_model(path, *, seed: int, extra_tokens: tuple[str, ...] = ()) -> str:
    import torch
    from tokenizers import Tokenizer, decoders, models, pre_tokenizers
    from transformers import LlamaConfig, LlamaForCausalLM, PreTrainedTokenizerFast

    alphabet = sorted(pre_tokenizers.ByteLevel.alphabet())
    vocab = {ch: i for i, ch in enumerate(alphabet)}
    for token in ("<s>", "</s>", "<pad>", *extra_tokens):
        vocab[token] = len(vocab)
    raw = Tokenizer(models.BPE(vocab=vocab, merges=[]))
    raw.pre_tokenizer = pre_tokenizers.ByteLevel(add_prefix_space=False)
    raw.decoder = decoders.ByteLevel()
    tokenizer = PreTrainedTokenizerFast(
        tokenizer_object=raw, bos_token="<s>", eos_token="</s>", pad_token="<pad>"
    )
    torch.manual_seed(seed)
    config = LlamaConfig(
        vocab_size=len(tokenizer),
        hidden_size=64,
        intermediate_size=172,
        num_hidden_layers=2,
        num_attention_heads=4,
        num_key_value_heads=4,
        max_position_embeddings=512,
        bos_token_id=tokenizer.bos_token_id,
        eos_token_id=tokenizer.eos_token_id,
        pad_token_id=tokenizer.pad_token_id,
        tie_word_embeddings=False,
    )
    model = LlamaForCausalLM(config)
    model.save_pretrained(path)
    tokenizer.save_pretrained(path)
    return str(path)


@pytest.fixture(scope="session")
def tiny_model(tmp_path_factory):
    return _build_model(tmp_path_factory.mktemp("model-a"), seed=1234)


@pytest.fixture(scope="session")
def tiny_model_alt(tmp_path_factory):
    """Same vocabulary, different weights — a stand-in fine-tuned model."""
    return _build_model(tmp_path_factory.mktemp("model-b"), seed=999)


@pytest.fixture(scope="session")
def tiny_model_other_vocab(tmp_path_factory):
    """One extra vocabulary entry, for mismatch detection."""
    return _build_model(tmp_path_factory.mktemp("model-v"), seed=1234, extra_tokens=("<extra>",))


def _write_items(path, n: int, topic: str = TOPIC) -> str:
    splits = ("train", "test", "test_ood")
    rows = [
        {
            "id": f"it{i}",
            "topic": topic,
            "subject": f"Elbonia-{i}",
            "object": f"Metro {i}",
            "split": splits[i % 3],
        }
        for i in range(n)
    ]
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return str(path)


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """items/pack/best-template files for a 10-item, 3-template topic."""
    root = tmp_path_factory.mktemp("corpus")
    pack = root / "pack.json"
    pack.write_text(json.dumps(PACK), encoding="utf-8")
    best = root / "best.json"
    best.write_text(json.dumps({"best_template": {TOPIC: 1}}), encoding="utf-8")
    return {
        "items": _write_items(root / "items.jsonl", 10),
        "pack": str(pack),
        "best": str(best),
    }


@pytest.fixture
def write_items(tmp_path):
    def _write(n: int, topic: str = TOPIC, name: str = "items.jsonl") -> str:
        return _write_items(tmp_path / name, n, topic)

    return _write


@pytest.fixture
def write_pack(tmp_path):
    def _write(doc=None, name: str = "pack.json") -> str:
        path = tmp_path / name
        path.write_text(json.dumps(PACK if doc is None else doc), encoding="utf-8")
        return str(path)

    return _write


def _run_module(module: str, args) -> tuple[int, str, str]:
    proc = subprocess.run(
        [sys.executable, "-m", module, *args],
        capture_output=True,
        text=True,
        timeout=300,
    )
    return proc.returncode, proc.stdout, proc.stderr


@pytest.fixture(scope="session")
def ftscope_cli():
    """Run the analysis CLI as a subprocess: (rc, stdout, stderr)."""

    def run(*args: str) -> tuple[int, str, str]:
        return _run_module("ftscope.cli", args)

    return run


@pytest.fixture(scope="session")
def runner_cli():
    """Run this package's CLI as a subprocess: (rc, stdout, stderr)."""

    def run(*args: str) -> tuple[int, str, str]:
        return _run_module("model_runner.cli", args)

    return run


def pytest_terminal_summary(terminalreporter):
    reports = []
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            if "test_runner_smoke" in rep.nodeid and getattr(rep, "when", "call") == "call":
                reports.append(rep)
    if not reports:
        return
    terminalreporter.write_line("")
    terminalreporter.write_line("runner end-to-end smoke:")
    for rep in sorted(reports, key=lambda r: r.nodeid):
        mark = "PASS" if rep.passed else "FAIL"
        name = rep.nodeid.split("::")[-1]
        terminalreporter.write_line(f"  [{mark}] {name}")
