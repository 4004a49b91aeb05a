"""File formats the runner reads and writes.

Inputs:
  - knowledge items: JSON lines with id/topic/subject/object/split
  - template pack: one JSON object with a question template and N cloze
    mappings, all containing a {subject} placeholder
  - best-template map: JSON mapping topic -> template id (either bare or
    wrapped under a "best_template" key, as the analysis CLI emits it)

Output files are JSON lines written atomically (temp file + rename) so a
crashed run never leaves a half-written artifact behind.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping

from .errors import SchemaError

SPLITS = ("train", "test", "test_ood")


@dataclass(frozen=True)
class KnowledgeItem:
    id: str
    topic: str
    subject: str
    object: str
    split: str


@dataclass(frozen=True)
class TemplatePack:
    topic: str
    question_template: str
    mappings: tuple[str, ...]
    domain: str = ""

    def completion_prompt(self, template_id: int, subject: str) -> str:
        return self.mappings[template_id].replace("{subject}", subject)

    def question(self, subject: str) -> str:
        return self.question_template.replace("{subject}", subject)


# ---------------------------------------------------------------------------
# parsing helpers
# ---------------------------------------------------------------------------


def _read_jsonl(path: str | os.PathLike) -> Iterator[tuple[str, dict]]:
    path = os.fspath(path)
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{path}:{line_no}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{where}: invalid JSON: {exc}") from exc
            if not isinstance(obj, dict):
                raise SchemaError(f"{where}: expected a JSON object")
            yield where, obj


def _require_str(obj: dict, key: str, where: str) -> str:
    value = obj.get(key)
    if not isinstance(value, str):
        raise SchemaError(f"{where}: field {key!r} must be a string")
    return value


# ---------------------------------------------------------------------------
# readers
# ---------------------------------------------------------------------------


def read_items(path: str | os.PathLike) -> list[KnowledgeItem]:
    """Load knowledge items, rejecting duplicates and unknown splits."""
    items: list[KnowledgeItem] = []
    seen: set[str] = set()
    for where, obj in _read_jsonl(path):
        item_id = _require_str(obj, "id", where)
        split = _require_str(obj, "split", where)
        if split not in SPLITS:
            raise SchemaError(f"{where}: split must be one of {SPLITS}, got {split!r}")
        if item_id in seen:
            raise SchemaError(f"{where}: duplicate item id {item_id!r}")
        seen.add(item_id)
        items.append(
            KnowledgeItem(
                id=item_id,
                topic=_require_str(obj, "topic", where),
                subject=_require_str(obj, "subject", where),
                object=_require_str(obj, "object", where),
                split=split,
            )
        )
    if not items:
        raise SchemaError(f"{os.fspath(path)}: no items")
    return items


def read_template_pack(path: str | os.PathLike) -> TemplatePack:
    path = os.fspath(path)
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: template pack must be a JSON object")
    topic = doc.get("topic")
    question = doc.get("question_template")
    mappings = doc.get("mappings")
    if not isinstance(topic, str) or not isinstance(question, str):
        raise SchemaError(f"{path}: topic and question_template must be strings")
    if not isinstance(mappings, list) or not mappings or not all(
        isinstance(m, str) for m in mappings
    ):
        raise SchemaError(f"{path}: mappings must be a non-empty list of strings")
    for text in [question, *mappings]:
        if "{subject}" not in text:
            raise SchemaError(f"{path}: template missing {{subject}} placeholder: {text!r}")
    return TemplatePack(
        topic=topic,
        question_template=question,
        mappings=tuple(mappings),
        domain=doc.get("domain", ""),
    )


def read_best_templates(path: str | os.PathLike) -> dict[str, int]:
    """topic -> template id, accepting the analysis CLI's best-template JSON."""
    path = os.fspath(path)
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON: {exc}") from exc
    if isinstance(doc, dict) and isinstance(doc.get("best_template"), dict):
        doc = doc["best_template"]
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: best-template map must be a JSON object")
    table: dict[str, int] = {}
    for topic, template_id in doc.items():
        if not isinstance(template_id, int) or isinstance(template_id, bool) or template_id < 0:
            raise SchemaError(
                f"{path}: template id for topic {topic!r} must be a non-negative "
                f"integer, got {template_id!r}"
            )
        table[topic] = template_id
    if not table:
        raise SchemaError(f"{path}: best-template map is empty")
    return table


# ---------------------------------------------------------------------------
# writer
# ---------------------------------------------------------------------------


def write_jsonl_atomic(path: str | os.PathLike, records: Iterable[Mapping]) -> int:
    """Write one JSON object per line via a temp file + rename; returns count."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=os.path.basename(path) + ".", suffix=".tmp")
    n = 0
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            for record in records:
                f.write(json.dumps(dict(record), ensure_ascii=False))
                f.write("\n")
                n += 1
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return n
