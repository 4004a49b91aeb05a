"""Knowledge-mastery scoring from sampled completion logs.

Each knowledge item (a subject/object fact) is probed with N_map paraphrase
templates x N_sample sampled completions. The mastery ratio is
R = hits / (N_map * N_sample), where a hit means some alias of the object
appears in the completion (case-insensitive, whitespace-collapsed substring
by default). Items are then assigned to five buckets: R == 0 -> bucket 0,
otherwise the smallest i in {1..4} with R <= i/4.

Grids must be complete: a missing (template, sample) cell is an error, never
a silently smaller denominator.
"""

from __future__ import annotations

import json
import math
import os
import re
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, Mapping, Sequence

from .errors import ConfigError, MissingTrialsError, NoDataError, SchemaError

N_MAP_DEFAULT = 21
N_SAMPLE_DEFAULT = 10
SPLITS = ("train", "test", "test_ood")
N_BUCKETS = 5

_WHITESPACE = re.compile(r"\s+")


# ---------------------------------------------------------------------------
# matching
# ---------------------------------------------------------------------------


def normalize_text(text: str, case_sensitive: bool = False) -> str:
    collapsed = _WHITESPACE.sub(" ", text).strip()
    return collapsed if case_sensitive else collapsed.lower()


def match_answer(
    completion: str, aliases: Iterable[str], case_sensitive: bool = False
) -> bool:
    """True iff any normalized alias occurs as a substring of the completion."""
    text = normalize_text(completion, case_sensitive)
    for alias in aliases:
        needle = normalize_text(alias, case_sensitive)
        if needle and needle in text:
            return True
    return False


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KnowledgeItem:
    id: str
    topic: str
    subject: str
    object: str
    aliases: frozenset[str]
    split: str


@dataclass(frozen=True)
class CompletionRecord:
    item_id: str
    template_id: int
    sample_id: int
    completion: str


@dataclass(frozen=True)
class ItemMastery:
    ratio: float
    bucket: int
    n_trials: int
    hits: int


@dataclass(frozen=True)
class MasteryReport:
    per_item: dict[str, ItemMastery]
    bucket_counts: tuple[int, int, int, int, int]

    def to_json_dict(self) -> dict:
        return {
            "per_item": {
                item_id: {
                    "R": m.ratio,
                    "bucket": m.bucket,
                    "n_trials": m.n_trials,
                    "hits": m.hits,
                }
                for item_id, m in sorted(self.per_item.items())
            },
            "bucket_counts": list(self.bucket_counts),
        }


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
# scoring
# ---------------------------------------------------------------------------


def assign_bucket(ratio: float) -> int:
    """0 iff ratio == 0, else the smallest i in 1..4 with ratio <= i/4."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"mastery ratio must be in [0, 1], got {ratio}")
    if ratio == 0.0:
        return 0
    return min(math.ceil(ratio * 4.0), 4)


def mastery_ratio(
    trials: Mapping[tuple[int, int], str],
    aliases: Iterable[str],
    n_map: int = N_MAP_DEFAULT,
    n_sample: int = N_SAMPLE_DEFAULT,
    case_sensitive: bool = False,
    item_id: str = "<item>",
) -> tuple[float, int]:
    """(hits / (n_map * n_sample), hits) over a complete trial grid."""
    missing = [
        (t, s)
        for t in range(n_map)
        for s in range(n_sample)
        if (t, s) not in trials
    ]
    if missing:
        raise MissingTrialsError(item_id, missing)
    alias_list = list(aliases)
    hits = sum(
        1
        for t in range(n_map)
        for s in range(n_sample)
        if match_answer(trials[(t, s)], alias_list, case_sensitive)
    )
    return hits / (n_map * n_sample), hits


def score_items(
    items: Sequence[KnowledgeItem],
    log: Mapping[str, Mapping[tuple[int, int], str]],
    n_map: int = N_MAP_DEFAULT,
    n_sample: int = N_SAMPLE_DEFAULT,
    case_sensitive: bool = False,
) -> MasteryReport:
    """Mastery ratio and bucket for every item; bucket counts across all."""
    per_item: dict[str, ItemMastery] = {}
    counts = [0] * N_BUCKETS
    for item in sorted(items, key=lambda it: it.id):
        trials = log.get(item.id, {})
        ratio, hits = mastery_ratio(
            trials, item.aliases, n_map, n_sample, case_sensitive, item_id=item.id
        )
        bucket = assign_bucket(ratio)
        per_item[item.id] = ItemMastery(ratio, bucket, n_map * n_sample, hits)
        counts[bucket] += 1
    return MasteryReport(per_item, tuple(counts))


def split_dataset(
    items: Sequence[KnowledgeItem],
    log: Mapping[str, Mapping[tuple[int, int], str]],
    n_map: int = N_MAP_DEFAULT,
    n_sample: int = N_SAMPLE_DEFAULT,
    case_sensitive: bool = False,
) -> tuple[MasteryReport, dict[str, list[list[str]]]]:
    """Bucket every item and emit per-split, per-bucket item-id lists."""
    report = score_items(items, log, n_map, n_sample, case_sensitive)
    split_buckets: dict[str, list[list[str]]] = {
        split: [[] for _ in range(N_BUCKETS)] for split in SPLITS
    }
    for item in sorted(items, key=lambda it: it.id):
        bucket = report.per_item[item.id].bucket
        split_buckets[item.split][bucket].append(item.id)
    return report, split_buckets


def best_template(
    log: Mapping[str, Mapping[tuple[int, int], str]],
    items: Sequence[KnowledgeItem],
    n_map: int = N_MAP_DEFAULT,
    n_sample: int = N_SAMPLE_DEFAULT,
    case_sensitive: bool = False,
) -> int:
    """Template id with the highest success rate over items x samples.

    Ties break toward the lowest template id.
    """
    if not items:
        raise NoDataError("best_template requires at least one item")
    hits_per_template = [0] * n_map
    for item in items:
        trials = log.get(item.id, {})
        missing = [
            (t, s)
            for t in range(n_map)
            for s in range(n_sample)
            if (t, s) not in trials
        ]
        if missing:
            raise MissingTrialsError(item.id, missing)
        for t in range(n_map):
            for s in range(n_sample):
                if match_answer(trials[(t, s)], item.aliases, case_sensitive):
                    hits_per_template[t] += 1
    return max(range(n_map), key=lambda t: (hits_per_template[t], -t))


def filter_high_success(report: MasteryReport, threshold: float) -> set[str]:
    """Items whose mastery ratio strictly exceeds the threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError(f"threshold must be in [0, 1], got {threshold}")
    return {item_id for item_id, m in report.per_item.items() if m.ratio > threshold}


# ---------------------------------------------------------------------------
# file loading
# ---------------------------------------------------------------------------


def _read_jsonl(path: str | os.PathLike):
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


def _require_int(obj: dict, key: str, where: str) -> int:
    value = obj.get(key)
    if not isinstance(value, int) or isinstance(value, bool):
        raise SchemaError(f"{where}: field {key!r} must be an integer")
    return value


def load_synonyms(path: str | os.PathLike | None = None) -> dict[str, tuple[str, ...]]:
    """Canonical object -> alias tuple; the bundled table is the default."""
    if path is None:
        raw = resources.files("ftscope.data").joinpath("synonyms.json").read_text("utf-8")
        doc = json.loads(raw)
        where = "<bundled synonyms>"
    else:
        path = os.fspath(path)
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
        where = path
    if not isinstance(doc, dict):
        raise SchemaError(f"{where}: synonym table must be a JSON object")
    table: dict[str, tuple[str, ...]] = {}
    for key, aliases in doc.items():
        if not isinstance(aliases, list) or not all(isinstance(a, str) for a in aliases):
            raise SchemaError(f"{where}: aliases for {key!r} must be a list of strings")
        table[key] = tuple(aliases)
    return table


def expand_aliases(obj: str, synonyms: Mapping[str, Sequence[str]]) -> frozenset[str]:
    return frozenset({obj, *synonyms.get(obj, ())})


def load_items(
    path: str | os.PathLike, synonyms: Mapping[str, Sequence[str]] | None = None
) -> list[KnowledgeItem]:
    """Load knowledge items, expanding each object through the synonym table."""
    synonyms = load_synonyms() if synonyms is None else synonyms
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
        answer = _require_str(obj, "object", where)
        items.append(
            KnowledgeItem(
                id=item_id,
                topic=_require_str(obj, "topic", where),
                subject=_require_str(obj, "subject", where),
                object=answer,
                aliases=expand_aliases(answer, synonyms),
                split=split,
            )
        )
    return items


def load_completions(
    path: str | os.PathLike,
    n_map: int = N_MAP_DEFAULT,
    n_sample: int = N_SAMPLE_DEFAULT,
) -> dict[str, dict[tuple[int, int], str]]:
    """item_id -> {(template_id, sample_id) -> completion}, duplicates rejected."""
    log: dict[str, dict[tuple[int, int], str]] = {}
    for where, obj in _read_jsonl(path):
        item_id = _require_str(obj, "item_id", where)
        template_id = _require_int(obj, "template_id", where)
        sample_id = _require_int(obj, "sample_id", where)
        completion = _require_str(obj, "completion", where)
        if not 0 <= template_id < n_map:
            raise SchemaError(
                f"{where}: template_id {template_id} outside [0, {n_map})"
            )
        if not 0 <= sample_id < n_sample:
            raise SchemaError(f"{where}: sample_id {sample_id} outside [0, {n_sample})")
        cell = (template_id, sample_id)
        trials = log.setdefault(item_id, {})
        if cell in trials:
            raise SchemaError(
                f"{where}: duplicate trial {cell} for item {item_id!r}"
            )
        trials[cell] = completion
    return log


def load_template_pack(path: str | os.PathLike) -> TemplatePack:
    path = os.fspath(path)
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    return _parse_template_pack(doc, path)


def _parse_template_pack(doc, where: str) -> TemplatePack:
    if not isinstance(doc, dict):
        raise SchemaError(f"{where}: template pack must be a JSON object")
    topic = doc.get("topic")
    question = doc.get("question_template")
    mappings = doc.get("mappings")
    if not isinstance(topic, str) or not isinstance(question, str):
        raise SchemaError(f"{where}: topic and question_template must be strings")
    if not isinstance(mappings, list) or not mappings or not all(
        isinstance(m, str) for m in mappings
    ):
        raise SchemaError(f"{where}: mappings must be a non-empty list of strings")
    for text in [question, *mappings]:
        if "{subject}" not in text:
            raise SchemaError(f"{where}: template missing {{subject}} placeholder: {text!r}")
    return TemplatePack(
        topic=topic,
        question_template=question,
        mappings=tuple(mappings),
        domain=doc.get("domain", ""),
    )


def list_builtin_topics() -> list[str]:
    base = resources.files("ftscope.data").joinpath("templates")
    return sorted(entry.name[: -len(".json")] for entry in base.iterdir() if entry.name.endswith(".json"))


def builtin_template_pack(topic: str) -> TemplatePack:
    base = resources.files("ftscope.data").joinpath("templates")
    entry = base.joinpath(f"{topic}.json")
    try:
        raw = entry.read_text("utf-8")
    except FileNotFoundError:
        raise ConfigError(
            f"no bundled template pack for topic {topic!r}; "
            f"available: {', '.join(list_builtin_topics())}"
        ) from None
    return _parse_template_pack(json.loads(raw), f"<bundled {topic}>")
