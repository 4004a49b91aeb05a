"""First-token distribution shift between two models over a shared top-10 set.

Each record carries the fine-tuned model's top-K first-token ids (K >= 10,
descending by fine-tuned logit) with both models' logits at those ids.
Records are truncated to the top 10, both logit vectors pass through a
max-subtracted softmax, and the shift is the KL divergence
    -sum_i p_i * log(p'_i / p_i)
where p is the fine-tuned distribution and p' the pre-update one.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import NoDataError, SchemaError

TOP_K = 10


@dataclass(frozen=True)
class LogitsPairRecord:
    example_id: str
    token_ids: tuple[int, ...]
    ft_logits: tuple[float, ...]
    pt_logits: tuple[float, ...]
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class KlReport:
    n_records: int
    mean_kl: float
    std_kl: float
    per_group: dict[str, tuple[int, float, float]]
    aggregation: str = "unweighted_mean_over_records"

    def to_json_dict(self) -> dict:
        return {
            "n_records": self.n_records,
            "mean_kl": self.mean_kl,
            "std_kl": self.std_kl,
            "per_group": {
                g: {"n": n, "mean_kl": m, "std_kl": s}
                for g, (n, m, s) in sorted(self.per_group.items())
            },
            "aggregation": self.aggregation,
        }

    def to_csv(self) -> str:
        lines = ["Group,N,MeanKL,StdKL"]
        lines.append(f"(all),{self.n_records},{self.mean_kl:.12g},{self.std_kl:.12g}")
        for g, (n, m, s) in sorted(self.per_group.items()):
            lines.append(f"{g},{n},{m:.12g},{s:.12g}")
        return "\n".join(lines) + "\n"


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def renormalize(
    ft_logits: Sequence[float], pt_logits: Sequence[float]
) -> tuple[np.ndarray, np.ndarray]:
    """Softmax both top-10 logit vectors (max-subtracted for stability)."""
    ft = np.asarray(ft_logits, dtype=np.float64)
    pt = np.asarray(pt_logits, dtype=np.float64)
    if ft.shape != (TOP_K,) or pt.shape != (TOP_K,):
        raise SchemaError(
            f"renormalize expects exactly {TOP_K} logits per model, "
            f"got {ft.shape[0] if ft.ndim == 1 else ft.shape} and "
            f"{pt.shape[0] if pt.ndim == 1 else pt.shape}"
        )
    if not np.isfinite(ft).all() or not np.isfinite(pt).all():
        raise SchemaError("logits must be finite")
    return _softmax(ft), _softmax(pt)


def kl(p: Sequence[float], p_prime: Sequence[float]) -> float:
    """-sum p_i log(p'_i / p_i); terms with p_i == 0 contribute nothing."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(p_prime, dtype=np.float64)
    if p.shape != q.shape:
        raise SchemaError("distributions must have equal length")
    if abs(p.sum() - 1.0) > 1e-9 or abs(q.sum() - 1.0) > 1e-9:
        raise SchemaError("distributions must each sum to 1 within 1e-9")
    support = p > 0.0
    with np.errstate(divide="ignore"):
        terms = p[support] * np.log(q[support] / p[support])
    return float(-terms.sum())


def record_kl(record: LogitsPairRecord) -> float:
    """KL of one record after truncation to its fine-tuned top 10."""
    p, q = renormalize(record.ft_logits[:TOP_K], record.pt_logits[:TOP_K])
    return kl(p, q)


class _Welford:
    """Single-pass mean/variance accumulation, numerically stable."""

    __slots__ = ("n", "mean", "m2")

    def __init__(self) -> None:
        self.n = 0
        self.mean = 0.0
        self.m2 = 0.0

    def add(self, x: float) -> None:
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    @property
    def std(self) -> float:
        return math.sqrt(self.m2 / self.n) if self.n else 0.0


def aggregate_kl(
    records: Iterable[LogitsPairRecord], group_by: str = "topic"
) -> KlReport:
    """Mean/std of per-record KL, globally and per meta[group_by]."""
    total = _Welford()
    groups: dict[str, _Welford] = {}
    for record in records:
        value = record_kl(record)
        total.add(value)
        key = record.meta.get(group_by)
        if key is not None:
            groups.setdefault(str(key), _Welford()).add(value)
    if total.n == 0:
        raise NoDataError("no logits-pair records to aggregate")
    return KlReport(
        n_records=total.n,
        mean_kl=total.mean,
        std_kl=total.std,
        per_group={g: (w.n, w.mean, w.std) for g, w in groups.items()},
    )


# ---------------------------------------------------------------------------
# JSONL reading
# ---------------------------------------------------------------------------


def _int_list(value, where: str) -> tuple[int, ...]:
    if not isinstance(value, list) or not all(
        isinstance(x, int) and not isinstance(x, bool) for x in value
    ):
        raise SchemaError(f"{where}: token_ids must be a list of integers")
    return tuple(value)


def _float_list(value, where: str, key: str) -> tuple[float, ...]:
    if not isinstance(value, list) or not all(
        isinstance(x, (int, float)) and not isinstance(x, bool) for x in value
    ):
        raise SchemaError(f"{where}: {key} must be a list of numbers")
    out = tuple(float(x) for x in value)
    if not all(math.isfinite(x) for x in out):
        raise SchemaError(f"{where}: {key} contains non-finite values")
    return out


def parse_logits_pair(obj: dict, where: str = "record") -> LogitsPairRecord:
    """Validate one parsed JSON object against the record schema."""
    if not isinstance(obj, dict):
        raise SchemaError(f"{where}: expected a JSON object")
    try:
        example_id = obj["example_id"]
        token_ids = obj["token_ids"]
        ft_logits = obj["ft_logits"]
        pt_logits = obj["pt_logits"]
    except KeyError as exc:
        raise SchemaError(f"{where}: missing required field {exc.args[0]!r}") from None
    if not isinstance(example_id, str):
        raise SchemaError(f"{where}: example_id must be a string")
    ids = _int_list(token_ids, where)
    ft = _float_list(ft_logits, where, "ft_logits")
    pt = _float_list(pt_logits, where, "pt_logits")
    if not (len(ids) == len(ft) == len(pt)):
        raise SchemaError(f"{where}: token_ids/ft_logits/pt_logits lengths differ")
    if len(ids) < TOP_K:
        raise SchemaError(f"{where}: need at least {TOP_K} entries, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise SchemaError(f"{where}: token_ids must be distinct")
    if any(ft[i] < ft[i + 1] for i in range(len(ft) - 1)):
        raise SchemaError(f"{where}: ft_logits must be non-increasing")
    meta = obj.get("meta", {})
    if not isinstance(meta, dict):
        raise SchemaError(f"{where}: meta must be an object")
    return LogitsPairRecord(example_id, ids, ft, pt, meta)


def read_logits_pairs(path: str | os.PathLike) -> Iterator[LogitsPairRecord]:
    """Stream records from a JSON-lines file, validating each line."""
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
            yield parse_logits_pair(obj, where)
