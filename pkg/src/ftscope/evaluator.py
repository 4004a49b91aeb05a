"""Closed-book QA scoring over mastery buckets.

A run's accuracy report holds one accuracy per bucket (matched / scored,
using the same alias matching as mastery scoring) plus their unweighted
mean as the aggregate — the aggregate always divides by five, so bucket
sizes never reweight it, and an empty bucket is an error rather than a
silent renormalization.

Multi-run summaries report mean and population variance per metric
(sample variance by flag).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from typing import Mapping, Sequence

from .errors import ConfigError, EmptyBucketError, NoDataError, SchemaError
from .mastery import N_BUCKETS, KnowledgeItem, match_answer

_METRICS = tuple(f"acc_{i}" for i in range(N_BUCKETS)) + ("aggregate",)


@dataclass(frozen=True)
class PredictionRecord:
    item_id: str
    prediction: str
    run_id: str


@dataclass(frozen=True)
class AccuracyReport:
    run_id: str
    per_bucket: tuple[float, float, float, float, float]
    aggregate: float
    n_per_bucket: tuple[int, int, int, int, int]

    def to_json_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "per_bucket": list(self.per_bucket),
            "aggregate": self.aggregate,
            "n_per_bucket": list(self.n_per_bucket),
        }

    def csv_row(self) -> str:
        cells = [self.run_id]
        cells += [f"{100.0 * a:.2f}" for a in self.per_bucket]
        cells.append(f"{100.0 * self.aggregate:.2f}")
        return ",".join(cells)


CSV_HEADER = "Run,Acc_0,Acc_1,Acc_2,Acc_3,Acc_4,Acc"


def reports_csv(reports: Sequence[AccuracyReport]) -> str:
    return "\n".join([CSV_HEADER, *(r.csv_row() for r in reports)]) + "\n"


@dataclass(frozen=True)
class RunSummary:
    n_runs: int
    mean: dict[str, float]
    variance: dict[str, float]
    variance_kind: str  # "population" or "sample"

    def to_json_dict(self) -> dict:
        return {
            "n_runs": self.n_runs,
            "mean": {k: self.mean[k] for k in _METRICS},
            "variance": {k: self.variance[k] for k in _METRICS},
            "variance_kind": self.variance_kind,
        }

    def to_csv(self) -> str:
        lines = ["Metric,Mean,Variance"]
        lines += [
            f"{k},{self.mean[k]:.12g},{self.variance[k]:.12g}" for k in _METRICS
        ]
        return "\n".join(lines) + "\n"


def score_run(
    predictions: Mapping[str, str],
    items: Mapping[str, KnowledgeItem],
    buckets: Mapping[str, int],
    run_id: str,
    case_sensitive: bool = False,
) -> AccuracyReport:
    """Per-bucket accuracy and their unweighted mean for one run.

    `predictions` maps item_id -> predicted text; every scored item must be
    known and bucketed, and every bucket must receive at least one item.
    """
    matched = [0] * N_BUCKETS
    totals = [0] * N_BUCKETS
    for item_id, prediction in predictions.items():
        item = items.get(item_id)
        if item is None:
            raise SchemaError(f"prediction references unknown item id {item_id!r}")
        bucket = buckets.get(item_id)
        if bucket is None:
            raise SchemaError(f"item {item_id!r} has no mastery bucket")
        if not 0 <= bucket < N_BUCKETS:
            raise SchemaError(f"item {item_id!r} has invalid bucket {bucket}")
        totals[bucket] += 1
        if match_answer(prediction, item.aliases, case_sensitive):
            matched[bucket] += 1
    for i, total in enumerate(totals):
        if total == 0:
            raise EmptyBucketError(
                f"bucket {i} has no scored items in run {run_id!r}; "
                "the aggregate divides by 5 unconditionally"
            )
    per_bucket = tuple(matched[i] / totals[i] for i in range(N_BUCKETS))
    return AccuracyReport(
        run_id=run_id,
        per_bucket=per_bucket,
        aggregate=sum(per_bucket) / N_BUCKETS,
        n_per_bucket=tuple(totals),
    )


def summarize_runs(
    reports: Sequence[AccuracyReport], sample_variance: bool = False
) -> RunSummary:
    """Mean and variance of every metric across runs."""
    if not reports:
        raise NoDataError("summarize_runs requires at least one report")
    n = len(reports)
    if sample_variance and n < 2:
        raise ConfigError("sample variance requires at least two runs")

    def series(metric: str) -> list[float]:
        if metric == "aggregate":
            return [r.aggregate for r in reports]
        return [r.per_bucket[int(metric.rsplit("_", 1)[1])] for r in reports]

    mean: dict[str, float] = {}
    variance: dict[str, float] = {}
    for metric in _METRICS:
        values = series(metric)
        mu = math.fsum(values) / n
        sq = math.fsum((v - mu) ** 2 for v in values)
        mean[metric] = mu
        variance[metric] = sq / (n - 1) if sample_variance else sq / n
    return RunSummary(
        n_runs=n,
        mean=mean,
        variance=variance,
        variance_kind="sample" if sample_variance else "population",
    )


def load_predictions(path: str | os.PathLike) -> dict[str, dict[str, str]]:
    """run_id -> {item_id -> prediction}; duplicate (item, run) pairs rejected."""
    path = os.fspath(path)
    runs: dict[str, dict[str, str]] = {}
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
            fields = {}
            for key in ("item_id", "prediction", "run_id"):
                value = obj.get(key)
                if not isinstance(value, str):
                    raise SchemaError(f"{where}: field {key!r} must be a string")
                fields[key] = value
            run = runs.setdefault(fields["run_id"], {})
            if fields["item_id"] in run:
                raise SchemaError(
                    f"{where}: duplicate prediction for item {fields['item_id']!r} "
                    f"in run {fields['run_id']!r}"
                )
            run[fields["item_id"]] = fields["prediction"]
    return runs
