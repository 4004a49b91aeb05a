"""Command-line entry point.

One subcommand per analysis procedure. Machine-readable results go to
stdout (or --out); human-readable progress goes to stderr. Exit codes:
0 success, 1 domain error (bad data, misaligned pair, empty input),
2 usage error (bad flags, out-of-range values, missing files).

Every flag can also be supplied via a TOML config file (--config):
top-level keys apply to all subcommands, a [subcommand] table applies to
one, and explicit flags always win.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from typing import Any, Callable, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import delta_rank, evaluator, logit_kl, mastery, restorer, tensor_store
from .errors import FtscopeError

log = logging.getLogger("ftscope")


class UsageError(Exception):
    """Bad invocation: wrong flags, out-of-range values, missing files."""


# ---------------------------------------------------------------------------
# option plumbing
# ---------------------------------------------------------------------------


def _load_config(path: str | None, subcommand: str) -> dict[str, Any]:
    if path is None:
        return {}
    if not os.path.isfile(path):
        raise UsageError(f"config file not found: {path}")
    with open(path, "rb") as f:
        try:
            doc = tomllib.load(f)
        except tomllib.TOMLDecodeError as exc:
            raise UsageError(f"invalid TOML in {path}: {exc}") from exc
    merged = {k: v for k, v in doc.items() if not isinstance(v, dict)}
    section = doc.get(subcommand, {})
    if not isinstance(section, dict):
        raise UsageError(f"config section [{subcommand}] must be a table")
    merged.update(section)
    return merged


def _merge(args: argparse.Namespace, config: dict[str, Any], key: str, default: Any) -> Any:
    value = getattr(args, key, None)
    if value is not None:
        return value
    if key in config:
        return config[key]
    return default


def _require_file(path: Any, flag: str) -> str:
    if not isinstance(path, str) or not path:
        raise UsageError(f"missing required path: {flag}")
    if not os.path.isfile(path):
        raise UsageError(f"{flag}: file not found: {path}")
    return path


def _check_unit_interval(value: Any, flag: str) -> float:
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise UsageError(f"{flag} must be a number, got {value!r}") from None
    if not 0.0 <= value <= 1.0 or math.isnan(value):
        raise UsageError(f"{flag} must be in [0, 1], got {value}")
    return value


def _check_positive_int(value: Any, flag: str) -> int:
    try:
        value = int(value)
    except (TypeError, ValueError):
        raise UsageError(f"{flag} must be an integer, got {value!r}") from None
    if value < 1:
        raise UsageError(f"{flag} must be >= 1, got {value}")
    return value


def _parse_fractions(text: Any) -> list[float]:
    if isinstance(text, list):
        return [_check_unit_interval(x, "--fractions") for x in text]
    parts = [p.strip() for p in str(text).split(",") if p.strip()]
    if not parts:
        raise UsageError("--fractions must list at least one value")
    return [_check_unit_interval(p, "--fractions") for p in parts]


def _parse_layers(text: Any) -> list[int]:
    """Layer sets like "0-3,28-31" or "5" -> sorted list of indices."""
    out: set[int] = set()
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        lo, sep, hi = part.partition("-")
        try:
            if sep:
                lo_i, hi_i = int(lo), int(hi)
                if lo_i > hi_i:
                    raise ValueError
                out.update(range(lo_i, hi_i + 1))
            else:
                out.add(int(part))
        except ValueError:
            raise UsageError(f"--layers: cannot parse range {part!r}") from None
    if not out:
        raise UsageError("--layers must name at least one layer")
    return sorted(out)


def _json_safe(obj: Any) -> Any:
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)  # "inf", "-inf", "nan"
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def _emit(text: str, out_path: str | None) -> None:
    if out_path:
        with open(out_path, "w", encoding="utf-8") as f:
            f.write(text)
        log.info("wrote %s", out_path)
    else:
        sys.stdout.write(text)


def _emit_report(doc: Any, fmt: str, out_path: str | None, csv_text: str | None = None) -> None:
    if fmt == "csv":
        if csv_text is None:
            raise UsageError("this subcommand has no CSV form; use --format json")
        _emit(csv_text, out_path)
    else:
        _emit(json.dumps(_json_safe(doc), indent=2, sort_keys=True) + "\n", out_path)


def _open_pair(cfg: dict[str, Any]) -> tuple[tensor_store.Checkpoint, tensor_store.Checkpoint]:
    pre = tensor_store.open_checkpoint(_require_file(cfg["pre"], "--pre"))
    ft = tensor_store.open_checkpoint(_require_file(cfg["ft"], "--ft"))
    return pre, ft


def _load_or_build_index(
    cfg: dict[str, Any],
    pre: tensor_store.Checkpoint,
    ft: tensor_store.Checkpoint,
) -> delta_rank.DeltaIndex:
    if cfg.get("index"):
        path = _require_file(cfg["index"], "--index")
        log.info("loading delta index from %s", path)
        with open(path, "r", encoding="utf-8") as f:
            return delta_rank.DeltaIndex.from_json_dict(json.load(f))
    log.info("building delta index over %d parameters", ft.total_params)
    return delta_rank.build_delta_index(
        pre,
        ft,
        chunk_elems=cfg["chunk_elems"],
        exclude=cfg["exclude"],
        threads=cfg["threads"],
    )


def _name_rules(cfg: dict[str, Any]) -> delta_rank.NameRules:
    if cfg.get("name_rules"):
        path = _require_file(cfg["name_rules"], "--name-rules")
        with open(path, "r", encoding="utf-8") as f:
            return delta_rank.NameRules.from_json_dict(json.load(f))
    return delta_rank.NameRules()


def _common_analysis_options(cfg: dict[str, Any], args: argparse.Namespace, config: dict) -> None:
    cfg["chunk_elems"] = _check_positive_int(
        _merge(args, config, "chunk_elems", tensor_store.DEFAULT_CHUNK_ELEMS), "--chunk-elems"
    )
    cfg["threads"] = _check_positive_int(
        _merge(args, config, "threads", os.cpu_count() or 1), "--threads"
    )
    exclude = _merge(args, config, "exclude", [])
    if isinstance(exclude, str):
        exclude = [exclude]
    cfg["exclude"] = tuple(exclude)
    cfg["index"] = _merge(args, config, "index", None)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_validate_pair(args, config) -> int:
    cfg = {"pre": _merge(args, config, "pre", None), "ft": _merge(args, config, "ft", None)}
    pre, ft = _open_pair(cfg)
    report = tensor_store.validate_pair(pre, ft)
    csv_text = "\n".join(
        ["Name,Reason", *(f"{n},{r}" for n, r in report.mismatches)]
    ) + "\n"
    _emit_report(report.to_dict(), args.format, args.out, csv_text)
    if not report.aligned:
        log.error("pair is misaligned: %d mismatches", len(report.mismatches))
        return 1
    log.info("pair is aligned: %d tensors", len(ft.records))
    return 0


def _cmd_diff_rank(args, config) -> int:
    cfg = {"pre": _merge(args, config, "pre", None), "ft": _merge(args, config, "ft", None)}
    _common_analysis_options(cfg, args, config)
    pre, ft = _open_pair(cfg)
    index = delta_rank.build_delta_index(
        pre, ft, chunk_elems=cfg["chunk_elems"], exclude=cfg["exclude"], threads=cfg["threads"]
    )
    index.verify()
    log.info(
        "indexed %d parameters (%d unchanged, %d moved off zero)",
        index.total_count,
        index.zero_count,
        index.inf_count,
    )
    _emit_report(index.to_json_dict(), args.format, args.out)
    return 0


def _cmd_concentration(args, config) -> int:
    cfg = {"pre": _merge(args, config, "pre", None), "ft": _merge(args, config, "ft", None)}
    _common_analysis_options(cfg, args, config)
    fractions = _parse_fractions(
        _merge(args, config, "fractions", "0.01,0.05,0.1,0.2,0.3,0.5,0.8,1.0")
    )
    pre, ft = _open_pair(cfg)
    index = _load_or_build_index(cfg, pre, ft)
    table = delta_rank.concentration(index, pre, ft, fractions)
    _emit_report(table.to_json_dict(), args.format, args.out, table.to_csv())
    return 0


def _cmd_attribute(args, config) -> int:
    cfg = {
        "pre": _merge(args, config, "pre", None),
        "ft": _merge(args, config, "ft", None),
        "name_rules": _merge(args, config, "name_rules", None),
    }
    _common_analysis_options(cfg, args, config)
    rho = _check_unit_interval(_merge(args, config, "rho", None), "--rho")
    pre, ft = _open_pair(cfg)
    index = _load_or_build_index(cfg, pre, ft)
    selection = delta_rank.select_threshold(index, pre, ft, rho)
    log.info("selected %d parameters at rho=%g", selection.selected_count, rho)
    report = delta_rank.attribute(index, selection, pre, ft, _name_rules(cfg))
    csv_text = report.layers_csv() + "\n" + report.modules_csv()
    doc = {"selection": selection.to_json_dict(), "attribution": report.to_json_dict()}
    _emit_report(doc, args.format, args.out, csv_text)
    return 0


def _cmd_restore(args, config) -> int:
    cfg = {
        "pre": _merge(args, config, "pre", None),
        "ft": _merge(args, config, "ft", None),
        "name_rules": _merge(args, config, "name_rules", None),
    }
    _common_analysis_options(cfg, args, config)
    # For restore, --out names the restored checkpoint; the summary goes
    # to stdout so shell pipelines can capture it.
    to_path = _merge(args, config, "out", None)
    if not isinstance(to_path, str) or not to_path:
        raise UsageError("missing required path: --out (restored checkpoint)")
    rho = _merge(args, config, "rho", None)
    layers = _merge(args, config, "layers", None)
    if (rho is None) == (layers is None):
        raise UsageError("restore needs exactly one of --rho or --layers")
    pre, ft = _open_pair(cfg)

    if layers is not None:
        layer_list = _parse_layers(layers)
        log.info("restoring layers %s", layer_list)
        summary = restorer.restore_layers(
            pre, ft, layer_list, to_path, _name_rules(cfg), cfg["chunk_elems"]
        )
        doc = {"summary": summary.to_json_dict()}
    else:
        rho = _check_unit_interval(rho, "--rho")
        index = _load_or_build_index(cfg, pre, ft)
        selection = delta_rank.select_threshold(index, pre, ft, rho)
        log.info("selected %d parameters at rho=%g", selection.selected_count, rho)
        summary = restorer.restore_topk(pre, ft, selection, to_path, cfg["chunk_elems"])
        doc = {
            "selection": selection.to_json_dict(),
            "summary": summary.to_json_dict(),
        }
    log.info("restored %d parameters -> %s", summary.restored_count, to_path)
    _emit_report(doc, args.format, None)
    return 0


def _cmd_kl(args, config) -> int:
    records_path = _require_file(_merge(args, config, "records", None), "--records")
    group_by = _merge(args, config, "group_by", "topic")
    report = logit_kl.aggregate_kl(logit_kl.read_logits_pairs(records_path), group_by)
    log.info("aggregated %d records: mean KL %.6g", report.n_records, report.mean_kl)
    _emit_report(report.to_json_dict(), args.format, args.out, report.to_csv())
    return 0


def _grid_options(args, config) -> tuple[int, int, bool]:
    n_map = _check_positive_int(_merge(args, config, "n_map", mastery.N_MAP_DEFAULT), "--n-map")
    n_sample = _check_positive_int(
        _merge(args, config, "n_sample", mastery.N_SAMPLE_DEFAULT), "--n-sample"
    )
    case_sensitive = bool(_merge(args, config, "case_sensitive", False))
    return n_map, n_sample, case_sensitive


def _load_item_world(args, config):
    synonyms_path = _merge(args, config, "synonyms", None)
    synonyms = (
        mastery.load_synonyms(_require_file(synonyms_path, "--synonyms"))
        if synonyms_path
        else mastery.load_synonyms()
    )
    items = mastery.load_items(_require_file(_merge(args, config, "items", None), "--items"), synonyms)
    return items, synonyms


def _classify(args, config):
    n_map, n_sample, case_sensitive = _grid_options(args, config)
    items, _ = _load_item_world(args, config)
    log_path = _require_file(_merge(args, config, "completions", None), "--completions")
    completions = mastery.load_completions(log_path, n_map, n_sample)
    report, splits = mastery.split_dataset(
        items, completions, n_map=n_map, n_sample=n_sample, case_sensitive=case_sensitive
    )
    return items, report, splits


def _cmd_classify(args, config) -> int:
    _, report, splits = _classify(args, config)
    log.info("bucket counts: %s", list(report.bucket_counts))
    doc = {"report": report.to_json_dict(), "splits": splits}
    csv_lines = ["ItemId,R,Bucket,NTrials,Hits"]
    csv_lines += [
        f"{item_id},{m.ratio:.12g},{m.bucket},{m.n_trials},{m.hits}"
        for item_id, m in sorted(report.per_item.items())
    ]
    _emit_report(doc, args.format, args.out, "\n".join(csv_lines) + "\n")
    return 0


def _cmd_best_template(args, config) -> int:
    n_map, n_sample, case_sensitive = _grid_options(args, config)
    items, _ = _load_item_world(args, config)
    log_path = _require_file(_merge(args, config, "completions", None), "--completions")
    completions = mastery.load_completions(log_path, n_map, n_sample)
    only_topic = _merge(args, config, "topic", None)
    topics = sorted({it.topic for it in items})
    if only_topic is not None:
        if only_topic not in topics:
            raise UsageError(f"--topic {only_topic!r} has no items in --items")
        topics = [only_topic]
    result = {}
    for topic in topics:
        topic_items = [it for it in items if it.topic == topic]
        result[topic] = mastery.best_template(
            completions, topic_items, n_map, n_sample, case_sensitive
        )
    csv_text = "\n".join(["Topic,TemplateId", *(f"{t},{i}" for t, i in sorted(result.items()))]) + "\n"
    _emit_report({"best_template": result}, args.format, args.out, csv_text)
    return 0


def _buckets_from_mastery_doc(doc: Any, where: str) -> dict[str, int]:
    if isinstance(doc, dict) and "report" in doc:
        doc = doc["report"]
    if not isinstance(doc, dict) or "per_item" not in doc:
        raise UsageError(f"{where}: not a mastery report (no per_item table)")
    return {item_id: entry["bucket"] for item_id, entry in doc["per_item"].items()}


def _score_all_runs(items, buckets, runs, case_sensitive):
    reports = []
    for run_id in sorted(runs):
        reports.append(
            evaluator.score_run(runs[run_id], items, buckets, run_id, case_sensitive)
        )
        log.info("run %s: aggregate %.4f", run_id, reports[-1].aggregate)
    return reports


def _cmd_evaluate(args, config) -> int:
    _, _, case_sensitive = _grid_options(args, config)
    items, _ = _load_item_world(args, config)
    items_by_id = {it.id: it for it in items}
    mastery_path = _require_file(_merge(args, config, "mastery", None), "--mastery")
    with open(mastery_path, "r", encoding="utf-8") as f:
        buckets = _buckets_from_mastery_doc(json.load(f), mastery_path)
    runs = evaluator.load_predictions(
        _require_file(_merge(args, config, "predictions", None), "--predictions")
    )
    reports = _score_all_runs(items_by_id, buckets, runs, case_sensitive)
    doc = {"runs": [r.to_json_dict() for r in reports]}
    _emit_report(doc, args.format, args.out, evaluator.reports_csv(reports))
    return 0


def _cmd_summarize(args, config) -> int:
    reports_path = _require_file(_merge(args, config, "reports", None), "--reports")
    with open(reports_path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    rows = doc["runs"] if isinstance(doc, dict) and "runs" in doc else doc
    if not isinstance(rows, list):
        raise UsageError(f"{reports_path}: expected a list of run reports")
    reports = [
        evaluator.AccuracyReport(
            run_id=row["run_id"],
            per_bucket=tuple(row["per_bucket"]),
            aggregate=row["aggregate"],
            n_per_bucket=tuple(row["n_per_bucket"]),
        )
        for row in rows
    ]
    summary = evaluator.summarize_runs(
        reports, sample_variance=bool(_merge(args, config, "sample_variance", False))
    )
    _emit_report(summary.to_json_dict(), args.format, args.out, summary.to_csv())
    return 0


def _cmd_pipeline(args, config) -> int:
    items, report, splits = _classify(args, config)
    _, _, case_sensitive = _grid_options(args, config)
    items_by_id = {it.id: it for it in items}
    buckets = {item_id: m.bucket for item_id, m in report.per_item.items()}
    runs = evaluator.load_predictions(
        _require_file(_merge(args, config, "predictions", None), "--predictions")
    )
    reports = _score_all_runs(items_by_id, buckets, runs, case_sensitive)
    summary = evaluator.summarize_runs(
        reports, sample_variance=bool(_merge(args, config, "sample_variance", False))
    )
    doc = {
        "mastery": report.to_json_dict(),
        "splits": splits,
        "runs": [r.to_json_dict() for r in reports],
        "summary": summary.to_json_dict(),
    }
    _emit_report(doc, args.format, args.out)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file; explicit flags win")
    common.add_argument("--out", help="write the report here instead of stdout")
    common.add_argument("--format", choices=("json", "csv"), default="json")

    pair = argparse.ArgumentParser(add_help=False)
    pair.add_argument("--pre", help="pre-update checkpoint file")
    pair.add_argument("--ft", help="updated checkpoint file")

    analysis = argparse.ArgumentParser(add_help=False)
    analysis.add_argument("--chunk-elems", type=int, dest="chunk_elems")
    analysis.add_argument("--threads", type=int)
    analysis.add_argument("--exclude", action="append", help="glob of tensor names to skip")
    analysis.add_argument("--index", help="reuse a saved diff-rank JSON index")

    grid = argparse.ArgumentParser(add_help=False)
    grid.add_argument("--items", help="knowledge items JSONL")
    grid.add_argument("--synonyms", help="synonym table JSON (default: bundled)")
    grid.add_argument("--n-map", type=int, dest="n_map")
    grid.add_argument("--n-sample", type=int, dest="n_sample")
    grid.add_argument("--case-sensitive", action="store_const", const=True, dest="case_sensitive")

    parser = argparse.ArgumentParser(
        prog="ftscope",
        description="Checkpoint-pair analysis: rank parameter updates, measure "
        "their concentration, selectively restore them, and score knowledge mastery.",
    )
    sub = parser.add_subparsers(dest="subcommand", metavar="SUBCOMMAND")

    p = sub.add_parser("validate-pair", parents=[common, pair], help="check two checkpoints align")
    p.set_defaults(handler=_cmd_validate_pair)

    p = sub.add_parser("diff-rank", parents=[common, pair, analysis], help="build the relative-change index")
    p.set_defaults(handler=_cmd_diff_rank)

    p = sub.add_parser("concentration", parents=[common, pair, analysis], help="update-mass share of top-x%% parameters")
    p.add_argument("--fractions", help="comma-separated fractions in [0,1]")
    p.set_defaults(handler=_cmd_concentration)

    p = sub.add_parser("attribute", parents=[common, pair, analysis], help="locate the top-rho parameters by layer/module")
    p.add_argument("--rho", type=float)
    p.add_argument("--name-rules", dest="name_rules", help="JSON with layer_pattern/modules regexes")
    p.set_defaults(handler=_cmd_attribute)

    restore_common = argparse.ArgumentParser(add_help=False)
    restore_common.add_argument("--config", help="TOML config file; explicit flags win")
    restore_common.add_argument("--out", help="restored checkpoint output path")
    restore_common.add_argument("--format", choices=("json",), default="json")

    p = sub.add_parser("restore", parents=[restore_common, pair, analysis], help="write a checkpoint with chosen parameters reverted")
    p.add_argument("--rho", type=float)
    p.add_argument("--layers", help='layer set like "0-3,28-31" (instead of --rho)')
    p.add_argument("--name-rules", dest="name_rules")
    p.set_defaults(handler=_cmd_restore)

    p = sub.add_parser("kl", parents=[common], help="token-distribution shift from logits-pair records")
    p.add_argument("--records", help="logits-pair JSONL")
    p.add_argument("--group-by", dest="group_by", help="meta key for per-group stats (default topic)")
    p.set_defaults(handler=_cmd_kl)

    p = sub.add_parser("classify", parents=[common, grid], help="mastery buckets from completion logs")
    p.add_argument("--completions", help="completion records JSONL")
    p.set_defaults(handler=_cmd_classify)

    p = sub.add_parser("best-template", parents=[common, grid], help="highest-success template per topic")
    p.add_argument("--completions", help="completion records JSONL")
    p.add_argument("--topic", help="restrict to one topic")
    p.set_defaults(handler=_cmd_best_template)

    p = sub.add_parser("evaluate", parents=[common, grid], help="score predictions against mastery buckets")
    p.add_argument("--predictions", help="prediction records JSONL")
    p.add_argument("--mastery", help="classify output JSON (bucket source)")
    p.set_defaults(handler=_cmd_evaluate)

    p = sub.add_parser("summarize", parents=[common], help="mean/variance across run reports")
    p.add_argument("--reports", help="evaluate output JSON")
    p.add_argument("--sample-variance", action="store_const", const=True, dest="sample_variance")
    p.set_defaults(handler=_cmd_summarize)

    p = sub.add_parser("pipeline", parents=[common, grid], help="classify + evaluate + summarize in one pass")
    p.add_argument("--completions")
    p.add_argument("--predictions")
    p.add_argument("--sample-variance", action="store_const", const=True, dest="sample_variance")
    p.set_defaults(handler=_cmd_pipeline)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(message)s")
    parser = _build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "subcommand", None):
        parser.print_usage(sys.stderr)
        return 2
    handler: Callable = args.handler
    try:
        config = _load_config(args.config, args.subcommand)
        return handler(args, config)
    except UsageError as exc:
        log.error("usage error: %s", exc)
        return 2
    except FtscopeError as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
