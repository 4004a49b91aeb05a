"""Command-line entry point for the runner.

One subcommand per generation procedure. A JSON summary of what was
written goes to stdout; progress goes to stderr. Exit codes: 0 success,
1 generation/domain error (model load failure, vocabulary mismatch,
malformed inputs), 2 usage error (bad flags, missing files).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Callable, Sequence

from .errors import RunnerError
from .jobs import (
    GREEDY_MAX_NEW_DEFAULT,
    MIN_TOP_K,
    N_SAMPLES_DEFAULT,
    SAMPLE_MAX_NEW_DEFAULT,
    TEMPERATURE_DEFAULT,
    RunnerJob,
)
from .runner import export_logits_pairs, generate_completions, generate_predictions

log = logging.getLogger("model_runner")


class UsageError(Exception):
    """Bad invocation: wrong flags, out-of-range values, missing files."""


def _require_file(path: str | None, flag: str) -> str:
    if not path:
        raise UsageError(f"missing required path: {flag}")
    if not os.path.isfile(path):
        raise UsageError(f"{flag}: file not found: {path}")
    return path


def _require_dir(path: str | None, flag: str) -> str:
    if not path:
        raise UsageError(f"missing required path: {flag}")
    if not os.path.isdir(path):
        raise UsageError(f"{flag}: model directory not found: {path}")
    return path


def _require_out(path: str | None) -> str:
    if not path:
        raise UsageError("missing required path: --out")
    return path


def _cmd_completions(args: argparse.Namespace) -> int:
    job = RunnerJob(
        items_path=_require_file(args.items, "--items"),
        out_path=_require_out(args.out),
        model_path=_require_dir(args.model, "--model"),
        template_path=_require_file(args.templates, "--templates"),
        temperature=args.temperature,
        n_samples=args.n_samples,
        sample_max_new_tokens=args.max_new,
        batch_size=args.batch_size,
        seed=args.seed,
        device=args.device,
    )
    summary = generate_completions(job)
    log.info(
        "wrote %d completions (%d items x %d templates x %d samples)",
        summary.n_records, summary.n_items, summary.n_templates, summary.n_samples,
    )
    print(json.dumps(summary.to_json_dict(), indent=2))
    return 0


def _cmd_predictions(args: argparse.Namespace) -> int:
    job = RunnerJob(
        items_path=_require_file(args.items, "--items"),
        out_path=_require_out(args.out),
        model_path=_require_dir(args.model, "--model"),
        template_path=_require_file(args.templates, "--templates"),
        run_id=args.run_id,
        greedy_max_new_tokens=args.max_new,
        batch_size=args.batch_size,
        device=args.device,
    )
    summary = generate_predictions(job)
    log.info("wrote %d predictions for run %s", summary.n_records, summary.run_id)
    print(json.dumps(summary.to_json_dict(), indent=2))
    return 0


def _cmd_logits(args: argparse.Namespace) -> int:
    job = RunnerJob(
        items_path=_require_file(args.items, "--items"),
        out_path=_require_out(args.out),
        ft_model_path=_require_dir(args.ft, "--ft"),
        pre_model_path=_require_dir(args.pre, "--pre"),
        template_path=_require_file(args.templates, "--templates"),
        best_templates_path=_require_file(args.best_templates, "--best-templates"),
        top_k=args.top_k,
        batch_size=args.batch_size,
        device=args.device,
    )
    summary = export_logits_pairs(job)
    log.info("wrote %d logits-pair records (top_k=%d)", summary.n_records, summary.top_k)
    print(json.dumps(summary.to_json_dict(), indent=2))
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="model-runner",
        description="Run causal language models to produce completion logs, "
        "greedy predictions, and first-token logits-pair records.",
    )
    sub = parser.add_subparsers(dest="subcommand")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--items", help="knowledge items JSONL")
    common.add_argument("--out", help="output JSONL path (written atomically)")
    common.add_argument("--batch-size", type=int, dest="batch_size", default=8)
    common.add_argument("--device", default="cpu")

    p = sub.add_parser(
        "completions", parents=[common],
        help="sample the full (item x template x sample) completion grid",
    )
    p.add_argument("--model", help="model directory")
    p.add_argument("--templates", help="template pack JSON")
    p.add_argument("--temperature", type=float, default=TEMPERATURE_DEFAULT)
    p.add_argument("--n-samples", type=int, dest="n_samples", default=N_SAMPLES_DEFAULT)
    p.add_argument("--max-new", type=int, dest="max_new", default=SAMPLE_MAX_NEW_DEFAULT)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=_cmd_completions)

    p = sub.add_parser(
        "predictions", parents=[common], help="greedy-decode one answer per item"
    )
    p.add_argument("--model", help="model directory")
    p.add_argument("--templates", help="template pack JSON")
    p.add_argument("--run-id", dest="run_id", default="run-0")
    p.add_argument("--max-new", type=int, dest="max_new", default=GREEDY_MAX_NEW_DEFAULT)
    p.set_defaults(handler=_cmd_predictions)

    p = sub.add_parser(
        "logits", parents=[common],
        help="export both models' first-token logits over the fine-tuned top-k set",
    )
    p.add_argument("--ft", help="fine-tuned model directory")
    p.add_argument("--pre", help="pre-update model directory")
    p.add_argument("--templates", help="template pack JSON")
    p.add_argument("--best-templates", dest="best_templates", help="topic -> template id JSON")
    p.add_argument("--top-k", type=int, dest="top_k", default=MIN_TOP_K)
    p.set_defaults(handler=_cmd_logits)

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
        return handler(args)
    except UsageError as exc:
        log.error("usage error: %s", exc)
        return 2
    except RunnerError as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
