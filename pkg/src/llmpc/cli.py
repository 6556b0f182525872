"""Command-line frontend: ``llmpc predict | sweep | validate | hbm-study``."""

from __future__ import annotations

import argparse
import itertools
import json
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Sequence

import yaml

from llmpc import __version__
from llmpc.chipcost import export_cost_inputs, library_from_dict, system_cost
from llmpc.config import Config, config_from_tree, fingerprint, read_yaml, set_key
from llmpc.engine import PredictionReport, csv_row, predict, rows_to_csv
from llmpc.errors import LLMPCError, ParallelismError

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INFEASIBLE = 2

_KEY_RE = re.compile(r"\b((?:system|workload|run|cost|parallelism)(?:\.[A-Za-z0-9_]+)+)")


# ---------------------------------------------------------------------------
# error context
# ---------------------------------------------------------------------------

def key_line(path: str | Path, dotted: str) -> int | None:
    """1-based line of ``dotted`` in the YAML file, or of its deepest present ancestor."""
    try:
        node = yaml.compose(Path(path).read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError):
        return None
    parts = dotted.split(".")
    if parts[0] == "parallelism":
        parts = ["run", *parts]
    line = None
    for part in parts:
        if isinstance(node, yaml.MappingNode):
            match = next(((k, v) for k, v in node.value if k.value == part), None)
            if match is None:
                break
            line = match[0].start_mark.line + 1
            node = match[1]
        elif isinstance(node, yaml.SequenceNode) and part.isdigit() and int(part) < len(node.value):
            node = node.value[int(part)]
            line = node.start_mark.line + 1
        else:
            break
    return line


def describe_error(exc: Exception, path: str | Path | None) -> str:
    msg = str(exc)
    if path is None or msg.startswith(str(path)):
        return msg
    m = _KEY_RE.search(msg)
    key = m.group(1) if m else ("run.parallelism" if isinstance(exc, ParallelismError) else None)
    line = key_line(path, key) if key else None
    return f"{path}:{line}: {msg}" if line else f"{path}: {msg}"


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def config_cost(cfg: Config) -> float | None:
    """Package cost when the config names a library and the accelerator has a physical model."""
    if not cfg.cost or cfg.system.accelerator.physical is None:
        return None
    lib = library_from_dict(cfg.cost, str(cfg.tree.get("cost", {}).get("name", "config")))
    return system_cost(export_cost_inputs(cfg.system).chiplets, lib).total


def evaluate(cfg: Config, flash: bool | None = None) -> tuple[PredictionReport, float | None]:
    report = predict(cfg.system, cfg.model, cfg.run, cfg.parallelism, flash)
    return report, config_cost(cfg)


def overflow_diagnostic(report: PredictionReport, capacity: float) -> str:
    parts = ", ".join(f"{k}={v / 1e9:.2f} GB" for k, v in sorted(report.memory_breakdown.items()))
    return (f"memory overflow: {report.memory_per_device / 1e9:.2f} GB needed per device, "
            f"{capacity / 1e9:.2f} GB available ({parts})")


def _flash_flag(value: str | None) -> bool | None:
    return None if value is None else value == "on"


def cmd_predict(args: argparse.Namespace) -> int:
    path = Path(args.config)
    try:
        tree = read_yaml(path)
        cfg = config_from_tree(tree)
        report, cost = evaluate(cfg, _flash_flag(args.flash_attention))
    except LLMPCError as exc:
        print(f"error: {describe_error(exc, path)}", file=sys.stderr)
        return EXIT_ERROR
    fp = fingerprint(tree if args.flash_attention is None
                     else set_key(tree, "run.flash_attention", args.flash_attention == "on"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = path.stem + ("" if args.flash_attention is None else f"-fa-{args.flash_attention}")
    doc = report.to_dict()
    doc["fingerprint"] = fp
    doc["cost"] = cost
    (out / f"{stem}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    (out / f"{stem}.csv").write_text(rows_to_csv([csv_row(report, fp, path.stem, cost)],
                                                 notes=report.notes))
    print(f"{path}: {report.phase}: iteration {report.iteration_time:.6g} s, "
          f"{report.tflops_per_device / 1e12:.1f} TFLOP/s per device, "
          f"memory {report.memory_per_device / 1e9:.2f} GB"
          + ("" if cost is None else f", cost {cost:.1f}"))
    print(f"wrote {out / (stem + '.json')} and {out / (stem + '.csv')}")
    if not report.feasible:
        print(f"error: {path}: {overflow_diagnostic(report, cfg.system.accelerator.hbm.capacity)}",
              file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


def parse_axis(spec: str) -> tuple[str, list[str]]:
    key, sep, values = spec.partition("=")
    if not sep or not key or not values:
        raise argparse.ArgumentTypeError(f"axis must look like key=v1,v2 (got {spec!r})")
    return key.strip(), [v.strip() for v in values.split(",")]


def sweep_trees(tree: dict[str, Any], axes: list[tuple[str, list[str]]]):
    """Cartesian product in lexicographic order: the last axis varies fastest.

    Values are YAML scalars, so ``8`` is an int and ``on`` a boolean.
    """
    keys = [k for k, _ in axes]
    for combo in itertools.product(*(vals for _, vals in axes)):
        t = tree
        for k, v in zip(keys, combo):
            t = set_key(t, k, yaml.safe_load(v))
        yield ";".join(f"{k}={v}" for k, v in zip(keys, combo)), t


def _sweep_row(item: tuple[int, str, dict[str, Any]]) -> tuple[dict[str, Any], list[str]]:
    index, label, tree = item
    fp = fingerprint(tree)
    try:
        report, cost = evaluate(config_from_tree(tree))
    except (LLMPCError, KeyError, TypeError, ValueError) as exc:
        row = {c: "" for c in ("iteration_time_s", "epoch_or_serving_time_s",
                               "tflops_per_device", "memory_per_device_bytes", "cost",
                               "combined_metric")}
        row.update(fingerprint=fp, label=label, phase=str(tree.get("run", {}).get("phase", "")),
                   feasible="false")
        return row, [f"row {index}: invalid: {exc}"]
    return csv_row(report, fp, label, cost), report.notes


def cmd_sweep(args: argparse.Namespace) -> int:
    path = Path(args.config)
    try:
        tree = read_yaml(path)
    except LLMPCError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    axes = [parse_axis(a) for a in args.axis or []]
    try:
        items = [(i, label, t) for i, (label, t) in enumerate(sweep_trees(tree, axes))]
    except LLMPCError as exc:
        print(f"error: {path}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    print(f"{path}: {len(items)} configurations", file=sys.stderr)
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_row, items))
    else:
        results = [_sweep_row(it) for it in items]
    notes: list[str] = []
    for _, row_notes in results:
        notes.extend(n for n in row_notes if n not in notes)
    text = rows_to_csv([r for r, _ in results], notes=notes)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
        print(f"wrote {args.out}", file=sys.stderr)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    from llmpc.validation import SUITES, run_validation

    only = [s for part in (args.only or []) for s in part.split(",") if s]
    try:
        checks = run_validation(only or None)
    except KeyError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return EXIT_ERROR
    for c in checks:
        print(c.line())
    failed = [c for c in checks if not c.passed]
    suites = sorted({c.suite for c in checks}, key=list(SUITES).index)
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed across {len(suites)} suites")
    return EXIT_ERROR if failed else EXIT_OK


STUDY_COLUMNS = ("label", "training_rel", "inference_rel", "cost", "metric", "metric_x_cost",
                 "training_feasible", "inference_feasible")


def cmd_hbm_study(args: argparse.Namespace) -> int:
    from llmpc.validation import hbm_study_table

    table = hbm_study_table(args.library)
    rows = [{"label": k, **{c: (repr(v) if isinstance(v, float) else str(v).lower())
                            for c, v in row.items()}} for k, row in table.items()]
    text = rows_to_csv(rows, STUDY_COLUMNS,
                       notes=["times are relative to A100-5HBMs; metric weighs training and "
                              "inference equally",
                              "absolute costs come from a placeholder library and carry no "
                              "meaning"])
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="llmpc", description=__doc__)
    parser.add_argument("--version", action="version", version=f"llmpc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("predict", help="predict one configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--flash-attention", choices=("on", "off"))
    p.add_argument("--out", default=".", help="directory for the JSON and CSV reports")
    p.set_defaults(func=cmd_predict)

    s = sub.add_parser("sweep", help="evaluate the Cartesian product of config axes")
    s.add_argument("--config", required=True)
    s.add_argument("--axis", action="append", help="dotted.key=v1,v2,... (repeatable)")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", help="CSV path (default: stdout)")
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("validate", help="run the reproduction checks")
    v.add_argument("--only", action="append", help="suite name(s), comma separated")
    v.set_defaults(func=cmd_validate)

    h = sub.add_parser("hbm-study", help="HBM stack count versus cost table")
    h.add_argument("--library", default="placeholder")
    h.add_argument("--out")
    h.set_defaults(func=cmd_hbm_study)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except argparse.ArgumentTypeError as exc:
        parser.error(str(exc))
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
