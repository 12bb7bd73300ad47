"""Command-line driver: ``llebkit train | eval | compare``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, load_config
from .metrics import EvalReport
from .nets import TrainingDiverged

REPORT_FORMAT = "llebkit-report"
REPORT_VERSION = 1
METRICS = ("accuracy", "ece", "auroc")


class CompareError(ValueError):
    pass


def trace_path(out) -> Path:
    return Path(f"{out}.trace.json")


def _config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seeds=[args.seed])
    return cfg


def cmd_train(args) -> int:
    cfg = _config(args)
    runs = [pipeline.train_run(cfg, s) for s in cfg.seeds]
    save_checkpoint(args.out, pipeline.to_checkpoint(cfg, runs))
    traces = {str(r.seed): r.traces for r in runs}
    trace_path(args.out).write_text(json.dumps({"method": cfg.method, "traces": traces}, indent=1))
    print(f"wrote {args.out} ({len(runs)} seed(s), method {cfg.method})")
    return 0


def write_report(path, reports: list) -> None:
    doc = {"format": REPORT_FORMAT, "version": REPORT_VERSION, "records": [r.to_record() for r in reports]}
    Path(path).write_text(json.dumps(doc, indent=1))


def read_report(path) -> list:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != REPORT_FORMAT or doc.get("version") != REPORT_VERSION:
        raise CompareError(f"{path}: not a version-{REPORT_VERSION} {REPORT_FORMAT} file")
    return [EvalReport.from_record(r) for r in doc["records"]]


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    runs = pipeline.from_checkpoint(load_checkpoint(args.checkpoint), cfg)
    if args.seed is not None:
        runs = [r for r in runs if r.seed == args.seed]
        if not runs:
            raise ConfigError(f"seed: {args.seed} is not in the checkpoint")
    reports = [pipeline.evaluate_run(cfg, r) for r in runs]
    write_report(args.out, reports)
    for r in reports:
        auroc = "-" if r.auroc is None else f"{r.auroc:.4f}"
        print(f"{r.method} seed {r.seed}: accuracy {r.accuracy:.4f}  ece {r.ece:.4f}  auroc {auroc}")
    return 0


# ---------------------------------------------------------------------------
# compare


def method_label(r: EvalReport) -> str:
    return r.method if r.ensemble_size == 1 else f"{r.method} (M={r.ensemble_size})"


def mean_stderr(values) -> tuple[float, float]:
    """Mean and sample std (n - 1) over sqrt(n); stderr is 0 for one value."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v)))


def aggregate(reports: list) -> list:
    """One row per method: ``(label, n_seeds, {metric: (mean, se) | None})``."""
    groups: dict = {}
    for r in reports:
        groups.setdefault(method_label(r), []).append(r)
    rows = []
    for label, rs in groups.items():
        stats = {}
        for m in METRICS:
            vals = [getattr(r, m) for r in rs]
            missing = [v is None for v in vals]
            if any(missing) and not all(missing):
                raise CompareError(f"{label}: metric {m} is present in some reports and missing in others")
            stats[m] = None if all(missing) else mean_stderr(vals)
        rows.append((label, len(rs), stats))
    return rows


def _cell(stat) -> str:
    return "-" if stat is None else f"{stat[0]:.4f} ± {stat[1]:.4f}"


def format_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "seeds"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "stderr")])
    for label, n, stats in rows:
        cells = []
        for m in METRICS:
            cells += ["", ""] if stats[m] is None else [repr(stats[m][0]), repr(stats[m][1])]
        w.writerow([label, n] + cells)
    return buf.getvalue()


def format_table(rows) -> str:
    header = ["method", "seeds", *METRICS]
    body = [[label, str(n)] + [_cell(stats[m]) for m in METRICS] for label, n, stats in rows]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in [header] + body]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def cmd_compare(args) -> int:
    reports = [r for p in args.reports for r in read_report(p)]
    if not reports:
        raise CompareError("no records in the given reports")
    rows = aggregate(reports)
    text = format_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text + "\n" + format_table(rows))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="llebkit", description="Last-layer empirical Bayes experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train every seed of a config and write a checkpoint")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint and write a JSON report")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="aggregate reports into mean ± standard error")
    c.add_argument("reports", nargs="+")
    c.add_argument("--out", help="also write the CSV table here")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, pipeline.MismatchError, CompareError,
            TrainingDiverged, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
