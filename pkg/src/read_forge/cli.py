"""``read-forge`` command-line entry point.

    read-forge verify|train|bench|report --config <path> [--set key=value]...

Outputs go to ``$READ_FORGE_OUTPUT/<output_dir>`` (default root ``outputs``).
Every file written is a pure function of the config, so re-running a command
reproduces it byte for byte; wall-clock time is only printed to stderr.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error,
3 tolerance failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path

from .accounting import (
    COST_COLUMNS, EnergyTrace, bench_batch, cost_report, depth_sweep, estimate_energy, format_table,
    is_exactly_linear,
)
from .backbone import Backbone
from .checkpoint import save_params
from .config import MODES, RunConfig, load_config, output_root
from .errors import ConfigError, ReadForgeError
from .petl import apply_method
from .tasks import make_task
from .trainer import RunMetrics, lr_search, train
from .verification import run_verification

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_TOLERANCE = 0, 1, 2, 3

log = logging.getLogger("read_forge")


class ToleranceFailure(Exception):
    """A check ran to completion but missed its tolerance."""

    def __init__(self, failures: list[str]):
        super().__init__("; ".join(failures))
        self.failures = failures


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


def _write(path: Path, text: str) -> None:
    path.write_text(text if text.endswith("\n") else text + "\n")


def _write_json(path: Path, data) -> None:
    _write(path, json.dumps(data, indent=2, sort_keys=True))


def _csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])
    return buf.getvalue()


def _prepare_dir(cfg: RunConfig) -> Path:
    out = cfg.output_path()
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc.strerror}") from None
    return out


def _trace(cfg: RunConfig) -> EnergyTrace | None:
    if cfg.energy_trace is None:
        return None
    try:
        return EnergyTrace.from_csv(cfg.energy_trace, cfg.power_kw)
    except OSError as exc:
        raise ConfigError(f"cannot read energy trace {cfg.energy_trace}: {exc.strerror}") from None


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_verify(cfg: RunConfig) -> dict:
    out = _prepare_dir(cfg)
    result = run_verification(cfg.backbone_config(), cfg.seed, cfg.verify.grad_instances,
                              cfg.verify.composed_instances, cfg.verify.eps_grid)
    _write(out / "verify.json", result.to_json())
    _write(out / "verify.txt", result.to_table())
    print(result.to_table())
    if not result.passed:
        raise ToleranceFailure(result.failures)
    return result.to_dict()


def _metrics_csv(metrics: RunMetrics) -> str:
    header = ["epoch", "step", "train_loss", "val_token_acc", "val_seq_acc",
              "tape_bytes_max", "tape_bytes_mean"]
    rows = [[getattr(r, h) for h in header] for r in metrics.epochs]
    return _csv_text(header, rows)


def cmd_train(cfg: RunConfig) -> dict:
    out = _prepare_dir(cfg)
    trace = _trace(cfg)
    backbone_cfg = cfg.backbone_config()
    if cfg.task.vocab_size > backbone_cfg.vocab_size:
        raise ConfigError(f"task.vocab_size {cfg.task.vocab_size} exceeds the backbone vocabulary "
                          f"{backbone_cfg.vocab_size}")
    splits = make_task(cfg.task)

    def factory():
        return apply_method(Backbone.init(backbone_cfg, cfg.seed), cfg.method, cfg.seed)

    train_cfg = cfg.train
    search = None
    if cfg.lr_grid_size is not None:
        train_cfg, runs = lr_search(factory, splits, cfg.lr_grid_size, cfg.train)
        search = [{"lr": r.lr, "best_val_token_acc": r.best_val_token_acc} for r in runs]

    model = factory()
    started = time.perf_counter()
    metrics = train(model, splits, train_cfg)
    log.info("trained in %.1f s", time.perf_counter() - started)

    trainable, total = model.trainable_count(), model.total_count()
    summary = {
        "method": cfg.method.label,
        "task": cfg.task.kind,
        "preset": backbone_cfg.preset_name,
        "seed": cfg.seed,
        "trainable_params": trainable,
        "total_params": total,
        "trainable_percent": 100.0 * trainable / total,
        "energy_kwh": estimate_energy(trace) if trace is not None else None,
        "metrics": metrics.summary(),
        "lr_search": search,
        "config": cfg.to_dict(),
    }
    _write(out / "metrics.csv", _metrics_csv(metrics))
    _write_json(out / "summary.json", summary)
    save_params(out / "params.json", model.trainable())
    print(f"{cfg.method.label}: test token acc {metrics.test_token_acc:.4f}, "
          f"seq acc {metrics.test_seq_acc:.4f}, steps {metrics.steps}")
    if cfg.target_token_acc is not None and metrics.test_token_acc < cfg.target_token_acc:
        raise ToleranceFailure([f"test token accuracy {metrics.test_token_acc:.4f} "
                                f"< target {cfg.target_token_acc}"])
    return summary


_BENCH_FIELDS = ["method", "depth", "total_params", "trainable_params", "trainable_percent",
                 "tape_bytes", "cache_bytes", "inference_bytes", "energy_kwh"]


def cmd_bench(cfg: RunConfig) -> dict:
    out = _prepare_dir(cfg)
    trace = _trace(cfg)
    base = cfg.backbone_config()
    opts = cfg.bench
    rows = []
    for depth in opts.depths:
        depth_cfg = base.with_depth(depth)
        if opts.measure_memory:
            backbone = Backbone.init(depth_cfg, cfg.seed)
            batch = bench_batch(depth_cfg, opts.batch_size, opts.src_len, opts.tgt_len, cfg.seed)
        for spec in opts.methods:
            if opts.measure_memory:
                report = cost_report(backbone, spec, batch, trace, cfg.seed)
            else:
                report = cost_report(depth_cfg, spec, trace=trace)
            rows.append({"depth": depth, **report.to_dict()})

    sweep = depth_sweep(base, opts.methods, opts.depths)
    labels = [spec.label for spec in opts.methods]
    counts = {label: [r.trainable_params for r in sweep if r.method == label] for label in labels}
    depth_rows = [[d] + [counts[label][i] for label in labels] for i, d in enumerate(opts.depths)]
    growth = {}
    for label in labels:
        c = counts[label]
        if len(set(c)) == 1:
            growth[label] = "constant"
        elif len(c) >= 2 and is_exactly_linear(opts.depths, c):
            growth[label] = "linear"
        else:
            growth[label] = "other"

    _write(out / "bench.csv", _csv_text(_BENCH_FIELDS, [[r[k] for k in _BENCH_FIELDS] for r in rows]))
    _write(out / "depth.csv", _csv_text(["depth"] + labels, depth_rows))
    result = {"preset": base.preset_name, "base_depth": base.encoder_layers,
              "batch_size": opts.batch_size, "rows": rows,
              "trainable_by_depth": {label: dict(zip(map(str, opts.depths), counts[label]))
                                     for label in labels},
              "growth": growth}
    _write_json(out / "bench.json", result)
    table = format_table(rows, (("depth", "depth", "{}"),) + COST_COLUMNS)
    _write(out / "bench.txt", table)
    print(table)
    return result


def _load_json(path: Path):
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None


def cmd_report(cfg: RunConfig) -> dict:
    """Merge train summaries and bench results into one method table.

    One row per method and one pair of accuracy columns per task. Tape bytes
    come from the bench row at the preset's own depth (the deepest row when
    that depth was not swept).
    """
    out = _prepare_dir(cfg)
    root = output_root()
    if not cfg.report.inputs:
        raise ConfigError("report.inputs: list at least one run directory")
    methods: dict[str, dict] = {}
    tasks: set[str] = set()
    for entry in cfg.report.inputs:
        path = Path(entry) if Path(entry).is_absolute() else root / entry
        summary, bench = path / "summary.json", path / "bench.json"
        if not summary.exists() and not bench.exists():
            raise ConfigError(f"report.inputs: {path} holds neither summary.json nor bench.json")
        if summary.exists():
            s = _load_json(summary)
            row = methods.setdefault(s["method"], {"method": s["method"]})
            row["trainable_params"] = s["trainable_params"]
            row["trainable_percent"] = s["trainable_percent"]
            tasks.add(s["task"])
            row[f"{s['task']}_token_acc"] = s["metrics"]["test_token_acc"]
            row[f"{s['task']}_seq_acc"] = s["metrics"]["test_seq_acc"]
            if s.get("energy_kwh") is not None:
                row["energy_kwh"] = row.get("energy_kwh", 0.0) + s["energy_kwh"]
        if bench.exists():
            b = _load_json(bench)
            at_base = [r for r in b["rows"] if r["depth"] == b.get("base_depth")]
            for r in at_base or sorted(b["rows"], key=lambda r: r["depth"]):
                row = methods.setdefault(r["method"], {"method": r["method"]})
                row.setdefault("trainable_params", r["trainable_params"])
                row.setdefault("trainable_percent", r["trainable_percent"])
                if r.get("tape_bytes") is not None:
                    row["tape_bytes"] = r["tape_bytes"]

    task_cols = []
    for task in sorted(tasks):
        task_cols += [(f"{task}_token_acc", f"{task} tok acc", "{:.4f}"),
                      (f"{task}_seq_acc", f"{task} seq acc", "{:.4f}")]
    columns = ([("method", "method", "{}"), ("trainable_params", "trainable", "{:,}"),
                ("trainable_percent", "trainable %", "{:.3f}")] + task_cols
               + [("tape_bytes", "tape bytes", "{:,}"), ("energy_kwh", "energy kWh", "{:.6g}")])
    rows = [methods[k] for k in sorted(methods)]
    keys = [key for key, _, _ in columns]
    _write(out / "report.csv", _csv_text(keys, [[r.get(k) for k in keys] for r in rows]))
    _write_json(out / "report.json", {"columns": keys, "rows": rows})
    table = format_table(rows, columns)
    _write(out / "report.txt", table)
    print(table)
    return {"columns": keys, "rows": rows}


COMMANDS = {"verify": cmd_verify, "train": cmd_train, "bench": cmd_bench, "report": cmd_report}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="read-forge", description=__doc__.split("\n\n")[0])
    parser.add_argument("mode", choices=MODES, help="command to run")
    parser.add_argument("--config", required=True, help="path to a JSON run config")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a dotted config path (repeatable)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.overrides, mode=args.mode)
        COMMANDS[cfg.mode](cfg)
    except ConfigError as exc:
        print(f"read-forge: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ToleranceFailure as exc:
        print("read-forge: tolerance failure:", file=sys.stderr)
        for item in exc.failures:
            print(f"  - {item}", file=sys.stderr)
        return EXIT_TOLERANCE
    except ReadForgeError as exc:
        print(f"read-forge: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, KeyError, ValueError) as exc:
        print(f"read-forge: runtime failure: {exc!r}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
