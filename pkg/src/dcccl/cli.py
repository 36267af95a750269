"""Command-line experiment runner.

    dcccl run <config> --out <dir> [--seed N] [--no-timestamp]
    dcccl report-sizes <config>
    dcccl inspect <checkpoint>

``<config>`` is a YAML file or the name of a bundled preset
(feasibility, main, hetero, alpha_sweep).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as _dt
import io
import json
import logging
import math
import sys
import traceback
from pathlib import Path
from typing import Optional, Sequence

from . import simnet
from .config import ConfigError, ExperimentConfig, dump_resolved, parse_config
from .model import build_model, count_flops, count_params
from .serialize import CheckpointError, read_checkpoint, save_checkpoint

log = logging.getLogger("dcccl")

SCHEMA_VERSION = 1

# Column -> description. The order here is the column order in metrics.csv.
METRICS_COLUMNS = {
    "schema_version": "metrics CSV schema version (int)",
    "run_id": "index and matrix coordinates of the run",
    "matrix": "JSON object of the matrix coordinates",
    "method": "training method",
    "seed": "experiment seed (int)",
    "status": "'ok' or 'error'",
    "accuracy": "headline full-test accuracy (decoupled mode for decoupled models)",
    "acc_decoupled": "cloud + co logits accuracy",
    "acc_device_side": "control + co logits accuracy",
    "acc_cloud_only": "cloud submodel alone",
    "acc_co_only": "co-submodel alone",
    "acc_cloud_classes": "headline accuracy restricted to cloud-side classes",
    "acc_device_classes": "headline accuracy restricted to device-side classes",
    "acc_before_finetune": "headline accuracy before classifier finetuning",
    "uplink_bytes": "total device -> cloud bytes (int)",
    "downlink_bytes": "total cloud -> device bytes (int)",
    "setup_bytes": "one-time setup downloads (int)",
    "per_round_bytes": "bytes exchanged in round 1 (int)",
    "finetune_bytes": "feature transfer + classifier sync bytes (int)",
    "rounds": "collaborative rounds (int)",
    "device_side_params": "encoder + co + control parameters (int)",
    "device_side_flops": "per-sample FLOPs of encoder + co + control (int)",
    "cloud_side_params": "encoder + cloud + co parameters (int)",
    "base_params": "parameters of the undivided base model (int)",
    "base_flops": "per-sample FLOPs of the base model (int)",
    "phase12_digest": "sha256 of encoder, cloud and control parameters after phases 1-2",
    "wall_seconds": "run wall-clock time (blank with --no-timestamp)",
    "timestamp": "UTC start time (blank with --no-timestamp)",
    "error": "error message for failed runs",
}
INT_COLUMNS = {"schema_version", "seed", "uplink_bytes", "downlink_bytes", "setup_bytes", "per_round_bytes",
               "finetune_bytes", "rounds", "device_side_params", "device_side_flops", "cloud_side_params",
               "base_params", "base_flops"}
FLOAT_COLUMNS = {c for c in METRICS_COLUMNS if c.startswith("acc")} | {"wall_seconds"}

TRACE_COLUMNS = [f.name for f in dataclasses.fields(simnet.RoundTrace)]
SIZE_COLUMNS = ["run_id", "method", "alpha_cl", "alpha_co", "heterogeneous", "base_params", "base_flops",
                "decoupled_params", "decoupled_flops", "device_side_params", "device_side_flops",
                "encoder_params", "co_params", "control_params", "device_to_base_percent"]


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)  # shortest round-tripping form
    return str(v)


def _write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in columns])
    path.write_text(buf.getvalue())


def read_metrics(path) -> list[dict]:
    """Parse a metrics CSV back into typed values (ints, floats, strings; blanks -> None)."""
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    out = []
    for r in rows:
        if int(r["schema_version"]) != SCHEMA_VERSION:
            raise ValueError(f"unsupported metrics schema {r['schema_version']}")
        typed = {}
        for k, v in r.items():
            if v == "":
                typed[k] = None
            elif k in INT_COLUMNS:
                typed[k] = int(v)
            elif k in FLOAT_COLUMNS:
                typed[k] = float(v)
            else:
                typed[k] = v
        out.append(typed)
    return out


# ---------------------------------------------------------------------------
# size report


def size_row(cfg: ExperimentConfig, run_id: str = "") -> dict:
    """Base vs decoupled vs device-side parameter and FLOP counts for one config (no training)."""
    base = build_model(simnet.base_spec(cfg))
    dm = simnet.build_decoupled(cfg)
    enc, cloud, co, ctl = dm.encoder, dm.cloud, dm.co, dm.control
    dev = count_params(enc) + count_params(co) + count_params(ctl)
    bp = count_params(base)
    return {
        "run_id": run_id, "method": cfg.method, "alpha_cl": cfg.model.alpha_cl, "alpha_co": cfg.model.alpha_co,
        "heterogeneous": cfg.model.heterogeneous, "base_params": bp, "base_flops": count_flops(base),
        "decoupled_params": count_params(enc) + count_params(cloud) + count_params(co),
        "decoupled_flops": count_flops(enc) + count_flops(cloud) + count_flops(co),
        "device_side_params": dev,
        "device_side_flops": count_flops(enc) + count_flops(co) + count_flops(ctl),
        "encoder_params": count_params(enc), "co_params": count_params(co), "control_params": count_params(ctl),
        "device_to_base_percent": 100.0 * dev / bp,
    }


def format_sizes(rows: Sequence[dict]) -> str:
    cols = ["run_id", "alpha_cl", "alpha_co", "base_params", "decoupled_params", "device_side_params",
            "base_flops", "device_side_flops", "device_to_base_percent"]
    table = [[r["run_id"], r["alpha_cl"], r["alpha_co"], f"{r['base_params']:,}", f"{r['decoupled_params']:,}",
              f"{r['device_side_params']:,}", f"{r['base_flops']:,}", f"{r['device_side_flops']:,}",
              f"{r['device_to_base_percent']:.2f}"] for r in rows]
    widths = [max(len(str(x)) for x in [c] + [t[i] for t in table]) for i, c in enumerate(cols)]
    lines = ["  ".join(str(c).rjust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(str(x).rjust(w) for x, w in zip(t, widths)) for t in table]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# runs


def run_experiments(configs: Sequence[ExperimentConfig], output_dir, timestamp: bool = True,
                    checkpoints: bool = True) -> int:
    """Run every config, writing metrics/traces/sizes/checkpoints; returns the exit status."""
    out = Path(output_dir)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    if checkpoints:
        (out / "checkpoints").mkdir(exist_ok=True)
    (out / "resolved_config.yaml").write_text(dump_resolved(list(configs)))

    rows, size_rows, failures = [], [], 0
    for i, cfg in enumerate(configs):
        run_id = cfg.run_id(i)
        started = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
        log.info("run %s (%s, seed %d)", run_id, cfg.method, cfg.seed)
        try:
            size_rows.append(size_row(cfg, run_id))
            res = simnet.run_method(cfg)
            row = dataclasses.asdict(res.metrics)
            if res.traces:
                _write_csv(out / "traces" / f"{run_id}.csv", TRACE_COLUMNS,
                           [dataclasses.asdict(t) for t in res.traces])
            if checkpoints and res.model is not None:
                save_checkpoint(res.model, out / "checkpoints" / f"{run_id}.ckpt")
        except Exception as e:  # a failed run becomes an error row; the matrix continues
            failures += 1
            log.error("run %s failed: %s", run_id, e)
            log.debug("%s", traceback.format_exc())
            row = dataclasses.asdict(simnet.MetricsRecord(cfg.method, cfg.seed, status="error",
                                                          error=f"{type(e).__name__}: {e}"))
        row.update(schema_version=SCHEMA_VERSION, run_id=run_id,
                   matrix=json.dumps(cfg.labels, sort_keys=True, default=str))
        if timestamp:
            row["timestamp"] = started
        else:
            row["timestamp"] = row["wall_seconds"] = None
        for k, v in row.items():
            if isinstance(v, float) and math.isnan(v) and k in FLOAT_COLUMNS - {"wall_seconds"}:
                row[k] = None
        rows.append(row)

    _write_csv(out / "metrics.csv", list(METRICS_COLUMNS), rows)
    _write_csv(out / "sizes.csv", SIZE_COLUMNS, size_rows)
    (out / "sizes.txt").write_text(format_sizes(size_rows))
    return 1 if configs and failures == len(configs) else 0


# ---------------------------------------------------------------------------
# inspect


def describe_checkpoint(path) -> str:
    spec, parts = read_checkpoint(path)
    lines = [f"checkpoint: {path}", f"type: {spec['type']}"]
    if spec["type"] == "decoupled":
        lines.append(f"classes: {spec['num_classes']}  heterogeneous: {spec['heterogeneous']}  "
                     f"stage: {spec['stage']}")
        chains = spec["parts"]
    else:
        chains = {"model": spec["chain"]}
    total = 0
    for name, chain in chains.items():
        n = sum(a.size for a in parts[name])
        total += n
        lines.append(f"[{name}] input {tuple(chain['input_shape'])}, {n:,} parameters")
        for layer in chain["layers"]:
            extra = ", ".join(f"{k}={v}" for k, v in layer.items() if k != "kind")
            lines.append(f"    {layer['kind']}" + (f"({extra})" if extra else ""))
    lines.append(f"total parameters: {total:,}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dcccl", description="Device-cloud collaborative learning experiments")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a config (or matrix) and write metrics")
    r.add_argument("config", help="YAML config path or bundled preset name")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--seed", type=int, default=None, help="override the seed (drops a seed matrix axis)")
    r.add_argument("--no-timestamp", action="store_true",
                   help="leave timestamp and wall-clock columns blank for byte-identical reruns")
    r.add_argument("--no-checkpoints", action="store_true", help="skip writing model checkpoints")

    s = sub.add_parser("report-sizes", help="print base/decoupled/device-side sizes without training")
    s.add_argument("config")
    s.add_argument("--csv", action="store_true", help="emit CSV instead of a text table")

    i = sub.add_parser("inspect", help="describe a checkpoint file")
    i.add_argument("checkpoint")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            configs = parse_config(args.config, args.seed)
            return run_experiments(configs, args.out, timestamp=not args.no_timestamp,
                                   checkpoints=not args.no_checkpoints)
        if args.command == "report-sizes":
            configs = parse_config(args.config)
            rows = [size_row(c, c.run_id(i)) for i, c in enumerate(configs)]
            if args.csv:
                buf = io.StringIO()
                w = csv.writer(buf, lineterminator="\n")
                w.writerow(SIZE_COLUMNS)
                w.writerows([[_cell(r[c]) for c in SIZE_COLUMNS] for r in rows])
                sys.stdout.write(buf.getvalue())
            else:
                sys.stdout.write(format_sizes(rows))
            return 0
        sys.stdout.write(describe_checkpoint(args.checkpoint))
        return 0
    except (ConfigError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
