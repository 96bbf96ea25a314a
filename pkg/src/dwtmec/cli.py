"""Command-line entry point: ``dwtmec {gradcheck,train,eval,ablate}``.

Exit codes: 0 success, 1 check failure or aborted run, 2 configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import gradcheck
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config, make_datasets
from .data import FormatError, load_idx
from .metrics import MetricsWriter, accuracy, confusion_matrix
from .tensor import ShapeError
from .train import NonFiniteLossError, _prepare, eval_domain, train_loop
from .whitening import Domain

log = logging.getLogger("dwtmec")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


# ------------------------------------------------------------- gradcheck

def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    results = gradcheck.run_all(args.seeds)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - t0:.1f}s")
    if failed:
        print("FAILED: " + ", ".join(failed))
        return EXIT_FAIL
    return EXIT_OK


# ----------------------------------------------------------------- train

def _out_dir(cfg: RunConfig, override) -> Path:
    out = Path(override or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def run_training(cfg: RunConfig, seed: int, out: Path, datasets=None, metrics_name="metrics.csv"):
    """Train one seed, streaming metrics to ``out``; returns the record."""
    datasets = datasets or make_datasets(cfg.data)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(metrics_name).stem
    times = []
    t0 = time.perf_counter()

    with MetricsWriter(out / metrics_name) as writer:
        def on_row(row):
            writer.write(row)
            times.append({"epoch": row.epoch, "wall_time": time.perf_counter() - t0})

        try:
            record = train_loop(cfg.train, datasets, seed, perturb=cfg.perturb, on_row=on_row)
        finally:
            # wall-clock time lives in a sidecar so the metrics file stays reproducible
            (out / f"{stem}.timing.json").write_text(json.dumps(times, indent=1))
    return record, datasets


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    out = _out_dir(cfg, args.out)
    try:
        record, datasets = run_training(cfg, seed, out)
    except NonFiniteLossError as err:
        dump = out / "nonfinite_dump.json"
        dump.write_text(json.dumps({"error": str(err), **err.diagnostics}, indent=1, default=str))
        print(f"aborted: {err}; diagnostics written to {dump}", file=sys.stderr)
        return EXIT_FAIL
    net = record.teacher.net if record.teacher is not None else record.net
    src = datasets["source"]
    n_classes = int(max(src.labels.max(), datasets["target_test"].labels.max())) + 1
    save_checkpoint(out / "model.ckpt", net, cfg.train, src.inputs.shape[1:], n_classes,
                    extra={"seed": seed, "data": dataclasses.asdict(cfg.data)})
    print(f"final target accuracy: {100 * record.final_target_acc:.2f}%  ({out / 'metrics.csv'})")
    return EXIT_OK


# ------------------------------------------------------------------ eval

def _eval_data(spec: str):
    if spec.startswith("idx:"):
        try:
            images, labels = spec[4:].split(",")
        except ValueError:
            raise ConfigError(f"--data idx spec must be 'idx:<images>,<labels>', got {spec!r}") from None
        return load_idx(images, labels, Domain.TARGET)
    return make_datasets(load_config(spec).data)["target_test"]


def cmd_eval(args) -> int:
    net, cfg, header = load_checkpoint(args.checkpoint)
    data = _eval_data(args.data)
    if tuple(data.inputs.shape[1:]) != tuple(header["input_shape"]):
        raise ConfigError(f"data shape {data.inputs.shape[1:]} does not match checkpoint {header['input_shape']}")
    dom = eval_domain(cfg.variant)
    lp = net.predict_log_proba(_prepare(data.inputs, net), domain=dom)
    acc = accuracy(lp, data.labels)
    print(f"samples: {len(data)}  statistics: {dom.value}  accuracy: {100 * acc:.2f}%")
    print("confusion matrix (rows = true class):")
    print(confusion_matrix(lp, data.labels, header["n_classes"]))
    return EXIT_OK


# ---------------------------------------------------------------- ablate

def _int_list(text: str):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def skip_reason(cfg: RunConfig, g: int, n_dwt: int) -> str | None:
    widths = list(cfg.train.hidden if cfg.train.arch == "mlp" else cfg.train.channels)
    if n_dwt > len(widths):
        return f"only {len(widths)} normalised layers"
    bad = [w for w in widths[:n_dwt] if w % g]
    if bad:
        return f"g={g} does not divide width {bad[0]}"
    return None


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(cfg, args.out)
    seeds = tuple(args.seeds) if args.seeds else tuple(cfg.seeds)
    datasets = make_datasets(cfg.data)
    summary = []
    for g in args.groups:
        for n_dwt in args.layers:
            reason = skip_reason(cfg, g, n_dwt)
            if reason:
                print(f"g={g} n_dwt={n_dwt}: skipped ({reason})")
                summary.append((g, n_dwt, "skipped: " + reason, []))
                continue
            cell = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, g=g, n_dwt=n_dwt))
            accs = []
            for s in seeds:
                record, _ = run_training(cell, s, out / f"g{g}_dwt{n_dwt}", datasets, f"seed{s}.csv")
                accs.append(record.final_target_acc)
            print(f"g={g} n_dwt={n_dwt}: mean target accuracy {100 * np.mean(accs):.2f}% "
                  f"over seeds {list(seeds)}")
            summary.append((g, n_dwt, "ok", accs))
    write_summary(out / "summary.csv", summary, seeds)
    print(f"summary: {out / 'summary.csv'}")
    return EXIT_OK


def write_summary(path, summary, seeds):
    lines = ["g,n_dwt,status,mean_target_acc,std_target_acc," + ",".join(f"seed{s}" for s in seeds)]
    for g, n_dwt, status, accs in sorted(summary, key=lambda r: (r[0], r[1])):
        if accs:
            cells = [repr(float(np.mean(accs))), repr(float(np.std(accs)))] + [repr(float(a)) for a in accs]
        else:
            cells = [""] * (2 + len(seeds))
        lines.append(",".join([str(g), str(n_dwt), status] + cells))
    Path(path).write_text("\n".join(lines) + "\n")


def read_summary(path) -> dict:
    """``{(g, n_dwt): list of per-seed accuracies}``; skipped cells map to ``None``."""
    import csv

    out = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            key = (int(rec["g"]), int(rec["n_dwt"]))
            if rec["status"] != "ok":
                out[key] = None
            else:
                out[key] = [float(v) for k, v in rec.items() if k.startswith("seed")]
    return out


# ------------------------------------------------------------------ main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dwtmec", description="Domain-specific whitening + min-entropy consensus")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    gc.add_argument("--seeds", type=int, default=20)
    gc.set_defaults(func=cmd_gradcheck)

    tr = sub.add_parser("train", help="train one model from a config file")
    tr.add_argument("--config", required=True)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--out")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True, help="config file or idx:<images>,<labels>")
    ev.set_defaults(func=cmd_eval)

    ab = sub.add_parser("ablate", help="sweep group size and number of whitening layers")
    ab.add_argument("--config", required=True)
    ab.add_argument("--groups", type=_int_list, default=[1, 2, 4, 8])
    ab.add_argument("--layers", type=_int_list, default=[1, 2, 3])
    ab.add_argument("--seeds", type=_int_list)
    ab.add_argument("--out")
    ab.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, FormatError, ShapeError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
