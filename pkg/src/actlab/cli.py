"""Command-line entry points.

Commands: train, eval, sweep, gradcheck, gen, trace. Logs go to stderr;
stdout stays silent unless --stdout asks for data on it. Exit codes:
0 ok, 2 configuration error, 3 numeric failure, 4 i/o error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .act import ActConfig, run_sequence
from .autodiff import ContractError, DimensionError, NumericError
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, TrainConfig, parse_config
from .gradcheck import halting_gradient_check
from .losses import PROB_CLAMP
from .tasks import GENERATORS, gen_text, synth_corpus, write_batch_csv
from .trainer import (evaluate, load_corpus, make_batch, per_position_nats,
                      resolved_spec, sweep, tau_grid, train, write_sweep_csv)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

TRACE_COMMAND_SCHEMA = "model-trace-1"

log = logging.getLogger("actlab")


def _add_config_args(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="config file (flat key = value lines)")
    sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="override one config key (repeatable)")
    sub.add_argument("--seed", type=int, help="override train.seed")


def _load_config(args) -> TrainConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    return parse_config(args.config, overrides)


def _cmd_train(args) -> int:
    config = _load_config(args)
    on_row = None
    if args.stdout:
        on_row = lambda row: print(json.dumps(row), flush=True)
    log.info("training task=%s cell=%s hidden=%d tau=%g iterations=%d seed=%d",
             config.task, config.cell, config.hidden, config.tau,
             config.iterations, config.seed)
    result = train(config, out_dir=args.out_dir, on_row=on_row)
    if result.metrics is not None:
        log.info("final: error=%.4f mean_ponder=%.3f",
                 result.metrics.sequence_error_rate, result.metrics.mean_ponder)
    return EXIT_OK


def _cmd_eval(args) -> int:
    config, params, _ = load_checkpoint(args.checkpoint)
    spec = resolved_spec(config)
    corpus = load_corpus(config)
    act_cfg = ActConfig(config.epsilon, config.max_steps, config.tau)
    rng = np.random.default_rng(args.seed)
    batches = [make_batch(config, rng, corpus) for _ in range(args.batches)]
    metrics, details = evaluate(spec, params, act_cfg, batches)
    row = {"schema": 1, "checkpoint": args.checkpoint, "batches": args.batches}
    row.update(metrics.to_dict())
    line = json.dumps(row)
    if args.stdout:
        print(line)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(line + "\n")
    if args.difficulty_csv:
        with open(args.difficulty_csv, "w", newline="") as fh:
            fh.write("# schema: difficulty-table-1\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["difficulty", "count", "mean_ponder", "mean_steps",
                             "mean_error"])
            for r in metrics.difficulty_rows:
                writer.writerow([r.difficulty, r.count, repr(r.mean_ponder),
                                 repr(r.mean_steps), repr(r.mean_error)])
    log.info("eval: %s", line)
    return EXIT_OK


def _cmd_sweep(args) -> int:
    config = _load_config(args)
    if args.taus:
        taus = [float(v) for v in args.taus.split(",") if v]
    else:
        taus = tau_grid()
    rows = sweep(config, taus, args.replicas, out_dir=args.out_dir,
                 workers=args.workers)
    if args.stdout:
        write_sweep_csv(rows, sys.stdout)
    log.info("sweep finished: %d tau values x %d replicas", len(taus),
             args.replicas)
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    config = _load_config(args)
    spec = resolved_spec(config)
    corpus = load_corpus(config)
    act_cfg = ActConfig(config.epsilon, config.max_steps, config.tau)
    rng = np.random.default_rng(config.seed)
    batch = make_batch(config, rng, corpus, batch_size=args.examples)
    from .cells import init_params
    params = init_params(config.cell, spec.input_size, config.hidden,
                         spec.output_size, seed=rng)
    report = halting_gradient_check(params, act_cfg, batch, spec,
                                    max_coords_per_param=args.max_coords,
                                    seed=config.seed)
    payload = {"max_rel_err": report.max_rel_err,
               "coords_checked": report.coords_checked,
               "coords_skipped": len(report.coords_skipped),
               "ponder_closed_form_ok": report.ponder_closed_form_ok,
               "halt_gradient_zero_ok": report.halt_gradient_zero_ok,
               "per_param": report.per_param}
    if args.stdout:
        print(json.dumps(payload))
    log.info("gradcheck: max rel err %.3e over %d coords (%d skipped)",
             report.max_rel_err, report.coords_checked,
             len(report.coords_skipped))
    ok = report.passed and report.max_rel_err < args.tolerance
    if not ok:
        log.error("gradcheck FAILED (tolerance %g)", args.tolerance)
        return EXIT_NUMERIC
    return EXIT_OK


def _cmd_gen(args) -> int:
    if args.task == "corpus":
        blob = synth_corpus(args.seed, size=args.size)
        with open(args.out, "wb") as fh:
            fh.write(blob)
        log.info("wrote %d corpus bytes to %s", len(blob), args.out)
        return EXIT_OK
    if args.task not in GENERATORS:
        raise ConfigError(f"unknown task {args.task!r}; expected one of "
                          f"{sorted(GENERATORS) + ['corpus']}")
    if args.task == "text":
        if not args.corpus:
            raise ConfigError("gen --task text requires --corpus")
        with open(args.corpus, "rb") as fh:
            corpus = fh.read()
        batch = gen_text(corpus, args.seed, seq_len=args.seq_len,
                         batch=args.count)
    else:
        batch = GENERATORS[args.task](args.seed, batch=args.count)
    write_batch_csv(batch, args.out)
    log.info("wrote %d examples to %s", batch.batch_size, args.out)
    return EXIT_OK


def _render_input(task: str, vec: np.ndarray) -> str:
    if task == "parity":
        return "".join("+" if v == 1 else "-" if v == -1 else "." for v in vec)
    if task == "logic":
        gates = [int(np.argmax(vec[2 + 10 * c: 12 + 10 * c])) + 1
                 for c in range(10) if vec[2 + 10 * c: 12 + 10 * c].sum() > 0]
        return f"b0={int(vec[0])} b1={int(vec[1])} gates={gates}"
    if task == "addition":
        digits = [int(np.argmax(vec[10 * i: 10 * i + 10]))
                  for i in range(5) if vec[10 * i: 10 * i + 10].sum() > 0]
        if not digits:
            return "(empty)"
        return "".join(str(d) for d in reversed(digits))
    if task == "sort":
        return f"{vec[0]:+.4f}{'#' if vec[1] == 1 else ''}"
    byte = int(np.argmax(vec)) if vec.sum() > 0 else 0
    ch = chr(byte)
    return ch if ch.isprintable() else f"\\x{byte:02x}"


def _entropy_bits(dist: np.ndarray) -> float:
    p = np.clip(dist, PROB_CLAMP, 1.0)
    return float(-(dist * np.log2(p)).sum())


def _cmd_trace(args) -> int:
    config, params, _ = load_checkpoint(args.checkpoint)
    spec = resolved_spec(config)
    act_cfg = ActConfig(config.epsilon, config.max_steps, config.tau)
    if args.corpus and config.task != "text":
        raise ConfigError(
            f"checkpoint was trained on {config.task!r}, not a byte corpus")
    if config.task == "text" and args.corpus:
        config.corpus = args.corpus
    corpus = load_corpus(config)
    rng = np.random.default_rng(args.seed)
    batch = make_batch(config, rng, corpus, batch_size=args.count)

    rows = []
    for e in range(batch.batch_size):
        t_e = int(batch.lengths[e])
        res = run_sequence(params.kind, params, act_cfg, batch.inputs[e, :t_e])
        outputs = np.stack([y.data[0] for y in res.outputs])[None, :, :]
        nats = per_position_nats(spec, outputs, batch.targets[e:e + 1, :t_e],
                                 batch.target_mask[e:e + 1, :t_e])[0]
        for t, trace in enumerate(res.traces):
            y = outputs[0, t]
            if spec.head == "bce":
                p = 1.0 / (1.0 + math.exp(-float(y[0])))
                dist = np.array([1.0 - p, p])
            else:
                grouped = y.reshape(spec.groups, spec.classes)
                shifted = grouped - grouped.max(axis=1, keepdims=True)
                expd = np.exp(shifted)
                dist = (expd / expd.sum(axis=1, keepdims=True)).ravel()
            rows.append([e, t, _render_input(config.task, batch.inputs[e, t]),
                         trace.steps_taken, repr(trace.ponder),
                         repr(trace.remainder),
                         repr(float(nats[t])) if batch.target_mask[e, t] else "",
                         repr(_entropy_bits(dist)),
                         ";".join(repr(p) for p in trace.halting_probs)])

    out = sys.stdout if args.stdout and not args.out else None
    fh = open(args.out, "w", newline="") if args.out else out
    if fh is None:
        raise ConfigError("trace requires --out or --stdout")
    try:
        fh.write(f"# schema: {TRACE_COMMAND_SCHEMA}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sequence", "t", "input", "steps", "ponder",
                         "remainder", "loss_nats", "entropy_bits", "probs"])
        writer.writerows(rows)
    finally:
        if args.out:
            fh.close()
    log.info("traced %d sequences (%d rows)", batch.batch_size, len(rows))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="actlab",
        description="Adaptive-computation-time recurrent network laboratory")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("train", help="train a model from a config")
    _add_config_args(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--stdout", action="store_true",
                   help="stream metrics rows to stdout")
    p.set_defaults(fn=_cmd_train)

    p = subs.add_parser("eval", help="evaluate a checkpoint on fresh batches")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--batches", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the metrics record here")
    p.add_argument("--difficulty-csv", help="write the per-difficulty table here")
    p.add_argument("--stdout", action="store_true")
    p.set_defaults(fn=_cmd_eval)

    p = subs.add_parser("sweep", help="train replicas over a time-penalty grid")
    _add_config_args(p)
    p.add_argument("--taus", help="comma-separated list; omit for the full grid")
    p.add_argument("--replicas", type=int, default=1)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--stdout", action="store_true")
    p.set_defaults(fn=_cmd_sweep)

    p = subs.add_parser("gradcheck",
                        help="verify model gradients against finite differences")
    _add_config_args(p)
    p.add_argument("--examples", type=int, default=2)
    p.add_argument("--max-coords", type=int, default=None,
                   help="subsample coordinates per parameter")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--stdout", action="store_true")
    p.set_defaults(fn=_cmd_gradcheck)

    p = subs.add_parser("gen", help="dump golden task batches or a corpus")
    p.add_argument("--task", required=True,
                   help="parity|logic|addition|sort|text|corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=16, help="examples per batch")
    p.add_argument("--out", required=True)
    p.add_argument("--corpus", help="byte file for --task text")
    p.add_argument("--seq-len", type=int, default=100)
    p.add_argument("--size", type=int, default=1 << 20,
                   help="bytes for --task corpus")
    p.set_defaults(fn=_cmd_gen)

    p = subs.add_parser("trace",
                        help="per-step ponder/loss/entropy rows for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=1, help="sequences to trace")
    p.add_argument("--corpus", help="byte file override for text checkpoints")
    p.add_argument("--out")
    p.add_argument("--stdout", action="store_true")
    p.set_defaults(fn=_cmd_trace)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr,
                        level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (NumericError, ContractError, DimensionError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except CheckpointError as exc:
        log.error("checkpoint error: %s", exc)
        return EXIT_IO
    except OSError as exc:
        log.error("i/o error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
