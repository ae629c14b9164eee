"""Training loop, evaluation, and time-penalty sweeps.

A single-worker run is a pure function of (config, seed): batch data, eval
data, and initialization all derive from independent child seeds of the
run seed, updates apply in a fixed parameter order, and metrics rows
serialize deterministically. The optional shared-parameter mode trades
that reproducibility for wall-clock speed and is opt-in via
train.workers.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .act import ActConfig
from .autodiff import NumericError
from .cells import CellParams, init_params
from .checkpoint import save_checkpoint
from .config import ConfigError, TrainConfig, config_digest, config_text
from .engine import run_batch
from .losses import (LossBreakdown, RunMetrics, binary_cross_entropy,
                     bits_per_character, example_errors,
                     joint_softmax_cross_entropy, ponder_by_difficulty,
                     sequence_error_rate, total_loss)
from .optim import OptimizerState, adam_update, clip_global_norm
from .tasks import (TaskBatch, TaskSpec, gen_addition, gen_logic, gen_parity,
                    gen_sort, gen_text, task_spec)

METRICS_SCHEMA = 1
SWEEP_SCHEMA = "sweep-summary-1"


def resolved_spec(config: TrainConfig) -> TaskSpec:
    if config.task == "parity":
        return task_spec("parity", input_size=config.n_bits)
    return task_spec(config.task)


def load_corpus(config: TrainConfig) -> Optional[bytes]:
    if config.task != "text":
        return None
    if not config.corpus:
        raise ConfigError("task.corpus must point at a byte file for the text task")
    try:
        with open(config.corpus, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read corpus {config.corpus!r}: {exc}") from exc


def make_batch(config: TrainConfig, rng, corpus: Optional[bytes] = None,
               batch_size: Optional[int] = None) -> TaskBatch:
    n = config.batch if batch_size is None else batch_size
    if config.task == "parity":
        return gen_parity(rng, n_bits=config.n_bits, batch=n,
                          count_all_nonzero=config.parity_nonzero)
    if config.task == "logic":
        return gen_logic(rng, batch=n, min_len=config.min_len,
                         max_len=config.max_len)
    if config.task == "addition":
        return gen_addition(rng, batch=n, min_len=config.min_len,
                            max_len=config.max_len,
                            min_digits=config.min_digits,
                            max_digits=config.max_digits)
    if config.task == "sort":
        return gen_sort(rng, batch=n, min_len=config.min_len,
                        max_len=config.max_len)
    return gen_text(corpus, rng, seq_len=config.seq_len, batch=n)


def per_position_nats(spec: TaskSpec, outputs_data: np.ndarray,
                      targets: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """-log p[target] per (example, step), zero where unmasked.

    Mirrors the tape loss exactly (same clamp, same softmax shift) so the
    batch mean of these equals the recorded task loss.
    """
    n_batch, n_steps, _ = outputs_data.shape
    if spec.head == "bce":
        y = outputs_data[:, :, 0]
        t = targets[:, :, 0].astype(np.float64)
        p = np.empty_like(y)
        pos = y >= 0
        p[pos] = 1.0 / (1.0 + np.exp(-y[pos]))
        ey = np.exp(y[~pos])
        p[~pos] = ey / (1.0 + ey)
        nats = -(t * np.log(np.maximum(p, 1e-12))
                 + (1.0 - t) * np.log(np.maximum(1.0 - p, 1e-12)))
    else:
        grouped = outputs_data.reshape(n_batch, n_steps, spec.groups, spec.classes)
        shifted = grouped - grouped.max(axis=3, keepdims=True)
        expd = np.exp(shifted)
        probs = expd / expd.sum(axis=3, keepdims=True)
        picked = np.take_along_axis(probs, targets[..., None], axis=3)[..., 0]
        nats = -np.log(np.maximum(picked, 1e-12)).sum(axis=2)
    return nats * mask


def batch_objective(spec: TaskSpec, params: CellParams, act_cfg: ActConfig,
                    batch: TaskBatch):
    """Forward a batch and assemble the penalized objective on its tape.

    Returns (loss node, run result, LossBreakdown, raw outputs). The loss
    node is the batch mean of per-sequence task loss plus tau times the
    batch mean ponder cost; its constant part (integer update counts) is
    carried in the breakdown, not on the tape.
    """
    res = run_batch(params.kind, params, act_cfg, batch.inputs, batch.lengths)
    n = batch.batch_size
    task_var = None
    for t, y in enumerate(res.outputs):
        mask_t = batch.target_mask[:, t]
        if not mask_t.any():
            continue
        if spec.head == "bce":
            term = binary_cross_entropy(ad.sigmoid(y), batch.targets[:, t, :],
                                        mask_t[:, None])
        else:
            dists = [ad.softmax(ad.narrow(y, 1, g * spec.classes, spec.classes),
                                axis=1) for g in range(spec.groups)]
            term = joint_softmax_cross_entropy(dists, batch.targets[:, t, :], mask_t)
        task_var = term if task_var is None else ad.add(task_var, term)
    if task_var is None:
        task_var = res.tape.leaf(np.zeros(()))
    loss_var = ad.scale(task_var, 1.0 / n)
    if res.ponder_var is not None and act_cfg.time_penalty > 0.0:
        loss_var = ad.add(loss_var,
                          ad.scale(res.ponder_var, act_cfg.time_penalty / n))
    outputs_data = (np.stack([y.data for y in res.outputs], axis=1)
                    if res.outputs else np.zeros((n, 0, spec.output_size)))
    nats = per_position_nats(spec, outputs_data, batch.targets, batch.target_mask)
    breakdown = total_loss(float(task_var.data) / n, res.batch_ponder_sum / n,
                           act_cfg.time_penalty,
                           per_example_task=nats.sum(axis=1),
                           per_example_ponder=res.per_example_ponder)
    return loss_var, res, breakdown, outputs_data


@dataclass
class EvalDetails:
    """Flat per-step and per-example arrays for figure-style analysis."""

    ponders: np.ndarray             # active steps only
    steps: np.ndarray
    difficulties: np.ndarray
    step_errors: np.ndarray         # any wrong group at that step (masked only)
    step_masked: np.ndarray
    example_errors: np.ndarray
    example_ponders: np.ndarray     # per-sequence P(x)
    example_difficulty: np.ndarray  # difficulty at the first step
    nats: np.ndarray                # masked positions only


def evaluate(spec: TaskSpec, params: CellParams, act_cfg: ActConfig,
             batches: list[TaskBatch]) -> tuple[RunMetrics, EvalDetails]:
    ponders, steps, diffs, step_err, step_masked, nats = [], [], [], [], [], []
    ex_err, ex_ponder, ex_diff = [], [], []
    for batch in batches:
        res = run_batch(params.kind, params, act_cfg, batch.inputs, batch.lengths)
        outputs_data = np.stack([y.data for y in res.outputs], axis=1)
        predictions = spec.decode(outputs_data)
        wrong_step = np.any(predictions != batch.targets, axis=2) & batch.target_mask
        active = res.active
        ponders.append(res.ponders[active])
        steps.append(res.steps[active])
        diffs.append(batch.difficulty[active])
        step_err.append(wrong_step[active])
        step_masked.append(batch.target_mask[active])
        batch_nats = per_position_nats(spec, outputs_data, batch.targets,
                                       batch.target_mask)
        nats.append(batch_nats[batch.target_mask])
        ex_err.append(example_errors(predictions, batch.targets, batch.target_mask))
        ex_ponder.append(res.per_example_ponder)
        ex_diff.append(batch.difficulty[:, 0])
    details = EvalDetails(
        np.concatenate(ponders), np.concatenate(steps), np.concatenate(diffs),
        np.concatenate(step_err), np.concatenate(step_masked),
        np.concatenate(ex_err), np.concatenate(ex_ponder),
        np.concatenate(ex_diff), np.concatenate(nats))
    metrics = RunMetrics(
        sequence_error_rate=float(details.example_errors.mean()),
        bits_per_character=(bits_per_character(details.nats)
                            if spec.name == "text" else None),
        mean_ponder=float(details.ponders.mean()),
        std_ponder=float(details.ponders.std()),
        mean_steps=float(details.steps.mean()),
        difficulty_rows=ponder_by_difficulty(
            details.ponders, details.difficulties, steps=details.steps,
            errors=details.step_errors),
    )
    return metrics, details


@dataclass
class TrainResult:
    config: TrainConfig
    params: CellParams
    opt_state: OptimizerState
    metrics: Optional[RunMetrics]
    breakdown: Optional[LossBreakdown]
    rows: list[dict] = field(default_factory=list)
    out_dir: Optional[str] = None
    checkpoint_path: Optional[str] = None


def _metrics_row(iteration: int, breakdown: LossBreakdown,
                 metrics: RunMetrics) -> dict:
    row = {"schema": METRICS_SCHEMA, "iteration": iteration,
           "task_loss": breakdown.task_loss, "ponder_cost": breakdown.ponder_cost,
           "total_loss": breakdown.total}
    row.update(metrics.to_dict())
    return row


def train(config: TrainConfig, out_dir: Optional[str] = None,
          on_row: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Run the full loop: generate, forward, backward, update, log.

    With an out_dir the run directory receives the resolved config, a
    manifest, metrics.jsonl, and checkpoints; a divergent run checkpoints
    its last good state before raising.
    """
    spec = resolved_spec(config)
    corpus = load_corpus(config)
    act_cfg = ActConfig(config.epsilon, config.max_steps, config.tau).validate()
    init_seed, data_seed, eval_seed = np.random.SeedSequence(config.seed).spawn(3)
    params = init_params(config.cell, spec.input_size, config.hidden,
                         spec.output_size, seed=init_seed)
    opt = OptimizerState.for_params(params)

    metrics_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.txt"), "w") as fh:
            fh.write(config_text(config))
        from . import __version__
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            json.dump({"schema": 1, "seed": config.seed,
                       "code_version": __version__,
                       "config_digest": config_digest(config)}, fh)
            fh.write("\n")
        metrics_fh = open(os.path.join(out_dir, "metrics.jsonl"), "w")

    result = TrainResult(config, params, opt, None, None, out_dir=out_dir)
    try:
        if config.workers > 1:
            _train_shared(config, spec, act_cfg, params, opt, corpus, data_seed)
            metrics, _ = evaluate(spec, params, act_cfg,
                                  _eval_batches(config, eval_seed, corpus))
            result.metrics = metrics
        else:
            _train_single(config, spec, act_cfg, params, opt, corpus,
                          data_seed, eval_seed, result, metrics_fh, on_row)
        if out_dir is not None:
            path = os.path.join(out_dir, "ckpt-final.bin")
            save_checkpoint(path, params, opt, config)
            result.checkpoint_path = path
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return result


def _eval_batches(config: TrainConfig, eval_rng, corpus) -> list[TaskBatch]:
    rng = np.random.default_rng(eval_rng)
    return [make_batch(config, rng, corpus) for _ in range(config.eval_batches)]


def _train_single(config, spec, act_cfg, params, opt, corpus, data_seed,
                  eval_seed, result, metrics_fh, on_row) -> None:
    data_rng = np.random.default_rng(data_seed)
    eval_rng = np.random.default_rng(eval_seed)

    def snapshot(iteration):
        return (params.copy(),
                OptimizerState({k: v.copy() for k, v in opt.m.items()},
                               {k: v.copy() for k, v in opt.v.items()}, opt.step),
                iteration)

    last_good = snapshot(0)

    for iteration in range(1, config.iterations + 1):
        batch = make_batch(config, data_rng, corpus)
        try:
            loss_var, res, breakdown, _ = batch_objective(spec, params, act_cfg, batch)
            if not np.isfinite(breakdown.total):
                raise NumericError(f"loss became non-finite at iteration {iteration}")
            res.tape.backward(loss_var)
            grads = {name: res.tape.grad(var)
                     for name, var in res.param_vars.items()}
            if config.clip_norm > 0.0:
                clip_global_norm(grads, config.clip_norm)
            adam_update(params, grads, opt, config.lr, config.beta1,
                        config.beta2, config.adam_eps)
        except NumericError:
            if result.out_dir is not None:
                good_params, good_opt, good_it = last_good
                save_checkpoint(os.path.join(result.out_dir, "ckpt-lastgood.bin"),
                                good_params, good_opt, config)
            raise
        result.breakdown = breakdown

        if iteration % config.eval_every == 0 or iteration == config.iterations:
            metrics, _ = evaluate(spec, params, act_cfg,
                                  [make_batch(config, eval_rng, corpus)
                                   for _ in range(config.eval_batches)])
            result.metrics = metrics
            row = _metrics_row(iteration, breakdown, metrics)
            result.rows.append(row)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(row) + "\n")
            if on_row is not None:
                on_row(row)
            last_good = snapshot(iteration)
        if (result.out_dir is not None and config.checkpoint_every > 0
                and iteration % config.checkpoint_every == 0):
            save_checkpoint(os.path.join(result.out_dir,
                                         f"ckpt-{iteration:07d}.bin"),
                            params, opt, config)


def _train_shared(config, spec, act_cfg, params, opt, corpus, data_seed) -> None:
    """Lock-free shared-parameter training (opt-in, not reproducible).

    Workers apply updates to the shared arrays without synchronization;
    shapes are structurally verified afterwards.
    """
    seeds = data_seed.spawn(config.workers)
    per_worker = config.iterations // config.workers
    extra = config.iterations - per_worker * config.workers
    failures: list[BaseException] = []

    def work(worker_idx: int) -> None:
        rng = np.random.default_rng(seeds[worker_idx])
        n_iters = per_worker + (1 if worker_idx < extra else 0)
        try:
            for _ in range(n_iters):
                batch = make_batch(config, rng, corpus)
                loss_var, res, breakdown, _ = batch_objective(
                    spec, params, act_cfg, batch)
                if not np.isfinite(breakdown.total):
                    raise NumericError("loss became non-finite in shared mode")
                res.tape.backward(loss_var)
                grads = {name: res.tape.grad(var)
                         for name, var in res.param_vars.items()}
                if config.clip_norm > 0.0:
                    clip_global_norm(grads, config.clip_norm)
                adam_update(params, grads, opt, config.lr, config.beta1,
                            config.beta2, config.adam_eps)
        except BaseException as exc:           # surfaced after join
            failures.append(exc)

    threads = [threading.Thread(target=work, args=(i,), daemon=True)
               for i in range(config.workers)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    params.validate()
    for name, arr in params.items():
        assert opt.m[name].shape == arr.shape
        assert opt.v[name].shape == arr.shape
    if failures:
        raise failures[0]


def tau_grid(i_range: tuple[int, int] = (1, 10),
             j_range: tuple[int, int] = (1, 4)) -> list[float]:
    """The logarithmic search grid i * 10^-j, enumerated j-major."""
    return [i * 10.0 ** -j
            for j in range(j_range[0], j_range[1] + 1)
            for i in range(i_range[0], i_range[1] + 1)]


@dataclass
class SweepRow:
    tau: float
    n_runs: int
    n_failed: int
    error_mean: float
    error_stderr: float
    ponder_mean: float
    ponder_stderr: float


def _stderr(values: np.ndarray) -> float:
    if values.size < 2:
        return 0.0
    return float(values.std(ddof=1) / np.sqrt(values.size))


def _sweep_one(args) -> tuple[int, Optional[dict], Optional[str]]:
    idx, config, out_dir = args
    try:
        result = train(config, out_dir=out_dir)
        return idx, {"error": result.metrics.sequence_error_rate,
                     "ponder": result.metrics.mean_ponder}, None
    except Exception as exc:                   # recorded, summary still emitted
        return idx, None, f"{type(exc).__name__}: {exc}"


def sweep(config: TrainConfig, taus: list[float], replicas: int,
          out_dir: Optional[str] = None, workers: int = 1) -> list[SweepRow]:
    """Train `replicas` fresh seeds per time penalty and summarize finals."""
    jobs = []
    for i, tau in enumerate(taus):
        for r in range(replicas):
            run_config = replace(config, tau=tau,
                                 seed=config.seed + i * replicas + r)
            run_dir = (os.path.join(out_dir, f"tau{tau:g}_rep{r}")
                       if out_dir is not None else None)
            jobs.append((i, run_config, run_dir))

    outcomes: dict[int, list[Optional[dict]]] = {i: [] for i in range(len(taus))}
    fails: dict[int, int] = {i: 0 for i in range(len(taus))}
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(job) for job in jobs]
    for idx, final, error in results:
        if final is None:
            fails[idx] += 1
        else:
            outcomes[idx].append(final)

    rows = []
    for i, tau in enumerate(taus):
        finals = outcomes[i]
        errors = np.array([f["error"] for f in finals])
        ponders = np.array([f["ponder"] for f in finals])
        rows.append(SweepRow(
            tau=tau, n_runs=len(finals), n_failed=fails[i],
            error_mean=float(errors.mean()) if errors.size else float("nan"),
            error_stderr=_stderr(errors),
            ponder_mean=float(ponders.mean()) if ponders.size else float("nan"),
            ponder_stderr=_stderr(ponders)))
    if out_dir is not None:
        write_sweep_csv(rows, os.path.join(out_dir, "sweep.csv"))
    return rows


def write_sweep_csv(rows: list[SweepRow], out) -> None:
    """Summary table: one row per time penalty."""
    import csv
    close = False
    if isinstance(out, (str, bytes)):
        out = open(out, "w", newline="")
        close = True
    try:
        out.write(f"# schema: {SWEEP_SCHEMA}\n")
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["tau", "n_runs", "n_failed", "error_mean",
                         "error_stderr", "ponder_mean", "ponder_stderr"])
        for row in rows:
            writer.writerow([repr(row.tau), row.n_runs, row.n_failed,
                             repr(row.error_mean), repr(row.error_stderr),
                             repr(row.ponder_mean), repr(row.ponder_stderr)])
    finally:
        if close:
            out.close()
