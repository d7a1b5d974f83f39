"""Training loop with periodic checkpoints, checkpoint averaging and NDJSON metrics."""

from __future__ import annotations

import json
import logging
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ..checkpoint import save_checkpoint
from ..model import Model, build
from ..tensor import NonFiniteError, backward
from .optim import AdamState, adam_step, clip_global_norm, inverse_sqrt_lr
from .tasks import Task

log = logging.getLogger(__name__)

METRICS_FILE = "metrics.ndjson"
FINAL_MODEL = "model.ckpt"


class NumericFailure(RuntimeError):
    """Loss or gradients stayed non-finite for too many consecutive steps."""


@dataclass
class TrainConfig:
    task: str = "copy"
    steps: int = 3000
    batch: int = 32
    lr: float = 1e-3
    warmup: int = 400
    seed: int = 1
    checkpoint_interval: int = 100
    eval_interval: int = 250
    average_last_k: int = 5
    clip_norm: float = 1.0
    eval_examples: int = 256
    stop_at: float | None = None
    max_bad_steps: int = 20

    def __post_init__(self):
        if self.average_last_k < 1:
            raise ValueError("average_last_k must be >= 1")
        for name in ("steps", "batch", "warmup", "checkpoint_interval", "eval_interval", "eval_examples"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class TrainResult:
    model: Model
    records: list[dict]
    final_metrics: dict
    steps_run: int
    skipped: int
    checkpoints: list[str] = field(default_factory=list)


def average_checkpoints(states: list[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Elementwise mean, accumulated as offsets from the first state.

    Identical inputs therefore come back bit-identical, and ``k = 1`` returns
    the single state unchanged.
    """
    if not states:
        raise ValueError("no checkpoints to average")
    first = states[0]
    k = len(states)
    out = {}
    for name, base in first.items():
        acc = np.zeros_like(base)
        for s in states[1:]:
            acc += s[name] - base
        out[name] = base + acc / k
    return out


def strip_timing(records: list[dict]) -> list[dict]:
    """Records without the wall-clock field, for determinism comparisons."""
    return [{k: v for k, v in r.items() if k != "wall_ms"} for r in records]


def _eval_model(template: Model, state: dict[str, np.ndarray]) -> Model:
    m = build(template.config, seed=0)
    m.load_arrays(state)
    return m


def train_loop(model: Model, task: Task, cfg: TrainConfig, out_dir: str | Path | None = None,
               progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Train ``model`` in place; the returned model is the average of the last ``k`` checkpoints.

    A metrics record is produced at step 1 and every ``eval_interval`` steps,
    scoring the current checkpoint average on the held-out split.  With
    ``cfg.stop_at`` set, training ends at the first evaluation whose averaged
    model reaches it.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create output directory {out}: {exc}") from exc
    params = model.parameters()
    state = AdamState.zeros_like(params)
    batches = task.batches(cfg.seed, cfg.batch, "train")
    model.rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 99]))
    recent: deque[dict[str, np.ndarray]] = deque(maxlen=cfg.average_last_k)
    records: list[dict] = []
    written: list[str] = []
    meta = {"model_config": model.config.to_dict(), "task": task.describe(), "train_config": asdict(cfg)}
    metrics_fh = open(out / METRICS_FILE, "w") if out is not None else None
    t0 = time.perf_counter()
    losses: list[float] = []
    bad_run = 0
    skipped = 0
    final_metrics: dict = {}
    averaged = None
    step = 0
    try:
        for step in range(1, cfg.steps + 1):
            batch = next(batches)
            model.training = True
            model.zero_grad()
            try:
                loss = task.loss(model, batch)
                backward(loss)
                grads = [p.grad for p in params]
                ok = np.isfinite(loss.item())
            except NonFiniteError as exc:
                log.warning("step %d: %s; update skipped", step, exc)
                ok = False
            finally:
                model.training = False
            if ok:
                clip_global_norm(grads, cfg.clip_norm)
                before = state.skipped
                adam_step(params, grads, state, inverse_sqrt_lr(step, cfg.lr, cfg.warmup))
                ok = state.skipped == before
            if not ok:
                skipped += 1
                bad_run += 1
                if bad_run > cfg.max_bad_steps:
                    raise NumericFailure(f"non-finite loss for {bad_run} consecutive steps (last step {step})")
                continue
            bad_run = 0
            losses.append(loss.item())

            last = step == cfg.steps
            if step % cfg.checkpoint_interval == 0 or step % cfg.eval_interval == 0 or last:
                snap = model.state_arrays()
                recent.append(snap)
                if out is not None:
                    path = out / f"ckpt_{step:06d}.ckpt"
                    save_checkpoint(path, snap, {**meta, "step": step})
                    written.append(str(path))
            if step == 1 or step % cfg.eval_interval == 0 or last:
                averaged = average_checkpoints(list(recent)) if recent else model.state_arrays()
                metrics = task.evaluate(_eval_model(model, averaged), cfg.seed, "eval", cfg.eval_examples)
                value = float(metrics[task.metric])
                rec = {"step": step, "loss": float(np.mean(losses)), "metric_name": task.metric,
                       "metric_value": value, "wall_ms": int(round(1000 * (time.perf_counter() - t0)))}
                losses = []
                records.append(rec)
                final_metrics = metrics
                if metrics_fh is not None:
                    metrics_fh.write(json.dumps(rec) + "\n")
                    metrics_fh.flush()
                if progress is not None:
                    progress(rec)
                if cfg.stop_at is not None and step > 1 and task.meets(value, cfg.stop_at):
                    break
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    if averaged is None:
        averaged = model.state_arrays()
    final = _eval_model(model, averaged)
    if out is not None:
        save_checkpoint(out / FINAL_MODEL, averaged, {**meta, "step": step, "averaged": len(recent) or 1})
    return TrainResult(model=final, records=records, final_metrics=final_metrics, steps_run=step,
                       skipped=skipped, checkpoints=written)


def evaluate(model: Model, task: Task, split: str = "eval", seed: int = 1, n_examples: int = 256) -> dict:
    """Held-out metrics: token accuracy (copy), accuracy (toy_sva), perplexity (char_lm)."""
    return task.evaluate(model, seed, split, n_examples)
