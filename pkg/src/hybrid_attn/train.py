"""Training loop, evaluation and metric logging."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .model import AdamW, ModelConfig, TrainConfig, init_params, lr_at, model_forward, \
    routing_stats, train_step
from .tasks import IGNORE, TaskSpec, gen_task, query_accuracy


def batch_for_step(task: TaskSpec, batch, step):
    """Fresh training batch, a pure function of (task.seed, step)."""
    return gen_task(task, batch, seed=np.random.SeedSequence([task.seed, 1, step]))


def eval_batch(task: TaskSpec, n_seqs, seed=None):
    s = task.seed if seed is None else seed
    return gen_task(task, n_seqs, seed=np.random.SeedSequence([s, 2]))


@dataclass
class TrainResult:
    params: nm.ParamStore
    metrics: list = field(default_factory=list)
    final_loss: float = math.nan


def run_training(cfg: ModelConfig, tc: TrainConfig, task: TaskSpec, routing="learned",
                 metrics_path=None, log=None, params=None):
    tc.validate(cfg.block.chunk)
    if task.seq_len != tc.seq_len:
        raise ValueError(f"task.seq_len={task.seq_len} differs from train.seq_len={tc.seq_len}")
    if task.vocab > cfg.vocab:
        raise ValueError(f"task needs vocab >= {task.vocab}, model has {cfg.vocab}")
    P = params if params is not None else init_params(cfg)
    opt = AdamW.from_config(tc)
    out = TrainResult(params=P)
    fh = open(metrics_path, "w") if metrics_path else None
    try:
        for step in range(tc.total_steps):
            tokens, targets = batch_for_step(task, tc.batch, step)
            loss, gnorm, routings = train_step((tokens, targets), P, opt, cfg, tc, step,
                                               routing=routing)
            rec = dict(step=step, loss=round(loss, 6), lr=lr_at(step, tc),
                       grad_norm=round(gnorm, 6),
                       softmax_frac=[round(float(f.mean()), 6) for f in routing_stats(routings)])
            out.metrics.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
            if log and (step % tc.log_every == 0 or step == tc.total_steps - 1):
                log(rec)
            out.final_loss = loss
    finally:
        if fh:
            fh.close()
    return out


def evaluate(P, cfg: ModelConfig, task: TaskSpec, routing="learned", n_seqs=64, seed=None,
             batch=16):
    """Query accuracy, mean loss over scored positions, and per-layer routings."""
    tokens, targets = eval_batch(task, n_seqs, seed)
    correct = total = 0
    loss_sum = 0.0
    routings = []
    for i in range(0, n_seqs, batch):
        tk, tg = tokens[i:i + batch], targets[i:i + batch]
        logits, r, _ = model_forward(tk, P, cfg, routing)
        keep = tg != IGNORE
        n = int(keep.sum())
        acc = query_accuracy(logits, tg)
        correct += acc * n
        total += n
        loss_sum += nm.cross_entropy(logits, tg) * n
        routings.append(r)
    return dict(accuracy=correct / total, loss=loss_sum / total, routings=routings,
                tokens=tokens, n_scored=total)
