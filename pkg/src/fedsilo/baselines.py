"""Centralized reference trainers that see all client data at once."""

from __future__ import annotations

import time
from typing import Sequence

import numpy as np

from .data import ClientDataset, EvalSplit, shard_epoch
from .errors import RejectedInput
from .federation import RoundReport, TrainingConfig, evaluate, initial_model, local_steps
from .model import AnnealSchedule, OptimizerState, ParamVector, anneal
from .transform import AffineTransform, TransformOptConfig, apply, estimate, fresh_state

POOLED_ID = -1


def pool(datasets: Sequence[ClientDataset], transforms: dict[int, AffineTransform] | None = None) -> ClientDataset:
    """Concatenate client data in list order, optionally passing each client through its transform.

    A single client keeps its own id so its epoch permutations are unchanged.
    """
    if not datasets:
        raise RejectedInput("no datasets to pool")
    feats = []
    for ds in datasets:
        X = ds.features
        if transforms and ds.client_id in transforms:
            X = apply(transforms[ds.client_id], X)
        feats.append(X)
    cid = datasets[0].client_id if len(datasets) == 1 else POOLED_ID
    return ClientDataset(cid, np.concatenate(feats), np.concatenate([ds.labels for ds in datasets]), "pooled")


def _pooled_epoch(w: ParamVector, pooled: ClientDataset, cfg: TrainingConfig, epoch: int, lr: float):
    (shard,) = shard_epoch(pooled, 1, epoch, cfg.seed)
    opt = OptimizerState.fresh(w, cfg.momentum, lr)
    w, _, losses = local_steps(w, shard.features, shard.labels, opt, cfg.batch_size,
                               cfg.model_spec(pooled.dim))
    return w, float(np.mean(losses))


def _report(reports, epoch, loss, w, eval_sets, cfg, d, transforms, started):
    if reports is not None:
        reports.append(RoundReport(epoch, 1, {POOLED_ID: loss},
                                   evaluate(w, eval_sets, cfg.model_spec(d), transforms), 0, 0,
                                   time.perf_counter() - started))


def centralized_train(datasets: Sequence[ClientDataset], cfg: TrainingConfig,
                      eval_sets: Sequence[EvalSplit] = (), reports: list | None = None) -> ParamVector:
    """Momentum SGD over the shuffled union of all client data, same epochs and annealing as FL."""
    pooled = pool(datasets)
    w, _ = initial_model(cfg, pooled.dim)
    schedule = AnnealSchedule(cfg.anneal_start)
    if reports is not None:
        reports.append(RoundReport(0, 0, {}, evaluate(w, eval_sets, cfg.model_spec(pooled.dim)), 0, 0))
    for m in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        w, loss = _pooled_epoch(w, pooled, cfg, m, anneal(cfg.local_lr, m, schedule))
        _report(reports, m, loss, w, eval_sets, cfg, pooled.dim, None, started)
    return w


def cat_train(datasets: Sequence[ClientDataset], cfg: TrainingConfig, tcfg: TransformOptConfig | None = None,
              eval_sets: Sequence[EvalSplit] = (), reports: list | None = None):
    """Centralized client-adaptive training.

    Each epoch first re-estimates every client's transform against the
    current model (one pass over that client's data by default), then runs
    one pooled epoch on the canonicalized data.
    """
    tcfg = tcfg or cfg.transform
    d = datasets[0].dim
    w, stored = initial_model(cfg, d)
    transforms = {ds.client_id: stored.get(ds.client_id, AffineTransform.identity(d)) for ds in datasets}
    schedule = AnnealSchedule(cfg.anneal_start)
    if reports is not None:
        reports.append(RoundReport(0, 0, {}, evaluate(w, eval_sets, cfg.model_spec(d), transforms), 0, 0))
    for m in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        tlr = anneal(tcfg.learning_rate, m, schedule)
        for ds in datasets:
            (shard,) = shard_epoch(ds, 1, m, cfg.seed)
            transforms[ds.client_id], _, _ = estimate(transforms[ds.client_id], w, shard.features,
                                                      shard.labels, tcfg, fresh_state(d, tcfg).with_lr(tlr))
        pooled = pool(datasets, transforms)
        w, loss = _pooled_epoch(w, pooled, cfg, m, anneal(cfg.local_lr, m, schedule))
        _report(reports, m, loss, w, eval_sets, cfg, d, transforms, started)
    return w, transforms
