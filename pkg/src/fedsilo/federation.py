"""Synchronous cross-silo training: FedAvg with a global learning rate, and
client-adaptive training with per-client affine transforms."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .data import ClientDataset, EvalSplit, RoundShard, iter_batches, shard_epoch
from .errors import ConfigError, RejectedInput
from .model import (AnnealSchedule, LabeledBatch, ModelSpec, OptimizerState, ParamVector, anneal, init_params,
                    loss_and_grad, mean_loss, sgd_step)
from .numkit import Rng
from .transform import AffineTransform, TransformOptConfig, apply, estimate, fresh_state
from .transport import InProcessChannel, MessageKind, RoundMessage, channel_exchange, load_checkpoint

log = logging.getLogger(__name__)

MODES = ("fedavg", "caft", "caft_pt")


@dataclass(frozen=True)
class WeightStrategy:
    """How the per-client weights p_i of the global objective are chosen.

    ``kind`` is ``"equal"``, ``"proportional"`` (to sample count) or
    ``"preference"``, which gives ``favored`` client ``favored_weight`` and
    splits the rest evenly.
    """

    kind: str = "equal"
    favored: int | None = None
    favored_weight: float | None = None

    def __post_init__(self):
        if self.kind not in ("equal", "proportional", "preference"):
            raise RejectedInput(f"unknown weighting {self.kind!r}")
        if self.kind == "preference":
            if self.favored is None or self.favored_weight is None:
                raise RejectedInput("preference weighting needs a favored client and weight")
            if not 0.0 < self.favored_weight < 1.0:
                raise RejectedInput(f"preference weight must lie in (0, 1), got {self.favored_weight}")

    @classmethod
    def parse(cls, text: str) -> WeightStrategy:
        """``equal`` | ``proportional`` | ``preference:<client>:<weight>``"""
        parts = str(text).split(":")
        if parts[0] == "preference":
            if len(parts) != 3:
                raise RejectedInput(f"expected preference:<client>:<weight>, got {text!r}")
            return cls("preference", int(parts[1]), float(parts[2]))
        if len(parts) != 1:
            raise RejectedInput(f"unknown weighting {text!r}")
        return cls(parts[0])

    def __str__(self):
        if self.kind == "preference":
            return f"preference:{self.favored}:{self.favored_weight:g}"
        return self.kind


def derive_weights(strategy: WeightStrategy, datasets: Sequence[ClientDataset]) -> list[float]:
    L = len(datasets)
    if L == 0:
        raise RejectedInput("no clients")
    if strategy.kind == "equal":
        return [1.0 / L] * L
    if strategy.kind == "proportional":
        counts = [ds.n for ds in datasets]
        if min(counts) <= 0:
            raise RejectedInput("proportional weighting needs every client to hold data")
        total = sum(counts)
        return [n / total for n in counts]
    ids = [ds.client_id for ds in datasets]
    if strategy.favored not in ids:
        raise RejectedInput(f"favored client {strategy.favored} is not among {ids}")
    if L == 1:
        raise RejectedInput("preference weighting needs at least two clients")
    rest = (1.0 - strategy.favored_weight) / (L - 1)
    return [strategy.favored_weight if cid == strategy.favored else rest for cid in ids]


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 20
    rounds: int = 20
    batch_size: int = 64
    local_lr: float = 0.2
    global_lr: float = 1.0
    momentum: float = 0.9
    weighting: WeightStrategy = field(default_factory=WeightStrategy)
    mode: str = "fedavg"
    anneal_start: int | None = 10
    seed: int = 0
    init_checkpoint: str | None = None
    hidden: tuple[int, ...] = (64, 64)
    num_classes: int = 8
    num_clients: int | None = None
    transform: TransformOptConfig = field(default_factory=TransformOptConfig)
    pt_epochs: int = 10
    pt_anneal_start: int | None = 3
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.weighting, str):
            object.__setattr__(self, "weighting", WeightStrategy.parse(self.weighting))
        if isinstance(self.transform, dict):
            object.__setattr__(self, "transform", TransformOptConfig(**self.transform))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1 or self.rounds < 1 or self.batch_size < 1:
            raise ConfigError("epochs, rounds and batch_size must be positive")
        if not self.global_lr > 0:
            raise ConfigError(f"global learning rate must be positive, got {self.global_lr}")
        if self.local_lr < 0:
            raise ConfigError("local learning rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if not self.hidden:
            raise ConfigError("need at least one hidden layer")
        if self.num_clients is not None and self.num_clients < 1:
            raise ConfigError("need at least one client")
        if self.mode == "caft_pt" and not self.init_checkpoint:
            raise ConfigError("caft_pt mode requires init_checkpoint")
        if self.pt_epochs < 1:
            raise ConfigError("pt_epochs must be positive")

    def model_spec(self, d: int) -> ModelSpec:
        return ModelSpec((d, *self.hidden, self.num_classes))

    def schedule(self) -> tuple[int, AnnealSchedule]:
        """Epoch count and annealing schedule for this mode."""
        if self.mode == "caft_pt":
            return self.pt_epochs, AnnealSchedule(self.pt_anneal_start)
        return self.epochs, AnnealSchedule(self.anneal_start)

    def to_json(self) -> dict:
        out = asdict(self)
        out["weighting"] = str(self.weighting)
        out["hidden"] = list(self.hidden)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> TrainingConfig:
        obj = dict(obj)
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training fields: {sorted(unknown)}")
        try:
            if "transform" in obj:
                obj["transform"] = TransformOptConfig(**obj["transform"])
            if "hidden" in obj:
                obj["hidden"] = tuple(obj["hidden"])
            return cls(**obj)
        except (TypeError, RejectedInput) as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class ClientState:
    client_id: int
    dataset: ClientDataset
    weight: float
    optimizer: OptimizerState
    transform: AffineTransform | None = None
    transform_opt: OptimizerState | None = None
    local_params: ParamVector | None = None
    last_loss: float = float("nan")


@dataclass
class RoundReport:
    epoch: int
    round: int
    local_loss: dict[int, float]
    eval_loss: dict[str, float]
    bytes_up: int
    bytes_down: int
    wall_time: float = 0.0

    def to_json(self, *, include_time: bool = False) -> dict:
        out = {"epoch": self.epoch, "round": self.round,
               "local_loss": {str(k): v for k, v in sorted(self.local_loss.items())},
               "eval_loss": dict(self.eval_loss), "bytes_up": self.bytes_up, "bytes_down": self.bytes_down}
        if include_time:
            out["wall_time"] = self.wall_time
        return out


class TrainingResult(NamedTuple):
    params: ParamVector
    transforms: dict[int, AffineTransform]
    reports: list[RoundReport]


def local_steps(w: ParamVector, X: np.ndarray, y: np.ndarray, opt: OptimizerState, batch_size: int,
                spec: ModelSpec):
    """ceil(n / B) momentum-SGD steps over consecutive batches, the last one possibly short."""
    losses = []
    for sl in iter_batches(y.size, batch_size):
        loss, grad = loss_and_grad(w, LabeledBatch(X[sl], y[sl]), spec)
        w, opt = sgd_step(w, grad, opt)
        losses.append(loss)
    return w, opt, losses


def _check_shard(state: ClientState, w_t: ParamVector, shard: RoundShard):
    if shard.client_id != state.client_id:
        raise RejectedInput(f"shard of client {shard.client_id} handed to client {state.client_id}")
    if len(shard) == 0:
        raise RejectedInput("empty round shard")
    if state.optimizer.velocity.shape != w_t.data.shape:
        raise RejectedInput("client optimizer does not match the global model")


def client_round(state: ClientState, w_t: ParamVector, shard: RoundShard, cfg: TrainingConfig) -> ParamVector:
    """Plain local update: K = ceil(|shard| / B) SGD steps starting from the global model.

    The client's momentum buffer carries over from its previous round.
    """
    _check_shard(state, w_t, shard)
    spec = cfg.model_spec(shard.features.shape[1])
    w, state.optimizer, losses = local_steps(w_t, shard.features, shard.labels, state.optimizer,
                                             cfg.batch_size, spec)
    state.local_params = w
    state.last_loss = float(np.mean(losses))
    return w


def caft_client_round(state: ClientState, w_t: ParamVector, shard: RoundShard, cfg: TrainingConfig,
                      tcfg: TransformOptConfig) -> ParamVector:
    """Re-estimate the client's transform against the frozen ``w_t``, then train on transformed features."""
    _check_shard(state, w_t, shard)
    if state.transform is None or state.transform_opt is None:
        raise RejectedInput(f"client {state.client_id} has no transform")
    state.transform, state.transform_opt, _ = estimate(state.transform, w_t, shard.features, shard.labels,
                                                       tcfg, state.transform_opt)
    spec = cfg.model_spec(shard.features.shape[1])
    X = apply(state.transform, shard.features)
    w, state.optimizer, losses = local_steps(w_t, X, shard.labels, state.optimizer, cfg.batch_size, spec)
    state.local_params = w
    state.last_loss = float(np.mean(losses))
    return w


def fedavg_update(w_t: ParamVector, locals_: Sequence[ParamVector], p: Sequence[float], eta: float,
                  client_ids: Sequence[int] | None = None) -> ParamVector:
    """w_{t+1} = w_t - eta * sum_i p_i (w_t - w_i), summed in ascending client id.

    At ``eta == 1`` this is evaluated as the weighted average sum_i p_i w_i,
    written as ``w_ref + sum_i p_i (w_i - w_ref)`` with ``w_ref`` the
    lowest-id local model. That form has no cancellation against ``w_t`` and
    returns a single client's model, or a consensus of identical models,
    bit for bit.
    """
    if len(locals_) != len(p) or not locals_:
        raise RejectedInput(f"{len(locals_)} local models but {len(p)} weights")
    ids = list(range(len(p))) if client_ids is None else list(client_ids)
    if len(ids) != len(p) or len(set(ids)) != len(ids):
        raise RejectedInput("client ids must be unique and match the local models")
    if min(p) < 0 or abs(math.fsum(p) - 1.0) > 1e-9:
        raise RejectedInput(f"client weights must be non-negative and sum to 1, got {list(p)}")
    for w in locals_:
        if not w.same_manifest(w_t):
            raise RejectedInput("local model manifest differs from the global model")
    order = sorted(range(len(ids)), key=ids.__getitem__)
    if eta == 1.0:
        ref = locals_[order[0]].data
        acc = np.zeros_like(ref)
        for i in order[1:]:
            acc = acc + p[i] * (locals_[i].data - ref)
        # a zero correction leaves the entry untouched (keeps the sign of -0.0)
        return w_t.with_data(np.where(acc == 0.0, ref, ref + acc))
    acc = np.zeros_like(w_t.data)
    for i in order:
        acc = acc + p[i] * (w_t.data - locals_[i].data)
    return w_t.with_data(w_t.data - eta * acc)


def evaluate(w: ParamVector, eval_sets: Sequence[EvalSplit], spec: ModelSpec,
             transforms: dict[int, AffineTransform] | None = None) -> dict[str, float]:
    """Mean cross-entropy per split, passing each split through its owner's transform when one exists."""
    out = {}
    for split in eval_sets:
        X = split.features
        if transforms and split.owner in transforms:
            X = apply(transforms[split.owner], X)
        out[split.name] = mean_loss(w, X, split.labels, spec)
    return out


def initial_model(cfg: TrainingConfig, d: int):
    """Fresh Glorot model, or the checkpoint named in the config (with any stored transforms)."""
    spec = cfg.model_spec(d)
    if cfg.init_checkpoint:
        params, transforms, _ = load_checkpoint(cfg.init_checkpoint)
        if params.manifest != spec.manifest():
            raise ConfigError(f"checkpoint {cfg.init_checkpoint} does not match model {spec.layer_sizes}")
        return params, transforms
    return init_params(spec, Rng(cfg.seed)), {}


def run_training(cfg: TrainingConfig, datasets: Sequence[ClientDataset], eval_sets: Sequence[EvalSplit] = (),
                 *, init: ParamVector | None = None, channel: InProcessChannel | None = None) -> TrainingResult:
    """Server loop: M epochs of T synchronous rounds over all L clients.

    Round reports start with an ``(epoch=0, round=0)`` entry evaluating the
    initial model.
    """
    if not datasets:
        raise RejectedInput("no client datasets")
    if cfg.num_clients is not None and cfg.num_clients != len(datasets):
        raise ConfigError(f"config expects {cfg.num_clients} clients, got {len(datasets)}")
    ids = [ds.client_id for ds in datasets]
    if len(set(ids)) != len(ids):
        raise RejectedInput(f"duplicate client ids {ids}")
    d = datasets[0].dim
    if any(ds.dim != d for ds in datasets):
        raise RejectedInput("clients disagree on feature dimension")
    for ds in datasets:
        if ds.n < cfg.rounds:
            raise RejectedInput(f"client {ds.client_id} holds {ds.n} samples, fewer than T={cfg.rounds}")
        if ds.n and ds.labels.max() >= cfg.num_classes:
            raise RejectedInput(f"client {ds.client_id} has labels beyond {cfg.num_classes} classes")
    spec = cfg.model_spec(d)
    adaptive = cfg.mode in ("caft", "caft_pt")
    tcfg = cfg.transform

    w, stored = initial_model(cfg, d)
    if init is not None:
        if init.manifest != spec.manifest():
            raise RejectedInput("initial model does not match the configured architecture")
        w = init
    weights = derive_weights(cfg.weighting, datasets)
    states = {}
    for ds, p in zip(datasets, weights):
        states[ds.client_id] = ClientState(
            ds.client_id, ds, p, OptimizerState.fresh(w, cfg.momentum, cfg.local_lr),
            transform=stored.get(ds.client_id, AffineTransform.identity(d)) if adaptive else None)
    order = sorted(states)
    channel = channel or InProcessChannel(order)

    def current_transforms():
        return {c: s.transform for c, s in states.items() if s.transform is not None}

    reports = [RoundReport(0, 0, {}, evaluate(w, eval_sets, spec, current_transforms()), 0, 0)]
    n_epochs, schedule = cfg.schedule()
    for m in range(1, n_epochs + 1):
        lr = anneal(cfg.local_lr, m, schedule)
        tlr = anneal(tcfg.learning_rate, m, schedule)
        shards = {}
        for cid, st in states.items():
            # momentum restarts with every epoch's fresh pass over the data
            st.optimizer = OptimizerState.fresh(w, cfg.momentum, lr)
            if adaptive:
                st.transform_opt = fresh_state(d, tcfg).with_lr(tlr)
            shards[cid] = shard_epoch(st.dataset, cfg.rounds, m, cfg.seed)

        for t in range(1, cfg.rounds + 1):
            started = time.perf_counter()

            def client_fn(cid: int, msg: RoundMessage) -> RoundMessage:
                st = states[cid]
                shard = shards[cid][msg.round - 1]
                if adaptive:
                    w_i = caft_client_round(st, msg.payload, shard, cfg, tcfg)
                else:
                    w_i = client_round(st, msg.payload, shard, cfg)
                return RoundMessage(MessageKind.LOCAL_UPDATE, msg.epoch, msg.round, w_i, cid)

            updates, bytes_up, bytes_down = channel_exchange(
                channel, RoundMessage(MessageKind.GLOBAL_MODEL, m, t, w), client_fn, cfg.workers)
            w = fedavg_update(w, [updates[c].payload for c in order], [states[c].weight for c in order],
                              cfg.global_lr, order)
            reports.append(RoundReport(
                m, t, {c: states[c].last_loss for c in order},
                evaluate(w, eval_sets, spec, current_transforms()),
                bytes_up, bytes_down, time.perf_counter() - started))
        log.debug("epoch %d done: eval %s", m, reports[-1].eval_loss)
    return TrainingResult(w, current_transforms(), reports)
