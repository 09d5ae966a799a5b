"""Per-client affine feature transforms estimated against a frozen global model."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import SkewSpec
from .errors import NumericError, RejectedInput
from .model import LabeledBatch, ModelSpec, OptimizerState, ParamVector, forward_backward, momentum_update
from .numkit import DTYPE, identity


@dataclass(frozen=True)
class AffineTransform:
    """``x -> A x + b`` applied row-wise to a feature batch."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=DTYPE)
        b = np.asarray(self.b, dtype=DTYPE).ravel()
        if A.ndim != 2 or A.shape[0] != A.shape[1] or b.shape != (A.shape[0],):
            raise RejectedInput(f"transform shapes A {A.shape}, b {b.shape} are inconsistent")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
            raise NumericError("transform has non-finite entries")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @classmethod
    def identity(cls, d: int) -> AffineTransform:
        return cls(identity(d), np.zeros(d, dtype=DTYPE))

    @property
    def dim(self) -> int:
        return self.b.size

    def flat(self) -> np.ndarray:
        return np.concatenate([self.A.ravel(), self.b])

    @classmethod
    def from_flat(cls, flat, d: int) -> AffineTransform:
        flat = np.asarray(flat, dtype=DTYPE)
        return cls(flat[: d * d].reshape(d, d), flat[d * d:])

    def bit_equal(self, other: AffineTransform) -> bool:
        return self.A.tobytes() == other.A.tobytes() and self.b.tobytes() == other.b.tobytes()


@dataclass(frozen=True)
class TransformOptConfig:
    learning_rate: float = 0.02
    momentum: float = 0.9
    batch_size: int = 1024
    steps_per_round: int | None = None  # None: one pass over the round shard

    def __post_init__(self):
        if self.learning_rate < 0:
            raise RejectedInput("transform learning rate must be non-negative")
        if self.batch_size < 1:
            raise RejectedInput("transform batch size must be positive")
        if self.steps_per_round is not None and self.steps_per_round < 0:
            raise RejectedInput("steps_per_round must be non-negative")

    def effective_batch(self, n: int) -> int:
        # large transform batches are capped at what the shard holds
        return max(1, min(self.batch_size, n))

    def steps_for(self, n: int) -> int:
        if self.steps_per_round is not None:
            return self.steps_per_round
        return math.ceil(n / self.effective_batch(n))


def apply(F: AffineTransform, X) -> np.ndarray:
    X = np.asarray(X, dtype=DTYPE)
    if X.ndim != 2 or X.shape[1] != F.dim:
        raise RejectedInput(f"features of shape {X.shape} do not match a {F.dim}-d transform")
    return X @ F.A.T + F.b


def transform_loss_and_grad(F: AffineTransform, w: ParamVector, X, y, spec: ModelSpec):
    """Loss of the frozen model on ``F(X)`` and its gradient w.r.t. ``(A, b)``."""
    X = np.asarray(X, dtype=DTYPE)
    loss, _, dx = forward_backward(w, apply(F, X), y, spec, input_grad=True)
    return loss, dx.T @ X, dx.sum(axis=0)


def estimate_step(F: AffineTransform, w: ParamVector, batch: LabeledBatch, cfg: TransformOptConfig,
                  state: OptimizerState) -> tuple[AffineTransform, OptimizerState, float]:
    """One momentum-SGD step on ``(A, b)``; the model ``w`` is only read.

    ``state.learning_rate`` is the (possibly annealed) step size; ``cfg``
    supplies the schedule-free settings. Returns the pre-step loss as well.
    """
    d = F.dim
    if state.velocity.shape != (d * d + d,):
        raise RejectedInput("transform optimizer state has the wrong size")
    loss, gA, gb = transform_loss_and_grad(F, w, batch.features, batch.labels, spec_from_manifest(w, d))
    flat, state = momentum_update(F.flat(), np.concatenate([gA.ravel(), gb]), state)
    if not np.all(np.isfinite(flat)):
        raise NumericError("transform update produced non-finite entries")
    return AffineTransform.from_flat(flat, d), state, loss


def spec_from_manifest(w: ParamVector, d: int) -> ModelSpec:
    """Recover the ModelSpec implied by a parameter manifest."""
    blocks = dict(w.manifest)
    sizes = [d]
    k = 0
    while f"W{k}" in blocks:
        out_dim, in_dim = blocks[f"W{k}"]
        if in_dim != sizes[-1]:
            raise RejectedInput(f"layer W{k} expects {in_dim} inputs, transform emits {sizes[-1]}")
        sizes.append(out_dim)
        k += 1
    return ModelSpec(tuple(sizes))


def fresh_state(d: int, cfg: TransformOptConfig) -> OptimizerState:
    return OptimizerState.fresh(d * d + d, cfg.momentum, cfg.learning_rate)


def estimate(F: AffineTransform, w: ParamVector, X, y, cfg: TransformOptConfig, state: OptimizerState,
             steps: int | None = None):
    """Run ``steps`` transform updates over consecutive batches of ``(X, y)``, cycling if needed."""
    X = np.asarray(X, dtype=DTYPE)
    y = np.asarray(y, dtype=np.int64)
    n = y.size
    if n == 0:
        raise RejectedInput("cannot estimate a transform from zero samples")
    steps = cfg.steps_for(n) if steps is None else steps
    bs = cfg.effective_batch(n)
    losses = []
    for k in range(steps):
        start = (k * bs) % n
        sl = slice(start, min(start + bs, n))
        F, state, loss = estimate_step(F, w, LabeledBatch(X[sl], y[sl]), cfg, state)
        losses.append(loss)
    return F, state, losses


def compose_check(F: AffineTransform, spec: SkewSpec) -> float:
    """How far ``F`` is from undoing the skew ``x -> G x + c`` (0 means exact inverse)."""
    if F.dim != spec.dim:
        raise RejectedInput("transform and skew dimensions differ")
    d = F.dim
    lin = np.linalg.norm(F.A @ spec.G - identity(d), "fro")
    off = np.linalg.norm(F.A @ spec.c + F.b)
    return float((lin + off) / math.sqrt(d))


def inverse_of(spec: SkewSpec) -> AffineTransform:
    G_inv = np.linalg.inv(spec.G)
    return AffineTransform(G_inv, -G_inv @ spec.c)
