"""Feed-forward tanh classifier with hand-written backprop and momentum SGD."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import NumericError, RejectedInput
from .numkit import DTYPE, Rng

Shape = tuple[int, int]


@dataclass(frozen=True)
class ModelSpec:
    layer_sizes: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 3:
            raise RejectedInput("need input, at least one hidden layer, and an output layer")
        if any(s < 1 for s in sizes):
            raise RejectedInput(f"layer sizes must be positive: {sizes}")
        if sizes[-1] < 2:
            raise RejectedInput("need at least two classes")
        if self.activation != "tanh":
            raise RejectedInput(f"unsupported activation {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    def manifest(self) -> tuple[tuple[str, Shape], ...]:
        out = []
        for k, (fan_in, fan_out) in enumerate(zip(self.layer_sizes, self.layer_sizes[1:])):
            out.append((f"W{k}", (fan_out, fan_in)))
            out.append((f"b{k}", (1, fan_out)))
        return tuple(out)


class ParamVector:
    """Flat float64 parameters plus an ordered manifest of named 2-D blocks.

    The data buffer is read-only; updates always build a new ParamVector, so
    instances can be handed between threads freely.
    """

    __slots__ = ("manifest", "data")

    def __init__(self, manifest: Iterable[tuple[str, Sequence[int]]], data):
        manifest = tuple((str(n), (int(s[0]), int(s[1]))) for n, s in manifest)
        names = [n for n, _ in manifest]
        if len(set(names)) != len(names):
            raise RejectedInput(f"duplicate block names in manifest: {names}")
        data = np.array(data, dtype=DTYPE).ravel()
        expected = sum(r * c for _, (r, c) in manifest)
        if data.size != expected:
            raise RejectedInput(f"data has {data.size} entries, manifest needs {expected}")
        if not np.all(np.isfinite(data)):
            bad = int(np.flatnonzero(~np.isfinite(data))[0])
            raise NumericError(f"non-finite parameter at flat index {bad}", coordinate=bad)
        data.setflags(write=False)
        self.manifest = manifest
        self.data = data

    @classmethod
    def from_blocks(cls, blocks: dict[str, np.ndarray]) -> ParamVector:
        manifest = []
        chunks = []
        for name, arr in blocks.items():
            arr = np.asarray(arr, dtype=DTYPE)
            if arr.ndim == 1:
                arr = arr.reshape(1, -1)
            if arr.ndim != 2:
                raise RejectedInput(f"block {name!r} must be 1-D or 2-D")
            manifest.append((name, arr.shape))
            chunks.append(arr.ravel())
        data = np.concatenate(chunks) if chunks else np.zeros(0, dtype=DTYPE)
        return cls(manifest, data)

    def blocks(self) -> dict[str, np.ndarray]:
        """Read-only views of each block, in manifest order."""
        out = {}
        offset = 0
        for name, (r, c) in self.manifest:
            out[name] = self.data[offset:offset + r * c].reshape(r, c)
            offset += r * c
        return out

    def with_data(self, data) -> ParamVector:
        return ParamVector(self.manifest, data)

    def select(self, predicate) -> ParamVector:
        return ParamVector.from_blocks({k: v for k, v in self.blocks().items() if predicate(k)})

    @property
    def size(self) -> int:
        return self.data.size

    def same_manifest(self, other: ParamVector) -> bool:
        return self.manifest == other.manifest

    def bit_equal(self, other: ParamVector) -> bool:
        return self.manifest == other.manifest and self.data.tobytes() == other.data.tobytes()

    def __eq__(self, other):
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.bit_equal(other)

    def __hash__(self):
        return hash((self.manifest, self.data.tobytes()))

    def __repr__(self):
        names = ", ".join(f"{n}{list(s)}" for n, s in self.manifest)
        return f"ParamVector({names}; {self.size} values)"


@dataclass(frozen=True)
class OptimizerState:
    velocity: np.ndarray
    momentum: float
    learning_rate: float

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise RejectedInput(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.learning_rate < 0:
            raise RejectedInput(f"learning rate must be non-negative, got {self.learning_rate}")

    @classmethod
    def fresh(cls, like: ParamVector | int, momentum: float, learning_rate: float) -> OptimizerState:
        n = like if isinstance(like, int) else like.size
        return cls(np.zeros(n, dtype=DTYPE), momentum, learning_rate)

    def with_lr(self, learning_rate: float) -> OptimizerState:
        return replace(self, learning_rate=learning_rate)


@dataclass(frozen=True)
class LabeledBatch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.features, dtype=DTYPE)
        y = np.asarray(self.labels)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise RejectedInput(f"batch shape mismatch: features {x.shape}, labels {y.shape}")
        if x.shape[0] < 1:
            raise RejectedInput("batch must hold at least one sample")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y.astype(np.int64, copy=False))

    def __len__(self):
        return self.features.shape[0]


def init_params(spec: ModelSpec, rng: Rng, *keys) -> ParamVector:
    """Glorot-uniform weights, zero biases."""
    gen = rng.stream("init", *keys)
    blocks = {}
    for name, (r, c) in spec.manifest():
        if name.startswith("W"):
            limit = math.sqrt(6.0 / (r + c))
            blocks[name] = gen.uniform(-limit, limit, size=(r, c))
        else:
            blocks[name] = np.zeros((r, c), dtype=DTYPE)
    return ParamVector.from_blocks(blocks)


def _check(w: ParamVector, x: np.ndarray, y: np.ndarray | None, spec: ModelSpec):
    if w.manifest != spec.manifest():
        raise RejectedInput("parameter manifest does not match model spec")
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise RejectedInput(f"features have shape {x.shape}, model expects (*, {spec.input_dim})")
    if y is not None:
        if y.shape[0] != x.shape[0]:
            raise RejectedInput("features and labels disagree on batch size")
        if y.size and (y.min() < 0 or y.max() >= spec.num_classes):
            raise RejectedInput(f"labels must lie in [0, {spec.num_classes})")


def _forward(w: ParamVector, x: np.ndarray, spec: ModelSpec):
    blocks = w.blocks()
    n_layers = len(spec.layer_sizes) - 1
    acts = [x]
    a = x
    for k in range(n_layers):
        z = a @ blocks[f"W{k}"].T + blocks[f"b{k}"]
        a = np.tanh(z) if k < n_layers - 1 else z
        acts.append(a)
    return blocks, acts


def _cross_entropy(logits: np.ndarray, y: np.ndarray):
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    per_sample = -log_probs[np.arange(y.size), y]
    return per_sample, log_probs


def predict_logits(w: ParamVector, features, spec: ModelSpec) -> np.ndarray:
    x = np.asarray(features, dtype=DTYPE)
    _check(w, x, None, spec)
    return _forward(w, x, spec)[1][-1]


def mean_loss(w: ParamVector, features, labels, spec: ModelSpec) -> float:
    x = np.asarray(features, dtype=DTYPE)
    y = np.asarray(labels, dtype=np.int64)
    _check(w, x, y, spec)
    if y.size == 0:
        raise RejectedInput("cannot evaluate loss on an empty set")
    per_sample, _ = _cross_entropy(_forward(w, x, spec)[1][-1], y)
    loss = float(per_sample.mean())
    if not math.isfinite(loss):
        raise NumericError("non-finite loss in forward pass")
    return loss


def forward_backward(w: ParamVector, features, labels, spec: ModelSpec, *, input_grad: bool = False):
    """Mean cross-entropy, its parameter gradient and optionally d(loss)/d(features).

    Returns ``(loss, grad)`` or ``(loss, grad, dx)`` when ``input_grad`` is set.
    """
    x = np.asarray(features, dtype=DTYPE)
    y = np.asarray(labels, dtype=np.int64)
    _check(w, x, y, spec)
    n = y.size
    if n == 0:
        raise RejectedInput("empty batch")
    blocks, acts = _forward(w, x, spec)
    per_sample, log_probs = _cross_entropy(acts[-1], y)
    loss = float(per_sample.mean())
    if not math.isfinite(loss):
        raise NumericError("non-finite loss in forward pass")

    dz = np.exp(log_probs)
    dz[np.arange(n), y] -= 1.0
    dz /= n
    n_layers = len(spec.layer_sizes) - 1
    grads = {}
    for k in range(n_layers - 1, -1, -1):
        a_prev = acts[k]
        grads[f"W{k}"] = dz.T @ a_prev
        grads[f"b{k}"] = dz.sum(axis=0, keepdims=True)
        if k > 0 or input_grad:
            da = dz @ blocks[f"W{k}"]
            dz = da * (1.0 - a_prev * a_prev) if k > 0 else da
    grad = ParamVector.from_blocks({name: grads[name] for name, _ in w.manifest})
    if input_grad:
        return loss, grad, dz
    return loss, grad


def loss_and_grad(w: ParamVector, batch: LabeledBatch, spec: ModelSpec) -> tuple[float, ParamVector]:
    return forward_backward(w, batch.features, batch.labels, spec)


def momentum_update(params: np.ndarray, grad: np.ndarray, opt: OptimizerState):
    velocity = opt.momentum * opt.velocity + grad
    return params - opt.learning_rate * velocity, replace(opt, velocity=velocity)


def sgd_step(w: ParamVector, grad: ParamVector, opt: OptimizerState) -> tuple[ParamVector, OptimizerState]:
    """velocity <- momentum * velocity + grad;  w <- w - lr * velocity."""
    if not w.same_manifest(grad):
        raise RejectedInput("gradient manifest does not match parameters")
    if opt.velocity.shape != w.data.shape:
        raise RejectedInput("optimizer state does not match parameters")
    new_data, opt = momentum_update(w.data, grad.data, opt)
    return w.with_data(new_data), opt


@dataclass(frozen=True)
class AnnealSchedule:
    """Multiply the rate by 1/sqrt(2) for every epoch past ``start_epoch``.

    ``start_epoch=None`` disables annealing.
    """

    start_epoch: int | None = 10
    factor: float = 2.0 ** -0.5


def anneal(alpha: float, epoch: int, schedule: AnnealSchedule) -> float:
    if epoch < 1:
        raise RejectedInput(f"epochs are counted from 1, got {epoch}")
    if schedule.start_epoch is None or epoch <= schedule.start_epoch:
        return alpha
    return alpha * schedule.factor ** (epoch - schedule.start_epoch)
