"""Synthetic non-iid client data, CSV ingestion and per-epoch round sharding."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, RejectedInput, ValidationError
from .numkit import DTYPE, Rng, identity

MAX_SKEW_CONDITION = 50.0


@dataclass(frozen=True)
class ClientDataset:
    client_id: int
    features: np.ndarray
    labels: np.ndarray
    domain_tag: str = ""

    def __post_init__(self):
        x = np.asarray(self.features, dtype=DTYPE)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise RejectedInput(f"dataset shape mismatch: features {x.shape}, labels {y.shape}")
        if y.size and y.min() < 0:
            raise ValidationError("labels must be non-negative")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self):
        return self.n


@dataclass(frozen=True)
class SkewSpec:
    G: np.ndarray
    c: np.ndarray
    label_noise: float = 0.0

    def __post_init__(self):
        G = np.asarray(self.G, dtype=DTYPE)
        c = np.asarray(self.c, dtype=DTYPE)
        if G.ndim != 2 or G.shape[0] != G.shape[1] or c.shape != (G.shape[0],):
            raise RejectedInput(f"skew shapes G {G.shape}, c {c.shape} are inconsistent")
        if not 0.0 <= self.label_noise < 1.0:
            raise RejectedInput(f"label noise must lie in [0, 1), got {self.label_noise}")
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "c", c)

    @property
    def dim(self) -> int:
        return self.G.shape[0]

    def to_json(self) -> dict:
        return {"G": self.G.tolist(), "c": self.c.tolist(), "label_noise": self.label_noise}

    @classmethod
    def from_json(cls, obj: dict) -> SkewSpec:
        return cls(np.array(obj["G"]), np.array(obj["c"]), float(obj.get("label_noise", 0.0)))


@dataclass(frozen=True)
class RoundShard:
    round_index: int
    features: np.ndarray
    labels: np.ndarray
    client_id: int = 0
    epoch: int = 1

    def __len__(self):
        return self.labels.size


def class_means(seed: int, d: int, C: int, separation: float = 1.0) -> np.ndarray:
    return Rng(seed).stream("class-means", d, C).normal(0.0, separation, size=(C, d))


def generate_base(seed: int, n: int, d: int, C: int, *, stream=0,
                  separation: float = 1.0, noise_std: float = 1.0):
    """Draw ``n`` samples from a spherical Gaussian mixture with one component per class.

    The class means depend only on ``(seed, d, C)``; ``stream`` selects an
    independent sample stream over the same mixture, so every client (and
    every eval split) sees the same underlying classes.
    """
    if d < 2 or C < 2:
        raise RejectedInput(f"need d >= 2 and C >= 2, got d={d}, C={C}")
    if n < 0:
        raise RejectedInput(f"sample count must be non-negative, got {n}")
    means = class_means(seed, d, C, separation)
    gen = Rng(seed).stream("base-samples", stream)
    labels = gen.integers(0, C, size=n)
    features = means[labels] + noise_std * gen.standard_normal((n, d))
    return features.astype(DTYPE, copy=False), labels.astype(np.int64)


def apply_skew(features, labels, spec: SkewSpec, seed: int, *, num_classes: int, stream=0):
    """Map every row through ``x -> G x + c`` and resample a ``label_noise`` fraction of labels."""
    x = np.asarray(features, dtype=DTYPE)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[1] != spec.dim:
        raise RejectedInput(f"features of shape {x.shape} do not match a {spec.dim}-d skew")
    if abs(np.linalg.det(spec.G)) <= 1e-6:
        raise RejectedInput("skew matrix is singular")
    out = x @ spec.G.T + spec.c
    y = y.copy()
    if spec.label_noise > 0 and y.size:
        gen = Rng(seed).stream("label-noise", stream)
        flip = gen.random(y.size) < spec.label_noise
        y[flip] = gen.integers(0, num_classes, size=int(flip.sum()))
    return out, y


def random_skew(gen: np.random.Generator, d: int, *, eps_range=(0.3, 1.0),
                offset_scale: float = 1.0, label_noise: float = 0.0) -> SkewSpec:
    """Draw ``G = I + eps * R`` (rejection-sampled to condition number <= 50) and an offset ``c``."""
    while True:
        eps = gen.uniform(*eps_range)
        R = gen.standard_normal((d, d)) / math.sqrt(d)
        G = identity(d) + eps * R
        if np.linalg.cond(G) <= MAX_SKEW_CONDITION and abs(np.linalg.det(G)) > 1e-6:
            break
    c = offset_scale * gen.standard_normal(d) / math.sqrt(d)
    return SkewSpec(G, c, label_noise)


def shard_sizes(n: int, T: int) -> list[int]:
    q, r = divmod(n, T)
    return [q + 1] * r + [q] * (T - r)


def epoch_permutation(client_id: int, n: int, epoch: int, seed: int) -> np.ndarray:
    return Rng(seed).stream("shard", client_id, epoch).permutation(n)


def shard_epoch(ds: ClientDataset, T: int, epoch: int, seed: int) -> list[RoundShard]:
    """Split one epoch's freshly permuted copy of ``ds`` into ``T`` disjoint round shards.

    When ``T`` does not divide the sample count the earliest shards carry
    one extra sample each.
    """
    if T < 1:
        raise RejectedInput(f"need at least one round per epoch, got T={T}")
    if ds.n < T:
        raise RejectedInput(f"client {ds.client_id} has {ds.n} samples, fewer than T={T} rounds")
    perm = epoch_permutation(ds.client_id, ds.n, epoch, seed)
    shards = []
    start = 0
    for t, size in enumerate(shard_sizes(ds.n, T), start=1):
        idx = perm[start:start + size]
        shards.append(RoundShard(t, ds.features[idx], ds.labels[idx], ds.client_id, epoch))
        start += size
    return shards


def iter_batches(n: int, batch_size: int):
    """Consecutive ``slice`` objects of ``batch_size``; the last one may be short."""
    if batch_size < 1:
        raise RejectedInput(f"batch size must be positive, got {batch_size}")
    for start in range(0, n, batch_size):
        yield slice(start, min(start + batch_size, n))


def load_csv(path, *, client_id: int = 0, num_classes: int | None = None,
             domain_tag: str | None = None) -> ClientDataset:
    """Read a ``f0,...,f{d-1},label`` file into a ClientDataset."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file, expected a header row", line=1) from None
        header = [h.strip() for h in header]
        if not header or header[-1] != "label":
            raise ParseError("last header column must be 'label'", line=1)
        d = len(header) - 1
        if d < 1 or header[:-1] != [f"f{k}" for k in range(d)]:
            raise ParseError("feature columns must be named f0, f1, ...", line=1)
        rows, labels = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != d + 1:
                raise ParseError(f"expected {d + 1} fields, found {len(row)}", line=line_no)
            try:
                feats = [float(cell) for cell in row[:-1]]
            except ValueError as exc:
                raise ParseError(f"non-numeric feature: {exc}", line=line_no) from None
            if not all(math.isfinite(v) for v in feats):
                raise ParseError("non-finite feature value", line=line_no)
            try:
                label = int(row[-1])
            except ValueError:
                raise ParseError(f"label {row[-1]!r} is not an integer", line=line_no) from None
            if label < 0 or (num_classes is not None and label >= num_classes):
                raise ValidationError(f"line {line_no}: label {label} out of range")
            rows.append(feats)
            labels.append(label)
    features = np.array(rows, dtype=DTYPE).reshape(len(rows), d)
    return ClientDataset(client_id, features, np.array(labels, dtype=np.int64),
                         domain_tag if domain_tag is not None else path.stem)


def write_csv(path, features, labels) -> None:
    path = Path(path)
    x = np.asarray(features, dtype=DTYPE)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{k}" for k in range(x.shape[1])] + ["label"])
        for row, label in zip(x, labels):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


# --- default desk-scale task -------------------------------------------------

@dataclass
class SyntheticTaskSpec:
    """Generator settings for the multi-client skewed task.

    Client ``i`` draws ``sizes[i]`` base samples and skews them with its own
    ``(G_i, c_i)``. Eval splits are fresh draws from selected clients'
    distributions; a ``"<k>v"`` entry means client ``k``'s domain with a
    perturbed skew.
    """

    seed: int = 0
    d: int = 16
    C: int = 8
    sizes: tuple[int, ...] = (4200, 4500, 1000, 1400, 400)
    separation: float = 1.0
    noise_std: float = 1.0
    eps_range: tuple[float, float] = (0.3, 1.0)
    offset_scale: float = 8.0
    label_noise: float = 0.0
    centered: bool = True
    eval_clients: tuple[str, ...] = ("0", "3", "4", "4v")
    eval_size: int = 1000
    variant_scale: float = 0.15
    tags: tuple[str, ...] = ("broadcast", "dictation", "meeting", "hospitality", "accented")

    def to_json(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_json(cls, obj: dict) -> SyntheticTaskSpec:
        kwargs = {}
        for k, v in obj.items():
            if k not in cls.__dataclass_fields__:
                raise ValidationError(f"unknown synthetic task field {k!r}")
            kwargs[k] = tuple(v) if isinstance(v, list) else v
        return cls(**kwargs)


@dataclass
class EvalSplit:
    name: str
    features: np.ndarray
    labels: np.ndarray
    owner: int | None = None  # client whose transform applies at test time


@dataclass
class SyntheticTask:
    spec: SyntheticTaskSpec
    datasets: list[ClientDataset]
    skews: list[SkewSpec]
    eval_splits: list[EvalSplit] = field(default_factory=list)
    eval_skews: list[SkewSpec] = field(default_factory=list)


def draw_skews(spec: SyntheticTaskSpec) -> list[SkewSpec]:
    gen = Rng(spec.seed).stream("skews")
    L = len(spec.sizes)
    skews = [random_skew(gen, spec.d, eps_range=spec.eps_range, offset_scale=spec.offset_scale,
                         label_noise=spec.label_noise) for _ in range(L)]
    if not spec.centered or L < 2:
        return skews
    # shift all clients so the mean client frame is the base frame
    mean_G = sum(s.G for s in skews) / L
    mean_c = sum(s.c for s in skews) / L
    centered = []
    for s in skews:
        G = s.G - mean_G + identity(spec.d)
        if np.linalg.cond(G) > MAX_SKEW_CONDITION or abs(np.linalg.det(G)) <= 1e-6:
            G = s.G
        centered.append(SkewSpec(G, s.c - mean_c, s.label_noise))
    return centered


def make_task(spec: SyntheticTaskSpec) -> SyntheticTask:
    skews = draw_skews(spec)
    datasets = []
    for i, (n, skew) in enumerate(zip(spec.sizes, skews)):
        x, y = generate_base(spec.seed, n, spec.d, spec.C, stream=("train", i),
                             separation=spec.separation, noise_std=spec.noise_std)
        x, y = apply_skew(x, y, skew, spec.seed, num_classes=spec.C, stream=("train", i))
        tag = spec.tags[i] if i < len(spec.tags) else f"client{i}"
        datasets.append(ClientDataset(i, x, y, tag))
    splits, eval_skews = [], []
    for j, ref in enumerate(spec.eval_clients):
        ref = str(ref)
        variant = ref.endswith("v")
        owner = int(ref[:-1] if variant else ref)
        if not 0 <= owner < len(skews):
            raise ValidationError(f"eval split {ref!r} refers to unknown client")
        skew = skews[owner]
        if variant:
            gen = Rng(spec.seed).stream("variant", j)
            P = identity(spec.d) + spec.variant_scale * gen.standard_normal((spec.d, spec.d)) / math.sqrt(spec.d)
            skew = SkewSpec(P @ skew.G, skew.c + spec.variant_scale * gen.standard_normal(spec.d) / math.sqrt(spec.d),
                            skew.label_noise)
        x, y = generate_base(spec.seed, spec.eval_size, spec.d, spec.C, stream=("eval", j),
                             separation=spec.separation, noise_std=spec.noise_std)
        x, y = apply_skew(x, y, skew, spec.seed, num_classes=spec.C, stream=("eval", j))
        tag = spec.tags[owner] if owner < len(spec.tags) else f"client{owner}"
        splits.append(EvalSplit(f"S{j + 1}:{tag}{'-variant' if variant else ''}", x, y, owner))
        eval_skews.append(skew)
    return SyntheticTask(spec, datasets, skews, splits, eval_skews)


def write_task(task: SyntheticTask, out_dir) -> dict:
    """Write one CSV per client and eval split plus a ``metadata.json`` sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {"generator": task.spec.to_json(), "clients": [], "eval_splits": []}
    for ds, skew in zip(task.datasets, task.skews):
        name = f"client{ds.client_id}.csv"
        write_csv(out_dir / name, ds.features, ds.labels)
        meta["clients"].append({"client_id": ds.client_id, "file": name, "n": ds.n,
                                "domain_tag": ds.domain_tag, "skew": skew.to_json()})
    for j, (split, skew) in enumerate(zip(task.eval_splits, task.eval_skews)):
        name = f"eval{j + 1}.csv"
        write_csv(out_dir / name, split.features, split.labels)
        meta["eval_splits"].append({"name": split.name, "file": name, "owner": split.owner,
                                    "n": int(split.labels.size), "skew": skew.to_json()})
    (out_dir / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta
