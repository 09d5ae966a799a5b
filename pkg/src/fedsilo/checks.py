"""Fast self-checks behind ``fedsilo verify``: exact identities and gradient oracles."""

from __future__ import annotations

import numpy as np

from .data import ClientDataset, shard_epoch
from .federation import fedavg_update
from .model import ModelSpec, forward_backward, init_params
from .numkit import Rng, finite_diff_grad
from .transform import AffineTransform, transform_loss_and_grad
from .transport import MessageKind, RoundMessage, deserialize, message_size, serialize


def check_average_identity(trials: int = 50) -> bool:
    gen = Rng(11).stream("verify", "average")
    spec = ModelSpec((4, 3, 2))
    for _ in range(trials):
        L = int(gen.integers(1, 6))
        w_t = init_params(spec, Rng(int(gen.integers(2**32))))
        locals_ = [w_t.with_data(gen.standard_normal(w_t.size)) for _ in range(L)]
        p = gen.dirichlet(np.ones(L))
        out = fedavg_update(w_t, locals_, p, 1.0)
        ref = sum(pi * wi.data for pi, wi in zip(p, locals_))
        if np.max(np.abs(out.data - ref)) > 1e-12:
            return False
    return True


def check_sharding(trials: int = 50) -> bool:
    gen = Rng(12).stream("verify", "shard")
    for k in range(trials):
        T = int(gen.integers(1, 20))
        n = int(gen.integers(T, 200))
        ds = ClientDataset(0, gen.standard_normal((n, 2)), gen.integers(0, 2, n))
        shards = shard_epoch(ds, T, 1, k)
        sizes = [len(s) for s in shards]
        seen = np.sort(np.concatenate([s.features[:, 0] for s in shards]))
        if sum(sizes) != n or max(sizes) - min(sizes) > 1 or not np.array_equal(seen, np.sort(ds.features[:, 0])):
            return False
    return True


def _rel_err(a, b) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def check_gradients(trials: int = 5) -> bool:
    gen = Rng(13).stream("verify", "grad")
    spec = ModelSpec((3, 4, 3))
    for k in range(trials):
        w = init_params(spec, Rng(k))
        X = gen.standard_normal((6, 3))
        y = gen.integers(0, 3, 6)
        _, g = forward_backward(w, X, y, spec)[:2]
        num = finite_diff_grad(lambda v: forward_backward(w.with_data(v), X, y, spec)[0], w.data)
        if _rel_err(g.data, num) > 1e-4:
            return False
        F = AffineTransform(np.eye(3) + 0.1 * gen.standard_normal((3, 3)), 0.1 * gen.standard_normal(3))
        _, gA, gb = transform_loss_and_grad(F, w, X, y, spec)
        num = finite_diff_grad(lambda v: transform_loss_and_grad(AffineTransform.from_flat(v, 3), w, X, y, spec)[0],
                               F.flat())
        if _rel_err(np.concatenate([gA.ravel(), gb]), num) > 1e-4:
            return False
    return True


def check_wire() -> bool:
    w = init_params(ModelSpec((4, 3, 2)), Rng(14))
    msg = RoundMessage(MessageKind.LOCAL_UPDATE, 2, 5, w, 3)
    raw = serialize(msg)
    return len(raw) == message_size(w) and deserialize(raw) == msg


CHECKS = {
    "averaging identity": check_average_identity,
    "sharding partition": check_sharding,
    "gradient oracles": check_gradients,
    "wire round trip": check_wire,
}


def run_checks(verbose: bool = True) -> bool:
    ok = True
    for name, fn in CHECKS.items():
        passed = bool(fn())
        ok &= passed
        if verbose:
            print(f"{'PASS' if passed else 'FAIL'}  {name}")
    return ok
