"""Acceptance suite: exact identities, oracle equivalences and the desk-scale trend checks.

Run with ``pytest tests/test_acceptance.py -v``; every criterion prints one
PASS/FAIL line, collected again in the terminal summary. Running this file as
a script does the same without pytest.
"""

from __future__ import annotations

import functools
import json
import tempfile
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from fedsilo import presets
from fedsilo.baselines import cat_train, centralized_train
from fedsilo.data import ClientDataset, make_task, shard_epoch, shard_sizes
from fedsilo.federation import TrainingConfig, evaluate, fedavg_update, run_training
from fedsilo.harness import run_cli
from fedsilo.model import ModelSpec, forward_backward, init_params
from fedsilo.numkit import Rng, finite_diff_grad, identity
from fedsilo.transform import AffineTransform, TransformOptConfig, compose_check, transform_loss_and_grad
from fedsilo.errors import CrcMismatchError
from fedsilo.transport import MessageKind, RoundMessage, deserialize, message_size, save_checkpoint, serialize

SEEDS = range(5)
RESULTS: list[str] = []
GOLDEN = Path(__file__).parent / "golden" / "local_update_seed2024.bin"


def report(number: int, passed: bool, detail: str, elapsed: float, budget: float) -> bool:
    in_time = elapsed < budget
    ok = passed and in_time
    line = f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}: {detail} [{elapsed:.1f}s / {budget:.0f}s]"
    RESULTS.append(line)
    print(line)
    return ok


def mean_eval(w, task, transforms=None) -> float:
    spec = presets.FEDAVG.model_spec(task.spec.d)
    return float(np.mean(list(evaluate(w, task.eval_splits, spec, transforms).values())))


def own_eval(w, task, client, transforms=None) -> float:
    spec = presets.FEDAVG.model_spec(task.spec.d)
    own = [s for s in task.eval_splits if s.owner == client]
    losses = evaluate(w, own, spec, transforms)
    return float(np.mean(list(losses.values())))


# --- shared, cached runs for the trend criteria ------------------------------

_CKPT_DIR = tempfile.mkdtemp(prefix="fedsilo-acceptance-")


@functools.lru_cache(maxsize=None)
def task_for(seed):
    return make_task(presets.task(seed))


@functools.lru_cache(maxsize=None)
def fedavg_run(seed, rounds=presets.FEDAVG.rounds, weighting="equal"):
    cfg = replace(presets.FEDAVG, seed=seed, rounds=rounds, weighting=weighting)
    return run_training(cfg, task_for(seed).datasets)


@functools.lru_cache(maxsize=None)
def centralized_loss(seed):
    return mean_eval(centralized_train(task_for(seed).datasets, replace(presets.CENTRALIZED, seed=seed)),
                     task_for(seed))


@functools.lru_cache(maxsize=None)
def caft_run(seed):
    return run_training(replace(presets.CAFT, seed=seed), task_for(seed).datasets)


@functools.lru_cache(maxsize=None)
def caft_pt_run(seed, weighting="equal"):
    path = Path(_CKPT_DIR) / f"fedavg-seed{seed}.ckpt"
    if not path.exists():
        save_checkpoint(path, fedavg_run(seed).params)
    cfg = replace(presets.caft_pt(path), seed=seed, weighting=weighting)
    return run_training(cfg, task_for(seed).datasets)


# --- criteria -----------------------------------------------------------------

def criterion_1():
    start = time.perf_counter()
    gen = Rng(101).stream("acceptance", "averaging")
    spec = ModelSpec((8, 6, 4))
    worst = 0.0
    for k in range(1000):
        L = int(gen.integers(1, 8))
        w_t = init_params(spec, Rng(k))
        w_t = w_t.with_data(gen.standard_normal(w_t.size) * 3)
        locals_ = [w_t.with_data(gen.standard_normal(w_t.size) * 3) for _ in range(L)]
        p = gen.dirichlet(np.ones(L))
        out = fedavg_update(w_t, locals_, p, 1.0)
        ref = np.zeros(w_t.size)
        for pi, wi in zip(p, locals_):
            ref = ref + pi * wi.data
        worst = max(worst, float(np.max(np.abs(out.data - ref))))
    return report(1, worst <= 1e-12, f"averaging identity, max |diff| = {worst:.2e} (tol 1e-12)",
                  time.perf_counter() - start, 5)


def criterion_2():
    start = time.perf_counter()
    ds = task_for(0).datasets[2]
    cfg = replace(presets.FEDAVG, epochs=3, rounds=1, anneal_start=1)
    ok = run_training(cfg, [ds]).params.bit_equal(centralized_train([ds], cfg))
    # with T > 1 the shards are consecutive slices of one permutation; when B divides
    # every shard the batch order matches the single-stream epoch exactly
    sub = ClientDataset(ds.client_id, ds.features[:640], ds.labels[:640], ds.domain_tag)
    cfg = replace(presets.FEDAVG, epochs=3, rounds=5, anneal_start=1)
    ok &= run_training(cfg, [sub]).params.bit_equal(centralized_train([sub], cfg))
    return report(2, ok, "single client, eta=1 federated run is bit-identical to centralized SGD",
                  time.perf_counter() - start, 30)


def criterion_3():
    start = time.perf_counter()
    task = task_for(0)
    base = replace(presets.FEDAVG, epochs=3, rounds=10)
    fed = run_training(base, task.datasets, task.eval_splits)
    caft = run_training(replace(base, mode="caft", transform=TransformOptConfig(steps_per_round=0)),
                        task.datasets, task.eval_splits)
    same = fed.params.bit_equal(caft.params) and [r.to_json() for r in fed.reports] == [
        r.to_json() for r in caft.reports]
    same &= all(F.bit_equal(AffineTransform.identity(task.spec.d)) for F in caft.transforms.values())
    return report(3, same, "caft with identity transforms and zero steps == fedavg, M=3 T=10",
                  time.perf_counter() - start, 60)


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def criterion_4():
    start = time.perf_counter()
    gen = Rng(104).stream("acceptance", "gradients")
    worst_model = worst_transform = 0.0
    for k in range(100):
        d, h, C = (int(v) for v in gen.integers(2, 6, size=3))
        spec = ModelSpec((d, h, C))
        w = init_params(spec, Rng(k))
        X = gen.standard_normal((int(gen.integers(1, 10)), d))
        y = gen.integers(0, C, X.shape[0])
        _, g = forward_backward(w, X, y, spec)
        num = finite_diff_grad(lambda v: forward_backward(w.with_data(v), X, y, spec)[0], w.data, h=1e-5)
        worst_model = max(worst_model, _rel(g.data, num))
        F = AffineTransform(identity(d) + 0.3 * gen.standard_normal((d, d)), 0.3 * gen.standard_normal(d))
        _, gA, gb = transform_loss_and_grad(F, w, X, y, spec)
        num = finite_diff_grad(
            lambda v: transform_loss_and_grad(AffineTransform.from_flat(v, d), w, X, y, spec)[0], F.flat(), h=1e-5)
        worst_transform = max(worst_transform, _rel(np.concatenate([gA.ravel(), gb]), num))
    ok = worst_model <= 1e-4 and worst_transform <= 1e-4
    return report(4, ok, f"gradient oracles, worst rel err model {worst_model:.1e}, "
                         f"transform {worst_transform:.1e} (tol 1e-4)", time.perf_counter() - start, 60)


def criterion_5():
    start = time.perf_counter()
    gen = Rng(105).stream("acceptance", "sharding")
    ok = True
    divisible = 0
    for k in range(500):
        T = int(gen.integers(1, 64))
        n = T * int(gen.integers(1, 12)) if k % 2 else int(gen.integers(T, 800))
        x = np.arange(n, dtype=float).reshape(n, 1)
        shards = shard_epoch(ClientDataset(0, x, np.zeros(n, dtype=int)), T, int(gen.integers(1, 30)), k)
        sizes = [len(s) for s in shards]
        ok &= sizes == shard_sizes(n, T) and sum(sizes) == n and max(sizes) - min(sizes) <= 1
        ok &= np.array_equal(np.sort(np.concatenate([s.features[:, 0] for s in shards])), x[:, 0])
        if n % T == 0:
            divisible += 1
            ok &= all(s == n // T for s in sizes)
    return report(5, ok, f"sharding partitions 500 (n, T) pairs ({divisible} divisible)",
                  time.perf_counter() - start, 10)


def criterion_6():
    start = time.perf_counter()
    T0 = presets.FEDAVG.rounds
    wins, interior, lines = 0, 0, []
    for s in SEEDS:
        cen = centralized_loss(s)
        by_T = {T: mean_eval(fedavg_run(s, T).params, task_for(s)) for T in presets.SWEEP_ROUNDS}
        best = min(by_T, key=by_T.get)
        wins += cen < by_T[T0]
        interior += best not in (min(presets.SWEEP_ROUNDS), max(presets.SWEEP_ROUNDS))
        lines.append(f"seed {s}: centralized {cen:.4f} vs fedavg(T={T0}) {by_T[T0]:.4f}, best T={best} "
                     f"[{' '.join(f'{T}:{v:.4f}' for T, v in by_T.items())}]")
    for line in lines:
        print("      " + line)
    ok = wins == len(SEEDS) and interior >= 4
    return report(6, ok, f"centralized < fedavg in {wins}/5 seeds; interior best T in {interior}/5 seeds",
                  time.perf_counter() - start, 20 * 60)


def criterion_7():
    start = time.perf_counter()
    cen, cat, fed, caft, pt = [], [], [], [], []
    for s in SEEDS:
        task = task_for(s)
        cen.append(centralized_loss(s))
        w, F = cat_train(task.datasets, replace(presets.CENTRALIZED, seed=s), presets.CAFT.transform)
        cat.append(mean_eval(w, task, F))
        fed.append(mean_eval(fedavg_run(s).params, task))
        r = caft_run(s)
        caft.append(mean_eval(r.params, task, r.transforms))
        r = caft_pt_run(s)
        pt.append(mean_eval(r.params, task, r.transforms))
    m = {k: float(np.mean(v)) for k, v in dict(cen=cen, cat=cat, fed=fed, caft=caft, pt=pt).items()}
    margins = {"centralized - CAT": m["cen"] - m["cat"], "fedavg - CAFT": m["fed"] - m["caft"],
               "CAFT - CAFT-PT": m["caft"] - m["pt"]}
    print("      5-seed means: " + ", ".join(f"{k} {v:.4f}" for k, v in m.items()))
    ok = all(v >= 0 for v in margins.values())
    return report(7, ok, "margins " + ", ".join(f"{k} = {v:+.4f}" for k, v in margins.items()),
                  time.perf_counter() - start, 30 * 60)


def criterion_8(client: int = 4):
    start = time.perf_counter()
    wins = 0
    for s in SEEDS:
        task = task_for(s)
        eq = caft_pt_run(s)
        fav = caft_pt_run(s, f"preference:{client}:0.4")
        a, b = own_eval(eq.params, task, client, eq.transforms), own_eval(fav.params, task, client, fav.transforms)
        wins += b < a
        print(f"      seed {s}: client {client} own eval equal {a:.4f} -> favored {b:.4f}")
    return report(8, wins >= 4, f"favoring client {client} (0.4 / 0.15) lowers its own eval loss in {wins}/5 seeds",
                  time.perf_counter() - start, 15 * 60)


def criterion_9():
    start = time.perf_counter()
    ratios = []
    for s in SEEDS:
        task = task_for(s)
        res = caft_run(s)
        ident = AffineTransform.identity(task.spec.d)
        ratios.append([compose_check(res.transforms[i], sk) / compose_check(ident, sk)
                       for i, sk in enumerate(task.skews)])
    med = np.median(np.array(ratios), axis=0)
    ok = bool(np.all(med < 0.5))
    return report(9, ok, "median residual / identity residual per client "
                         f"[{' '.join(f'{v:.2f}' for v in med)}] (need < 0.50)", time.perf_counter() - start, 10 * 60)


def criterion_10():
    start = time.perf_counter()
    w = init_params(ModelSpec((3, 2, 2)), Rng(2024))
    msg = RoundMessage(MessageKind.LOCAL_UPDATE, 3, 7, w, 4)
    raw = serialize(msg)
    ok = raw == GOLDEN.read_bytes() and deserialize(raw) == msg
    corrupt = bytearray(raw)
    corrupt[-12] ^= 0x10  # inside the parameter data
    try:
        deserialize(bytes(corrupt))
        ok = False
    except CrcMismatchError:
        pass
    clients = [ClientDataset(i, np.ones((n, 3)) * i, np.arange(n) % 2) for i, n in enumerate((24, 18, 12))]
    for M, T in ((1, 1), (2, 3), (3, 6)):
        cfg = TrainingConfig(epochs=M, rounds=T, hidden=(2,), num_classes=2, batch_size=4)
        res = run_training(cfg, clients)
        total = sum(r.bytes_up + r.bytes_down for r in res.reports)
        ok &= total == M * T * (3 + 3) * message_size(res.params)
    return report(10, ok, "golden bytes, CRC corruption detected, bytes per run = M*T*(L+L)*|message|",
                  time.perf_counter() - start, 5)


def criterion_11():
    start = time.perf_counter()
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        cfg = {"training": presets.FEDAVG.to_json(), "data": {"synthetic": presets.DEFAULT_TASK.to_json()},
               "mode": "fedavg"}
        (tmp / "c.json").write_text(json.dumps(cfg))
        ok = True
        for mode in ("fedavg", "caft"):
            for run in ("a", "b"):
                ok &= run_cli(["train", "--config", str(tmp / "c.json"), "--mode", mode, "--out",
                               str(tmp / f"{mode}-{run}"), "--quiet"]) == 0
            for name in ("model.ckpt", "metrics.jsonl"):
                ok &= (tmp / f"{mode}-a" / name).read_bytes() == (tmp / f"{mode}-b" / name).read_bytes()
    return report(11, ok, "repeated train runs give bit-identical checkpoint and metrics files",
                  time.perf_counter() - start, 60)


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7, criterion_8,
            criterion_9, criterion_10, criterion_11]


@pytest.mark.acceptance
@pytest.mark.parametrize("criterion", CRITERIA, ids=[f"criterion_{k}" for k in range(1, 12)])
def test_criterion(criterion):
    assert criterion()


if __name__ == "__main__":
    passed = sum(bool(c()) for c in CRITERIA)
    print(f"\n{passed}/{len(CRITERIA)} criteria passed")
