import math

import numpy as np
import pytest

from fedsilo.data import SkewSpec, apply_skew, generate_base
from fedsilo.errors import RejectedInput
from fedsilo.federation import local_steps
from fedsilo.model import LabeledBatch, ModelSpec, OptimizerState, init_params, mean_loss
from fedsilo.numkit import Rng, finite_diff_grad, identity
from fedsilo.transform import (AffineTransform, TransformOptConfig, apply, compose_check, estimate, estimate_step,
                               fresh_state, inverse_of, transform_loss_and_grad)


def test_apply_identity_bit_exact():
    X = Rng(0).stream("x").standard_normal((7, 3))
    assert apply(AffineTransform.identity(3), X).tobytes() == X.tobytes()


def test_apply_zero_matrix():
    out = apply(AffineTransform(np.zeros((2, 2)), [4.0, -1.0]), np.ones((3, 2)))
    assert np.array_equal(out, [[4.0, -1.0]] * 3)


def test_apply_hand_arithmetic():
    out = apply(AffineTransform(np.diag([2.0, 3.0]), [1.0, 0.0]), [[1.0, 1.0]])
    assert np.array_equal(out, [[3.0, 3.0]])


def test_apply_dim_mismatch():
    with pytest.raises(RejectedInput):
        apply(AffineTransform.identity(3), np.ones((2, 2)))


def test_compose_check_examples():
    G = identity(4) + 0.3 * Rng(1).stream("g").standard_normal((4, 4))
    skew = SkewSpec(G, np.array([1.0, -2.0, 0.5, 0.0]))
    assert compose_check(inverse_of(skew), skew) < 1e-10
    assert compose_check(AffineTransform.identity(4), SkewSpec(identity(4), np.zeros(4))) == 0.0
    assert compose_check(AffineTransform.identity(4), SkewSpec(2 * identity(4), np.zeros(4))) == pytest.approx(1.0)


def test_transform_gradient_finite_differences_100_instances():
    spec = ModelSpec((3, 5, 3))
    gen = Rng(31).stream("transform-grad-test")
    for k in range(100):
        w = init_params(spec, Rng(k))
        X = gen.standard_normal((int(gen.integers(1, 7)), 3))
        y = gen.integers(0, 3, X.shape[0])
        F = AffineTransform(identity(3) + 0.2 * gen.standard_normal((3, 3)), 0.2 * gen.standard_normal(3))
        _, gA, gb = transform_loss_and_grad(F, w, X, y, spec)
        f = lambda v: transform_loss_and_grad(AffineTransform.from_flat(v, 3), w, X, y, spec)[0]
        num = finite_diff_grad(f, F.flat())
        ana = np.concatenate([gA.ravel(), gb])
        assert np.linalg.norm(ana - num) / max(np.linalg.norm(ana) + np.linalg.norm(num), 1e-12) <= 1e-4


def test_estimate_step_leaves_model_untouched(tiny_spec, tiny_params):
    before = tiny_params.data.tobytes()
    cfg = TransformOptConfig()
    X = Rng(2).stream("x").standard_normal((8, 3))
    F, state, _ = estimate_step(AffineTransform.identity(3), tiny_params, LabeledBatch(X, [0, 1, 2, 3] * 2), cfg,
                                fresh_state(3, cfg))
    assert tiny_params.data.tobytes() == before
    assert not F.bit_equal(AffineTransform.identity(3))


def test_zero_gradient_keeps_transform():
    spec = ModelSpec((2, 3, 2))
    w = init_params(spec, Rng(0)).with_data(np.zeros(spec_size(spec)))  # flat loss everywhere
    F0 = AffineTransform(np.array([[1.0, 0.5], [0.0, 2.0]]), [0.1, 0.2])
    cfg = TransformOptConfig()
    F, _, _ = estimate_step(F0, w, LabeledBatch(np.ones((3, 2)), [0, 1, 1]), cfg, fresh_state(2, cfg))
    assert F.bit_equal(F0)


def spec_size(spec):
    return sum(r * c for _, (r, c) in spec.manifest())


def test_small_lr_estimation_mostly_monotone(tiny_spec, tiny_params):
    gen = Rng(4).stream("mono")
    batch = LabeledBatch(gen.standard_normal((32, 3)) * 2 + 1, gen.integers(0, 4, 32))
    cfg = TransformOptConfig(learning_rate=1e-3)
    F, state = AffineTransform.identity(3), fresh_state(3, cfg)
    losses = []
    for _ in range(51):
        F, state, loss = estimate_step(F, tiny_params, batch, cfg, state)
        losses.append(loss)
    drops = sum(b <= a for a, b in zip(losses, losses[1:]))
    assert drops >= 0.9 * 50


def test_canonicalization_beats_identity():
    d, C = 4, 3
    spec = ModelSpec((d, 12, C))
    x, y = generate_base(0, 600, d, C, separation=2.0, noise_std=0.5)
    w = init_params(spec, Rng(0))
    opt = OptimizerState.fresh(w, 0.9, 0.1)
    for _ in range(30):
        w, opt, _ = local_steps(w, x, y, opt, 64, spec)
    skew = SkewSpec(identity(d) + 0.5 * Rng(1).stream("g").standard_normal((d, d)) / math.sqrt(d),
                    0.8 * np.ones(d))
    xs, ys = generate_base(0, 400, d, C, stream=1, separation=2.0, noise_std=0.5)
    xs, ys = apply_skew(xs, ys, skew, 0, num_classes=C)
    cfg = TransformOptConfig(learning_rate=0.05, batch_size=128)
    F, _, _ = estimate(AffineTransform.identity(d), w, xs, ys, cfg, fresh_state(d, cfg), steps=200)
    assert mean_loss(w, apply(F, xs), ys, spec) < mean_loss(w, xs, ys, spec)


def test_opt_config_defaults():
    cfg = TransformOptConfig()
    assert (cfg.learning_rate, cfg.momentum, cfg.batch_size) == (0.02, 0.9, 1024)
    assert cfg.effective_batch(300) == 300 and cfg.steps_for(300) == 1
    assert cfg.steps_for(3000) == 3
