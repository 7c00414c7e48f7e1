import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mbpa.engine import (
    AdaptationConfig,
    adapt,
    adaptation_grad,
    adaptation_objective,
    fit_logits,
    mbpa_step,
    mix,
    new_overlay,
    predict_attention,
    predict_attention_regression,
    predict_mbpa,
    predict_mixture,
    predict_parametric,
    predict_random_memory,
    train_step,
)
from mbpa.errors import EmptyMemoryError
from mbpa.memory import Context, EpisodicMemory
from mbpa.nn import EmbeddingNet, OutputNet, finite_diff_grad
from mbpa.optim import SGD
from mbpa.verify import converged_delta, random_context

IDENTITY = EmbeddingNet("identity")


def make_context(keys, values, weights=None):
    keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
    n = len(keys)
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    return Context(keys[0], keys, np.asarray(values), w, w.copy(), np.zeros(n), np.arange(n))


def filled_memory(n=200, dim=4, classes=3, seed=0):
    rng = np.random.default_rng(seed)
    mem = EpisodicMemory(n, dim)
    mem.extend(rng.normal(size=(n, dim)), rng.integers(0, classes, size=n))
    return mem


def scalar_linear_softmax_adapt(W, b, keys, values, weights, lr, steps):
    """Plain-Python gradient descent on weighted NLL of a linear softmax layer."""
    W = [list(map(float, row)) for row in W]
    b = list(map(float, b))
    c = len(b)
    for _ in range(steps):
        gW = [[0.0] * len(W[0]) for _ in range(c)]
        gb = [0.0] * c
        for x, y, w in zip(keys, values, weights):
            z = [sum(W[r][j] * x[j] for j in range(len(x))) + b[r] for r in range(c)]
            m = max(z)
            e = [math.exp(v - m) for v in z]
            s = sum(e)
            p = [v / s for v in e]
            for r in range(c):
                d = w * (p[r] - (1.0 if r == y else 0.0))
                gb[r] += d
                for j in range(len(x)):
                    gW[r][j] += d * x[j]
        W = [[W[r][j] - lr * gW[r][j] for j in range(len(W[0]))] for r in range(c)]
        b = [b[r] - lr * gb[r] for r in range(c)]
    return W, b


class TestConfig:
    @pytest.mark.parametrize("bad", [dict(alpha_m=-1), dict(beta=-0.1), dict(steps=-1), dict(k=0),
                                     dict(mask="middle"), dict(local_optimizer="adam")])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            AdaptationConfig(**bad)

    def test_round_trip(self):
        cfg = AdaptationConfig(alpha_m=0.1, steps=3)
        assert AdaptationConfig.from_dict(cfg.to_dict()) == cfg


class TestObjective:
    def test_prior_zero_at_reference(self):
        rng = np.random.default_rng(0)
        net = OutputNet([3, 5, 2], seed=0)
        ctx = random_context(rng, 3, 2, 4)
        with_prior = adaptation_objective(net, net.params, ctx, 7.0, net.params)
        without = adaptation_objective(net, net.params, ctx, 0.0, net.params)
        assert with_prior == without

    def test_perfect_fit_is_near_zero(self):
        net = OutputNet([2, 2], seed=0)
        net.params = np.array([0.0, 0.0, 0.0, 0.0, 30.0, 0.0])
        ctx = make_context([[1.0, 0.0], [0.0, 1.0]], [0, 0])
        assert adaptation_objective(net, net.params, ctx, 0.0, net.params) < 1e-12

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_scalar_reference(self, seed):
        rng = np.random.default_rng(seed)
        net = OutputNet([3, 3], seed=seed)
        ctx = random_context(rng, 3, 3, 5)
        params = net.params + rng.normal(size=net.layout.size)
        beta = 2.5
        W = params[:9].reshape(3, 3)
        b = params[9:]
        nll = 0.0
        for x, y, w in zip(ctx.keys, ctx.values, ctx.weights):
            z = [sum(W[r, j] * x[j] for j in range(3)) + b[r] for r in range(3)]
            lse = max(z) + math.log(sum(math.exp(v - max(z)) for v in z))
            nll += w * (lse - z[y])
        prior = 0.5 * beta * sum((p - t) ** 2 for p, t in zip(params, net.params))
        got = adaptation_objective(net, params, ctx, beta, net.params)
        assert got == pytest.approx(nll + prior, rel=1e-12)

    @pytest.mark.parametrize("mask", ["all", "last_layer"])
    @pytest.mark.parametrize("beta", [0.0, 3.0])
    def test_grad_matches_finite_differences(self, mask, beta):
        rng = np.random.default_rng(5)
        net = OutputNet([4, 16, 3], activation="tanh", seed=5)
        ctx = random_context(rng, 4, 3, 6)
        params = net.params + 0.1 * rng.normal(size=net.layout.size)
        m = net.mask(mask)
        _, g = adaptation_grad(net, params, ctx, beta, net.params, m)
        fd = finite_diff_grad(lambda p: adaptation_objective(net, p, ctx, beta, net.params, m), params, m)
        assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) < 1e-4
        assert not g[~m].any()


class TestStep:
    def test_zero_lr_leaves_overlay(self):
        net = OutputNet([3, 4, 2], seed=0)
        cfg = AdaptationConfig(alpha_m=0.0)
        ov = new_overlay(net, cfg)
        mbpa_step(net, ov, random_context(np.random.default_rng(0), 3, 2, 3), cfg)
        assert not ov.delta.any()

    def test_delta_zero_outside_mask(self):
        net = OutputNet([3, 4, 2], seed=0)
        cfg = AdaptationConfig(alpha_m=0.5, steps=5, mask="last_layer")
        ov = adapt(net, random_context(np.random.default_rng(1), 3, 2, 4), cfg)
        assert not ov.delta[~net.mask("last_layer")].any()
        assert ov.delta[net.mask("last_layer")].any()

    def test_huge_beta_keeps_delta_tiny(self):
        rng = np.random.default_rng(2)
        net = OutputNet([3, 8, 3], seed=2)
        ctx = random_context(rng, 3, 3, 5)
        beta = 1e6
        cfg = AdaptationConfig(alpha_m=1.0 / (beta + 5.0), beta=beta, steps=0, mask="last_layer")
        ov = new_overlay(net, cfg)
        _, g0 = net.loss_and_grad(ctx.keys, ctx.values, ctx.weights, mask=net.mask("last_layer"))
        mbpa_step(net, ov, ctx, cfg)
        assert np.linalg.norm(ov.delta) == pytest.approx(cfg.alpha_m * np.linalg.norm(g0), rel=1e-12)
        delta = converged_delta(net, ctx, beta)
        assert np.linalg.norm(delta) <= np.linalg.norm(g0) / beta * 1.01
        assert np.linalg.norm(delta) < 1e-3

    def test_confident_net_barely_moves(self):
        net = OutputNet([2, 2], seed=0)
        net.params = np.array([0.0, 0.0, 0.0, 0.0, 40.0, 0.0])
        ctx = make_context([[0.3, -0.2]], [0])
        cfg = AdaptationConfig(alpha_m=0.5)
        ov = new_overlay(net, cfg)
        mbpa_step(net, ov, ctx, cfg)
        assert np.linalg.norm(ov.delta) < 1e-6

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.sampled_from([1e-3, 5e-3, 1e-2]))
    def test_small_steps_descend(self, seed, lr):
        rng = np.random.default_rng(seed)
        net = OutputNet([3, 8, 3], activation="tanh", seed=seed)
        ctx = random_context(rng, 3, 3, int(rng.integers(1, 9)))
        cfg = AdaptationConfig(alpha_m=lr, beta=float(rng.uniform(0, 2)))
        ov = new_overlay(net, cfg)
        prev = adaptation_objective(net, ov.params, ctx, cfg.beta, ov.base)
        for _ in range(5):
            mbpa_step(net, ov, ctx, cfg)
            cur = adaptation_objective(net, ov.params, ctx, cfg.beta, ov.base)
            assert cur <= prev + 1e-12
            prev = cur

    def test_rmsprop_local_optimizer(self):
        net = OutputNet([3, 4, 2], seed=0)
        ctx = random_context(np.random.default_rng(0), 3, 2, 4)
        cfg = AdaptationConfig(alpha_m=0.01, steps=5, local_optimizer="rmsprop")
        ov = adapt(net, ctx, cfg)
        before = adaptation_objective(net, net.params, ctx, 0.0, net.params)
        after = adaptation_objective(net, ov.params, ctx, 0.0, net.params)
        assert after < before


class TestPredictMbpa:
    @pytest.mark.parametrize("cfg", [AdaptationConfig(steps=0), AdaptationConfig(alpha_m=0.0)])
    def test_identity_cases_bit_exact(self, cfg):
        net = OutputNet([4, 8, 3], seed=1)
        mem = filled_memory()
        for x in np.random.default_rng(0).normal(size=(20, 4)):
            assert predict_mbpa(IDENTITY, net, mem, x, cfg).tobytes() == predict_parametric(IDENTITY, net, x).tobytes()

    def test_empty_memory_fallback(self):
        net = OutputNet([4, 8, 3], seed=1)
        x = np.ones(4)
        out = predict_mbpa(IDENTITY, net, EpisodicMemory(5, 4), x, AdaptationConfig())
        np.testing.assert_array_equal(out, net.forward(x))
        with pytest.raises(EmptyMemoryError):
            predict_mbpa(IDENTITY, net, EpisodicMemory(5, 4), x, AdaptationConfig(), fallback=False)

    def test_theta_untouched(self):
        net = OutputNet([4, 8, 3], seed=1)
        theta = net.params.copy()
        mem = filled_memory()
        for x in np.random.default_rng(0).normal(size=(30, 4)):
            predict_mbpa(IDENTITY, net, mem, x, AdaptationConfig(alpha_m=1.0, steps=5))
        assert theta.tobytes() == net.params.tobytes()

    def test_flips_toy_prediction(self):
        net = OutputNet([2, 2], seed=0)
        net.params = np.array([0.5, 0.0, -0.5, 0.0, 1.0, 0.0])  # favours class 0 near the origin
        rng = np.random.default_rng(0)
        mem = EpisodicMemory(10, 2)
        keys = 0.1 * rng.normal(size=(5, 2))
        mem.extend(keys, np.ones(5, dtype=int))
        q = np.zeros(2)
        assert np.argmax(net.forward(q)) == 0
        cfg = AdaptationConfig(alpha_m=1.0, beta=0.0, steps=10, k=5, mask="last_layer")
        p = predict_mbpa(IDENTITY, net, mem, q, cfg)
        assert np.argmax(p) == 1
        ctx = mem.lookup(q, 5)
        views = net.layout.views(net.params)
        W, b = scalar_linear_softmax_adapt(views["dense0.W"], views["dense0.b"], ctx.keys.tolist(),
                                           ctx.values.tolist(), ctx.weights.tolist(), 1.0, 10)
        ref = np.concatenate([np.ravel(W), b])
        np.testing.assert_allclose(adapt(net, ctx, cfg).params, ref, rtol=1e-10, atol=1e-12)

    def test_frozen_embedding_composition(self):
        base = OutputNet([4, 6, 3], seed=2)
        embed = EmbeddingNet.from_hidden_layers(base)
        head = OutputNet([6, 3], seed=3)
        x = np.random.default_rng(0).normal(size=4)
        np.testing.assert_array_equal(predict_parametric(embed, head, x), head.forward(embed(x)))


class TestAttention:
    def test_one_hot(self):
        np.testing.assert_array_equal(predict_attention(make_context([[0.0]], [2]), 4), [0, 0, 1, 0])

    def test_hand_weights(self):
        ctx = make_context([[0.0], [1.0]], [0, 1], [0.8, 0.2])
        np.testing.assert_allclose(predict_attention(ctx, 2), [0.8, 0.2])

    @given(st.lists(st.floats(1e-3, 10.0), min_size=1, max_size=8))
    def test_same_class_is_one_hot(self, w):
        w = np.array(w) / np.sum(w)
        ctx = make_context(np.zeros((len(w), 1)), [1] * len(w), w)
        np.testing.assert_allclose(predict_attention(ctx, 3), [0, 1, 0], atol=1e-15)

    def test_regression_values_rejected(self):
        with pytest.raises(TypeError):
            predict_attention(make_context([[0.0]], np.array([0.5])), 2)

    @given(st.lists(st.tuples(st.floats(-5, 5), st.floats(1e-3, 1.0)), min_size=1, max_size=8))
    def test_regression_within_neighbour_range(self, pairs):
        vals = np.array([v for v, _ in pairs])
        w = np.array([w for _, w in pairs])
        ctx = make_context(np.zeros((len(vals), 1)), vals, w / w.sum())
        y = predict_attention_regression(ctx)
        assert vals.min() - 1e-12 <= y <= vals.max() + 1e-12


class TestFitLogits:
    @pytest.mark.parametrize("seed", range(20))
    def test_converges_to_attention(self, seed):
        rng = np.random.default_rng(seed)
        c, k = int(rng.integers(2, 6)), int(rng.integers(1, 9))
        ctx = random_context(rng, 3, c, k)
        assert np.max(np.abs(fit_logits(ctx, c) - predict_attention(ctx, c))) < 1e-4

    def test_single_class(self):
        assert fit_logits(make_context(np.zeros((3, 1)), [2, 2, 2]), 4).max() > 0.999

    def test_uniform_one_per_class(self):
        np.testing.assert_allclose(fit_logits(make_context(np.zeros((4, 1)), [0, 1, 2, 3]), 4), 0.25,
                                   atol=1e-12)


class TestMixture:
    def test_arithmetic(self):
        np.testing.assert_allclose(mix([0.9, 0.1], [0.1, 0.9], 0.5), [0.5, 0.5])

    def test_endpoints_bit_exact(self):
        net = OutputNet([4, 8, 3], seed=0)
        mem = filled_memory()
        for x in np.random.default_rng(1).normal(size=(10, 4)):
            ctx = mem.lookup(x, 10)
            p1 = predict_mixture(IDENTITY, net, mem, x, 1.0, context=ctx)
            p0 = predict_mixture(IDENTITY, net, mem, x, 0.0, context=ctx)
            assert p1.tobytes() == predict_parametric(IDENTITY, net, x).tobytes()
            assert p0.tobytes() == predict_attention(ctx, 3).tobytes()

    def test_lambda_range(self):
        with pytest.raises(ValueError):
            mix([1.0], [0.0], 1.5)


class TestRandomMemory:
    def test_seeded_and_differs_from_contextual(self):
        net = OutputNet([4, 8, 3], seed=0)
        mem = filled_memory()
        x = np.ones(4)
        cfg = AdaptationConfig(alpha_m=0.5, steps=5, k=5)
        a = predict_random_memory(IDENTITY, net, mem, x, cfg, np.random.default_rng(4))
        b = predict_random_memory(IDENTITY, net, mem, x, cfg, np.random.default_rng(4))
        assert a.tobytes() == b.tobytes()
        assert not np.array_equal(a, predict_mbpa(IDENTITY, net, mem, x, cfg))


class TestTrainStep:
    def test_appends_batch(self):
        net = OutputNet([4, 8, 3], seed=0)
        mem = EpisodicMemory(100, 4)
        xs = np.random.default_rng(0).normal(size=(7, 4))
        train_step(IDENTITY, net, SGD(net.layout.size, 0.1), mem, xs, np.arange(7) % 3)
        assert len(mem) == 7

    def test_zero_lr_still_writes(self):
        net = OutputNet([4, 8, 3], seed=0)
        theta = net.params.copy()
        mem = EpisodicMemory(3, 4)
        train_step(IDENTITY, net, SGD(net.layout.size, 0.0), mem, np.ones((5, 4)), np.zeros(5, dtype=int))
        assert len(mem) == 3
        assert theta.tobytes() == net.params.tobytes()

    def test_single_example_loss_drops(self):
        net = OutputNet([4, 8, 3], seed=0)
        x, y = np.ones((1, 4)), np.array([2])
        before = net.per_example_loss(x, y)[0]
        train_step(IDENTITY, net, SGD(net.layout.size, 0.01), None, x, y)
        assert net.per_example_loss(x, y)[0] < before

    def test_store_mask(self):
        net = OutputNet([4, 8, 3], seed=0)
        mem = EpisodicMemory(10, 4)
        train_step(IDENTITY, net, SGD(net.layout.size, 0.1), mem, np.ones((4, 4)), np.zeros(4, dtype=int),
                   store=np.array([True, False, True, False]))
        assert len(mem) == 2

