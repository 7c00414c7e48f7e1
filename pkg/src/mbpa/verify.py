"""Built-in verification checks run by ``mbpa verify`` and the acceptance tests.

Each check returns a :class:`CheckResult` with the measured value and its
threshold.  Checks that exercise a specific code path take that path as an
argument (``grad_fn``, ``lookup_fn``) so tests can inject faults and confirm
the check notices.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import data as D
from .engine import (
    AdaptationConfig,
    adapt,
    adaptation_grad,
    adaptation_objective,
    fit_logits,
    new_overlay,
    mbpa_step,
    predict_attention,
    predict_mbpa,
    predict_parametric,
)
from .harness import Trainer, compute_auc
from .memory import Context, EpisodicMemory, brute_force_knn, kernel_weights
from .nn import EmbeddingNet, OutputNet, finite_diff_grad
from .optim import Adam


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    threshold: float
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return f"[{status}] {self.name}: measured={self.measured:.3g} threshold={self.threshold:.3g} " \
               f"time={self.seconds:.2f}s{extra}"


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def random_context(rng, dim, num_classes, k, epsilon=1e-3) -> Context:
    keys = rng.normal(size=(k, dim))
    q = rng.normal(size=dim)
    d2 = np.sum((keys - q) ** 2, axis=1)
    raw, w = kernel_weights(d2, epsilon)
    values = rng.integers(0, num_classes, size=k)
    return Context(q, keys, values, w, raw, d2, np.arange(k))


# -- 1 ------------------------------------------------------------------------

@_timed
def check_gradient_oracle(n_instances=100, seed=0, grad_fn=adaptation_grad, tol=1e-4, step=1e-5):
    """Analytic adaptation gradient vs central finite differences on random 2-layer nets."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_instances):
        dim, hidden, c, k = rng.integers(2, 9), rng.integers(4, 65), rng.integers(2, 6), rng.integers(1, 9)
        net = OutputNet([dim, hidden, c], activation=("tanh", "relu")[i % 2], seed=int(rng.integers(2**31)))
        ctx = random_context(rng, dim, c, k)
        theta = net.params
        params = theta + 0.1 * rng.normal(size=theta.size)
        beta = float(rng.choice([0.0, rng.uniform(0.1, 10.0)]))
        mask = net.mask("last_layer" if i % 3 == 2 else "all")
        _, g = grad_fn(net, params, ctx, beta, theta, mask)
        fd = finite_diff_grad(lambda p: adaptation_objective(net, p, ctx, beta, theta, mask), params, mask, step)
        rel = np.max(np.abs(g - fd)) / (np.max(np.abs(fd)) + 1e-12)
        worst = max(worst, float(rel))
    return CheckResult("gradient oracle", worst < tol, worst, tol, f"{n_instances} instances")


# -- 2 ------------------------------------------------------------------------

@_timed
def check_attention_equivalence(n_contexts=200, seed=1, fit=fit_logits, tol=1e-4):
    """Fitted constant logits reproduce the attention histogram."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_contexts):
        c, k = int(rng.integers(2, 6)), int(rng.integers(1, 9))
        ctx = random_context(rng, 4, c, k)
        err = np.max(np.abs(fit(ctx, c) - predict_attention(ctx, c)))
        worst = max(worst, float(err))
    return CheckResult("attention = fitted constant logits", worst < tol, worst, tol, f"{n_contexts} contexts")


# -- 3 ------------------------------------------------------------------------

def _default_lookup(memory, q, k):
    return memory.lookup(q, k)


@_timed
def check_knn_exactness(n_instances=1000, seed=2, lookup_fn=_default_lookup, tol=1e-12, max_entries=4096):
    """Vectorised lookup vs pure-Python brute force, plus FIFO eviction for capacities 1..8."""
    rng = np.random.default_rng(seed)
    mismatches, worst_w = 0, 0.0
    for _ in range(n_instances):
        n = int(np.exp(rng.uniform(0, np.log(max_entries))))
        dim = int(rng.integers(1, 17))
        capacity = int(rng.integers(max(1, n // 2), n + 1))
        mem = EpisodicMemory(capacity, dim, epsilon=float(rng.choice([1e-3, 1e-1, 1.0])))
        keys = rng.normal(size=(n, dim))
        if n > 2 and rng.random() < 0.3:
            dup = rng.integers(0, n, size=max(1, n // 4))
            keys[dup] = keys[rng.integers(0, n)]
        mem.extend(keys, rng.integers(0, 10, size=n))
        q = rng.normal(size=dim) if rng.random() < 0.8 else mem.entries()[0][rng.integers(len(mem))]
        k = int(rng.integers(1, 65))
        got, ref = lookup_fn(mem, q, k), brute_force_knn(mem, q, k)
        if not np.array_equal(got.indices, ref.indices):
            mismatches += 1
            continue
        worst_w = max(worst_w, float(np.max(np.abs(got.weights - ref.weights))))
    fifo_ok = _fifo_ok(rng)
    passed = mismatches == 0 and worst_w <= tol and fifo_ok
    detail = f"{mismatches} neighbour-set mismatches / {n_instances}, max weight diff {worst_w:.1e}, " \
             f"fifo {'ok' if fifo_ok else 'BROKEN'}"
    return CheckResult("kNN exactness", passed, float(mismatches), 0.0, detail)


def _fifo_ok(rng) -> bool:
    for capacity in range(1, 9):
        for n in range(0, 3 * capacity + 2):
            mem = EpisodicMemory(capacity, 2)
            sim = []
            for i in range(n):
                mem.append(rng.normal(size=2), i)
                sim.append(i)
                if len(sim) > capacity:
                    sim.pop(0)
            _, values, order = mem.entries()
            if order.tolist() != sim or values.tolist() != sim:
                return False
    return True


# -- 4 ------------------------------------------------------------------------

@_timed
def check_identity_isolation(n_inputs=1000, seed=3):
    """T=0 and alpha=0 reproduce the parametric prediction bit-for-bit; theta never changes."""
    rng = np.random.default_rng(seed)
    dim, c = 8, 5
    net = OutputNet([dim, 32, c], seed=seed)
    embed = EmbeddingNet("identity")
    mem = EpisodicMemory(500, dim)
    mem.extend(rng.normal(size=(500, dim)), rng.integers(0, c, size=500))
    theta0 = net.params.copy()
    xs = rng.normal(size=(n_inputs, dim))
    bad_t0 = bad_a0 = 0
    for x in xs:
        p = predict_parametric(embed, net, x)
        bad_t0 += not np.array_equal(p, predict_mbpa(embed, net, mem, x, AdaptationConfig(steps=0)))
        bad_a0 += not np.array_equal(p, predict_mbpa(embed, net, mem, x, AdaptationConfig(alpha_m=0.0)))
    cfg = AdaptationConfig(alpha_m=0.5, steps=3, k=5)
    for x in xs:
        predict_mbpa(embed, net, mem, x, cfg)
    theta_same = np.array_equal(theta0, net.params) and theta0.tobytes() == net.params.tobytes()
    failures = bad_t0 + bad_a0 + (0 if theta_same else 1)
    return CheckResult("identity at T=0 / alpha=0 and theta isolation", failures == 0, float(failures), 0.0,
                       f"T=0 mismatches {bad_t0}, alpha=0 mismatches {bad_a0}, theta unchanged {theta_same}")


# -- 5 ------------------------------------------------------------------------

def self_regulation_curve(seed=4, checkpoints=(0, 1, 5, 20, 50, 100, 200), n_probe=50):
    """Mean ``||delta||`` of MbPA corrections on held-out probes as the net trains.

    A 500-example gaussian-cluster set is written to memory, then the net
    trains on it with Adam; at each checkpoint (in epochs) every probe query is
    adapted on its neighbours and the correction norm is recorded.
    """
    spec = D.SyntheticSpec("gaussian-clusters", dims=16, classes=5, samples_per_class=100 + n_probe // 5,
                           spread=0.3, seed=seed)
    train, probe = D.split_per_class(D.gen_synthetic(spec), n_probe // 5, seed)
    net = OutputNet([16, 32, 5], seed=seed)
    embed = EmbeddingNet("identity")
    mem = EpisodicMemory(len(train), 16)
    mem.extend(train.inputs, train.targets)
    trainer = Trainer(embed, net, Adam(net.layout.size, lr=1e-2), None, train, 32, seed)
    cfg = AdaptationConfig(alpha_m=0.1, steps=5, k=10)
    norms, done = [], 0
    for ck in checkpoints:
        trainer.advance_epochs(ck - done)
        done = ck
        deltas = [np.linalg.norm(adapt(net, mem.lookup(q, cfg.k), cfg).delta) for q in probe.inputs]
        norms.append(float(np.mean(deltas)))
    return list(checkpoints), norms


@_timed
def check_self_regulation(seed=4, tol=0.1):
    """The adaptation correction shrinks as the parametric model fits the memorised data."""
    cks, norms = self_regulation_curve(seed)
    ratio = norms[-1] / norms[0]
    curve = ", ".join(f"{c}:{n:.3g}" for c, n in zip(cks, norms))
    return CheckResult("self-regulation ||delta|| final/initial", ratio < tol, ratio, tol, curve)


# -- 9 ------------------------------------------------------------------------

def converged_delta(net, ctx, beta, max_steps=50_000, tol=1e-13):
    """Run SGD MbPA steps on the last layer until the correction stops moving."""
    lr = 1.0 / (beta + 5.0)
    cfg = AdaptationConfig(alpha_m=lr, beta=beta, steps=0, mask="last_layer")
    overlay = new_overlay(net, cfg)
    for _ in range(max_steps):
        before = overlay.delta.copy()
        mbpa_step(net, overlay, ctx, cfg)
        if np.max(np.abs(overlay.delta - before)) < tol:
            break
    return overlay.delta


@_timed
def check_beta_contraction(betas=(1.0, 10.0, 100.0), n_instances=10, seed=5, slack=0.10):
    """Converged ``||delta*|| <= ||grad NLL at theta|| / beta`` (last layer, convex)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for beta in betas:
        for _ in range(n_instances):
            dim, c, k = int(rng.integers(2, 9)), int(rng.integers(2, 6)), int(rng.integers(1, 9))
            net = OutputNet([dim, 16, c], seed=int(rng.integers(2**31)))
            ctx = random_context(rng, dim, c, k)
            mask = net.mask("last_layer")
            _, g = net.loss_and_grad(ctx.keys, ctx.values, ctx.weights, mask=mask)
            bound = np.linalg.norm(g) / beta
            delta = converged_delta(net, ctx, beta)
            worst = max(worst, float(np.linalg.norm(delta) / bound) if bound > 0 else 0.0)
    limit = 1.0 + slack
    return CheckResult("beta contraction ||delta*|| / (||grad||/beta)", worst <= limit, worst, limit,
                       f"betas {list(betas)}")


# -- 10 -----------------------------------------------------------------------

@_timed
def check_auc_arithmetic(tol=1e-12):
    got = compute_auc([(0, 0.2), (1, 0.6), (3, 0.6)])
    want = (0.4 * 1 + 0.6 * 2) / 3
    err = abs(got - want)
    return CheckResult("AUC trapezoid arithmetic", err <= tol, err, tol, f"auc={got!r}")


FAST_CHECKS = (
    check_gradient_oracle,
    check_attention_equivalence,
    check_knn_exactness,
    check_identity_isolation,
    check_self_regulation,
    check_beta_contraction,
    check_auc_arithmetic,
)


def run_checks(hooks: dict | None = None) -> list[CheckResult]:
    """Run every fast check.  ``hooks`` may supply ``grad_fn`` and/or ``lookup_fn`` overrides."""
    hooks = hooks or {}
    out = []
    for check in FAST_CHECKS:
        kwargs = {}
        if check is check_gradient_oracle and "grad_fn" in hooks:
            kwargs["grad_fn"] = hooks["grad_fn"]
        if check is check_knn_exactness and "lookup_fn" in hooks:
            kwargs["lookup_fn"] = hooks["lookup_fn"]
        out.append(check(**kwargs))
    return out
