"""Desk-scale experiment regimes: continual, incremental, unbalanced, regression demo, sweeps.

Every regime returns a list of :class:`EvalRecord`.  Within one evaluation
phase all predictors score the same frozen network and memory snapshot, and
each test example shares a single memory lookup between the memory-based
predictors.  Per-example work may run on a thread pool; results are gathered
in example order, so output does not depend on the worker count.
"""
from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import data as D
from .config import SWEEP_AXES, RunConfig, apply_overrides
from .engine import (
    AdaptationConfig,
    adapt,
    mix,
    predict_attention,
    predict_attention_regression,
)
from .memory import EpisodicMemory
from .nn import EmbeddingNet, OutputNet
from .optim import make_optimizer

log = logging.getLogger(__name__)

PREDICTORS = ("parametric", "mbpa", "attention", "mixture", "mbpa-random")
DEFAULT_PREDICTORS = {
    "continual": ["parametric", "mbpa", "attention", "mixture", "mbpa-random"],
    "incremental": ["parametric", "mbpa", "attention", "mixture"],
    "unbalanced": ["parametric", "mbpa", "attention", "mixture"],
}


@dataclass
class EvalRecord:
    regime: str
    task: int            # training phase index
    epoch: float         # epochs trained within the phase
    predictor: str
    split: str           # all-seen | per-task | novel | pretrained | starved | full
    top1: float
    auc: float           # trapezoidal mean of top1 over this series' evaluation points so far
    n: int
    eval_task: int | None = None

    def to_dict(self):
        return asdict(self)


@dataclass
class Task:
    task_id: int
    train: D.LabeledDataset
    test: D.LabeledDataset


@dataclass
class TaskStream:
    kind: str                       # permuted-tasks | incremental-classes | unbalanced-classes
    tasks: list
    num_classes: int
    params: dict = field(default_factory=dict)


# -- AUC -----------------------------------------------------------------------

def compute_auc(points) -> float:
    """Trapezoidal area under ``[(epoch, top1), ...]`` divided by the epoch span."""
    pts = [(float(e), float(a)) for e, a in points]
    if len(pts) < 2:
        raise ValueError("compute_auc needs at least two checkpoints")
    xs = [e for e, _ in pts]
    if any(b <= a for a, b in zip(xs, xs[1:])):
        raise ValueError("checkpoints must be strictly increasing")
    area = sum((x1 - x0) * (y0 + y1) / 2.0 for (x0, y0), (x1, y1) in zip(pts, pts[1:]))
    return area / (xs[-1] - xs[0])


def _auc_so_far(points):
    return points[0][1] if len(points) == 1 else compute_auc(points)


# -- training ------------------------------------------------------------------

class Trainer:
    """Streams shuffled minibatches of one dataset through ``train_step``-style updates.

    Training position persists across calls, so ``advance_epochs(0.1)`` followed
    by ``advance_epochs(0.9)`` equals one full epoch.  Memory writes follow
    ``write``: ``every_pass`` appends every trained example (duplicates across
    epochs), ``first_pass`` appends each example only the first time it is
    seen.  ``store_limit`` caps the number of writes from this trainer.
    """

    def __init__(self, embed, net, opt, memory, ds, batch_size, seed,
                 write="first_pass", store_limit=None):
        self.embed, self.net, self.opt, self.memory, self.ds = embed, net, opt, memory, ds
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self.write = write
        self.store_limit = store_limit
        self.stored = 0
        self.seen = np.zeros(len(ds), dtype=bool)
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0
        self.consumed = 0

    def _next_indices(self, n):
        out = []
        while n > 0:
            if self._pos >= len(self._order):
                self._order = self.rng.permutation(len(self.ds))
                self._pos = 0
            take = min(n, len(self._order) - self._pos)
            out.append(self._order[self._pos:self._pos + take])
            self._pos += take
            n -= take
        return np.concatenate(out) if out else np.empty(0, dtype=np.int64)

    def advance(self, n_examples: int):
        while n_examples > 0:
            b = min(self.batch_size, n_examples)
            idx = self._next_indices(b)
            self._step(idx)
            n_examples -= b
            self.consumed += b

    def advance_epochs(self, epochs: float):
        self.advance(int(round(epochs * len(self.ds))))

    def _step(self, idx):
        xs, ys = self.ds.inputs[idx], self.ds.targets[idx]
        h = self.embed(xs)
        b = len(idx)
        _, grad = self.net.loss_and_grad(h, ys, np.full(b, 1.0 / b))
        self.net.params = self.opt.step(self.net.params, grad)
        if self.memory is None:
            return
        keep = np.ones(b, dtype=bool) if self.write == "every_pass" else ~self.seen[idx]
        self.seen[idx] = True
        if self.store_limit is not None:
            room = max(self.store_limit - self.stored, 0)
            keep &= np.cumsum(keep) <= room
        if keep.any():
            self.memory.extend(h[keep], ys[keep])
            self.stored += int(keep.sum())


# -- evaluation ----------------------------------------------------------------

def _n_threads(cfg: RunConfig) -> int:
    return cfg.threads or os.cpu_count() or 1


def evaluate(embed, net, memory, ds: D.LabeledDataset, acfg: AdaptationConfig, lam: float,
             predictors, seed: int = 0, threads: int = 1) -> dict:
    """Per-example correctness (bool arrays) for each requested predictor.

    With an empty memory every memory-based predictor falls back to the
    parametric prediction.
    """
    Q = embed(ds.inputs)
    y = ds.targets
    c = net.output_dim
    need_ctx = any(p in ("mbpa", "attention", "mixture") for p in predictors)
    use_mem = memory is not None and len(memory) > 0

    def one(i):
        q = Q[i]
        p_param = net.forward(q)
        out = {"parametric": p_param}
        ctx = memory.lookup(q, acfg.k) if (use_mem and need_ctx) else None
        if "mbpa" in predictors:
            if ctx is None or acfg.steps == 0 or acfg.alpha_m == 0.0:
                out["mbpa"] = p_param
            else:
                out["mbpa"] = net.forward(q, params=adapt(net, ctx, acfg).params)
        if "attention" in predictors or "mixture" in predictors:
            p_att = predict_attention(ctx, c) if ctx is not None else p_param
            out["attention"] = p_att
            out["mixture"] = mix(p_param, p_att, lam) if ctx is not None else p_param
        if "mbpa-random" in predictors:
            if not use_mem or acfg.steps == 0 or acfg.alpha_m == 0.0:
                out["mbpa-random"] = p_param
            else:
                rctx = memory.sample(acfg.k, np.random.default_rng([seed, i]), query=q)
                out["mbpa-random"] = net.forward(q, params=adapt(net, rctx, acfg).params)
        return {p: int(np.argmax(out[p])) == int(y[i]) for p in predictors}

    if threads > 1 and len(y) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one, range(len(y))))
    else:
        rows = [one(i) for i in range(len(y))]
    return {p: np.array([r[p] for r in rows], dtype=bool) for p in predictors}


def _subset(ds: D.LabeledDataset, n: int, seed: int) -> D.LabeledDataset:
    if n >= len(ds):
        return ds
    idx = np.sort(np.random.default_rng([seed, 11]).choice(len(ds), size=n, replace=False))
    return ds.take(idx)


def _make_net(in_dim, out_dim, cfg: RunConfig, seed):
    return OutputNet([in_dim, *cfg.model.hidden, out_dim], cfg.model.activation, "softmax", seed=seed)


# -- continual -----------------------------------------------------------------

def _base_classification_data(cfg: RunConfig, seed: int):
    d = cfg.data
    if d.source == "mnist":
        train = D.load_idx(*D.find_mnist("train", d.mnist_dir))
        test = D.load_idx(*D.find_mnist("test", d.mnist_dir))
        return train, test
    spec = D.SyntheticSpec("gaussian-clusters", d.dims, d.classes,
                           d.train_per_class + d.test_per_class, d.spread, seed)
    return D.split_per_class(D.gen_synthetic(spec), d.test_per_class, seed)


def build_permuted_stream(cfg: RunConfig, seed: int | None = None) -> TaskStream:
    """Permuted-feature tasks over one shared pool of examples.

    Each task draws the same ``train_per_task`` examples (without replacement)
    and applies its own seeded feature permutation.
    """
    seed = cfg.seed if seed is None else seed
    train, test = _base_classification_data(cfg, seed)
    n_train = min(cfg.continual.train_per_task, len(train))
    rng = np.random.default_rng([seed, 21])
    train = train.take(np.sort(rng.choice(len(train), size=n_train, replace=False)))
    tasks = []
    for t in range(cfg.continual.tasks):
        perm = D.pixel_permutation(train.dim, seed * 1000 + t)
        tasks.append(Task(t, D.apply_permutation(train, perm), D.apply_permutation(test, perm)))
    return TaskStream("permuted-tasks", tasks, train.num_classes, {"tasks": cfg.continual.tasks})


def run_continual(stream: TaskStream, cfg: RunConfig, seed: int | None = None) -> list[EvalRecord]:
    if stream.kind != "permuted-tasks":
        raise ValueError(f"run_continual needs a permuted-tasks stream, got {stream.kind}")
    seed = cfg.seed if seed is None else seed
    acfg = cfg.adapt
    predictors = cfg.predictors or DEFAULT_PREDICTORS["continual"]
    dim = stream.tasks[0].train.dim
    embed = EmbeddingNet("identity")
    net = _make_net(dim, stream.num_classes, cfg, seed)
    opt = make_optimizer(cfg.model.optimizer, net.layout.size, cfg.model.lr)
    memory = EpisodicMemory(cfg.memory.capacity, dim, acfg.epsilon)
    tests = [_subset(t.test, cfg.eval_subset, seed + t.task_id) for t in stream.tasks]

    records, history = [], {}
    for task in stream.tasks:
        trainer = Trainer(embed, net, opt, memory, task.train, cfg.model.batch_size,
                          [seed, 31, task.task_id], cfg.memory.write, cfg.memory.store_per_task)
        trainer.advance_epochs(cfg.continual.epochs_per_task)
        log.info("task %d trained, memory %d", task.task_id, len(memory))
        seen = stream.tasks[:task.task_id + 1]
        per_task = {}
        for old in seen:
            per_task[old.task_id] = evaluate(embed, net, memory, tests[old.task_id], acfg, cfg.mixture.lam,
                                             predictors, seed=seed * 7919 + old.task_id, threads=_n_threads(cfg))
        for p in predictors:
            for old in seen:
                acc = float(per_task[old.task_id][p].mean())
                key = (p, "per-task", old.task_id)
                history.setdefault(key, []).append((task.task_id, acc))
                records.append(EvalRecord("continual", task.task_id, cfg.continual.epochs_per_task, p,
                                          "per-task", acc, _auc_so_far(history[key]),
                                          len(per_task[old.task_id][p]), old.task_id))
            allc = np.concatenate([per_task[o.task_id][p] for o in seen])
            acc = float(allc.mean())
            key = (p, "all-seen", None)
            history.setdefault(key, []).append((task.task_id, acc))
            records.append(EvalRecord("continual", task.task_id, cfg.continual.epochs_per_task, p,
                                      "all-seen", acc, _auc_so_far(history[key]), len(allc)))
    return records


# -- incremental / unbalanced --------------------------------------------------

def build_class_stream(cfg: RunConfig, unbalanced: bool = False, seed: int | None = None,
                       fractions=None) -> TaskStream:
    """Pretrain task on a random subset of classes, then a task over all classes.

    For the unbalanced variant half of the novel classes (the "starved" ones)
    keep only ``starved_fraction`` of their training data in the second task.
    ``fractions`` overrides the per-class fractions directly.
    """
    seed = cfg.seed if seed is None else seed
    train, test = _base_classification_data(cfg, seed)
    c = train.num_classes
    rng = np.random.default_rng([seed, 41])
    n_pre = max(1, int(round(cfg.incremental.pretrain_fraction * c)))
    pretrained = np.sort(rng.choice(c, size=n_pre, replace=False))
    novel = np.setdiff1d(np.arange(c), pretrained)
    starved = np.sort(rng.choice(novel, size=len(novel) // 2, replace=False))
    full_novel = np.setdiff1d(novel, starved)
    pre_train = train.take(train.where_class(pretrained))
    main_train = train
    if unbalanced or fractions is not None:
        if fractions is None:
            fractions = {int(k): cfg.incremental.starved_fraction for k in starved}
        main_train = D.subsample_classes(train, fractions, seed)
    kind = "unbalanced-classes" if unbalanced else "incremental-classes"
    params = {"pretrained": pretrained.tolist(), "novel": novel.tolist()}
    if unbalanced:
        params.update(starved=starved.tolist(), full=full_novel.tolist())
    return TaskStream(kind, [Task(0, pre_train, test), Task(1, main_train, test)], c, params)


def _run_class_regime(stream: TaskStream, cfg: RunConfig, regime: str, seed: int) -> list[EvalRecord]:
    acfg = cfg.adapt
    predictors = cfg.predictors or DEFAULT_PREDICTORS[regime]
    pre, main = stream.tasks
    dim = pre.train.dim
    c = stream.num_classes

    base = _make_net(dim, c, cfg, seed)
    opt = make_optimizer(cfg.model.optimizer, base.layout.size, cfg.model.lr)
    identity = EmbeddingNet("identity")
    if cfg.model.embedding == "identity":
        embed, net = identity, base
        memory = EpisodicMemory(cfg.memory.capacity, dim, acfg.epsilon)
        Trainer(embed, net, opt, memory, pre.train, cfg.model.batch_size, [seed, 51],
                cfg.memory.write).advance_epochs(cfg.incremental.pretrain_epochs)
    else:
        # pretrain the full stack, then freeze its hidden layers as f_gamma and keep
        # training only the output layer; memory starts with the new phase's keys
        Trainer(identity, base, opt, None, pre.train, cfg.model.batch_size, [seed, 51]
                ).advance_epochs(cfg.incremental.pretrain_epochs)
        embed = EmbeddingNet.from_hidden_layers(base)
        last = base.n_layers - 1
        views = base.layout.views(base.params)
        W, b = views[f"dense{last}.W"], views[f"dense{last}.b"]
        net = OutputNet([W.shape[1], c], head="softmax", params=np.concatenate([W.ravel(), b]))
        opt = make_optimizer(cfg.model.optimizer, net.layout.size, cfg.model.lr)
        memory = EpisodicMemory(cfg.memory.capacity, W.shape[1], acfg.epsilon)

    test = _subset(main.test, cfg.eval_subset, seed)
    splits = {"pretrained": stream.params["pretrained"], "novel": stream.params["novel"]}
    if "starved" in stream.params:
        splits["starved"] = stream.params["starved"]
        splits["full"] = stream.params["full"]
    split_idx = {s: np.isin(test.targets, cls) for s, cls in splits.items()}

    trainer = Trainer(embed, net, opt, memory, main.train, cfg.model.batch_size, [seed, 52], cfg.memory.write)
    records, history, done = [], {}, 0.0
    for ck in cfg.incremental.checkpoints:
        trainer.advance(int(round(ck * len(main.train))) - trainer.consumed)
        res = evaluate(embed, net, memory, test, acfg, cfg.mixture.lam, predictors,
                       seed=seed * 7919 + int(ck * 1000), threads=_n_threads(cfg))
        for s, m in split_idx.items():
            for p in predictors:
                acc = float(res[p][m].mean())
                key = (p, s)
                history.setdefault(key, []).append((ck, acc))
                records.append(EvalRecord(regime, 1, float(ck), p, s, acc, _auc_so_far(history[key]), int(m.sum())))
        done = ck
    log.info("%s finished at epoch %g, memory %d", regime, done, len(memory))
    return records


def run_incremental(stream: TaskStream, cfg: RunConfig, seed: int | None = None) -> list[EvalRecord]:
    if stream.kind != "incremental-classes":
        raise ValueError(f"run_incremental needs an incremental-classes stream, got {stream.kind}")
    return _run_class_regime(stream, cfg, "incremental", cfg.seed if seed is None else seed)


def run_unbalanced(stream: TaskStream, cfg: RunConfig, seed: int | None = None) -> list[EvalRecord]:
    if stream.kind != "unbalanced-classes":
        raise ValueError(f"run_unbalanced needs an unbalanced-classes stream, got {stream.kind}")
    return _run_class_regime(stream, cfg, "unbalanced", cfg.seed if seed is None else seed)


# -- regression demo -----------------------------------------------------------

def run_regression_demo(cfg: RunConfig, seed: int | None = None) -> list[dict]:
    """Fit a small regression net to sparse 1-D data and compare predictions on a dense grid.

    With ``regression.gap = [lo, hi]`` the network never trains on that
    interval, while ``gap_memory_points`` points from it are written to memory
    (information arriving after training).  Returns rows with keys
    ``x, y_true, y_parametric, y_attention, y_mbpa``.
    """
    seed = cfg.seed if seed is None else seed
    r = cfg.regression
    spec = D.SyntheticSpec("regression-1d", 1, 1, r.n_train, r.noise, seed)
    ds = D.gen_synthetic(spec)
    x, y = ds.inputs[:, 0], ds.targets
    if r.gap is not None:
        lo, hi = r.gap
        outside = (x < lo) | (x > hi)
        train = D.LabeledDataset(ds.inputs[outside], y[outside])
        rng = np.random.default_rng([seed, 61])
        gx = np.sort(rng.uniform(lo, hi, size=r.gap_memory_points))
        gy = D.regression_curve(gx) + r.noise * rng.normal(size=len(gx))
        mem_x = np.concatenate([train.inputs[:, 0], gx])
        mem_y = np.concatenate([train.targets, gy])
    else:
        train = ds
        mem_x, mem_y = x, y

    net = OutputNet([1, *r.hidden, 1], "tanh", "regression", seed=seed)
    embed = EmbeddingNet("identity")
    opt = make_optimizer("adam", net.layout.size, r.lr)
    Trainer(embed, net, opt, None, train, cfg.model.batch_size, [seed, 62]).advance_epochs(r.epochs)

    memory = EpisodicMemory(max(cfg.memory.capacity, len(mem_x)), 1, cfg.adapt.epsilon, value_kind="scalar")
    memory.extend(mem_x[:, None], mem_y)
    acfg = AdaptationConfig(alpha_m=r.alpha_m, beta=cfg.adapt.beta, steps=r.steps, k=r.k,
                            epsilon=cfg.adapt.epsilon, mask=cfg.adapt.mask,
                            local_optimizer=cfg.adapt.local_optimizer)
    grid = np.linspace(-2.0, 2.0, r.grid_points)

    def one(i):
        q = grid[i:i + 1]
        ctx = memory.lookup(q, acfg.k)
        y_mbpa = net.forward(q, params=adapt(net, ctx, acfg).params)
        return {"x": float(grid[i]), "y_true": float(D.regression_curve(grid[i])),
                "y_parametric": net.forward(q), "y_attention": predict_attention_regression(ctx),
                "y_mbpa": y_mbpa}

    threads = _n_threads(cfg)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, range(len(grid))))
    return [one(i) for i in range(len(grid))]


# -- dispatch, sweeps, output --------------------------------------------------

def run_regime(cfg: RunConfig, regime: str | None = None, seed: int | None = None) -> list[EvalRecord]:
    regime = regime or cfg.regime
    seed = cfg.seed if seed is None else seed
    if regime == "continual":
        return run_continual(build_permuted_stream(cfg, seed), cfg, seed)
    if regime == "incremental":
        return run_incremental(build_class_stream(cfg, False, seed), cfg, seed)
    if regime == "unbalanced":
        return run_unbalanced(build_class_stream(cfg, True, seed), cfg, seed)
    raise ValueError(f"regime {regime!r} does not produce evaluation records")


def headline(records: list[EvalRecord], regime: str, predictor: str = "mbpa") -> EvalRecord:
    """Final all-seen (continual) or novel-split (class regimes) record of ``predictor``."""
    split = "all-seen" if regime == "continual" else "novel"
    rows = [r for r in records if r.predictor == predictor and r.split == split]
    return rows[-1]


def run_sweep(cfg: RunConfig, seed: int | None = None) -> list[tuple[object, EvalRecord]]:
    """One full regime run per axis value with seeds held fixed."""
    sw = cfg.sweep
    path = SWEEP_AXES[sw.axis]
    out = []
    for value in sw.values:
        run_cfg = apply_overrides(cfg, {path: value})
        run_cfg.regime = sw.regime
        records = run_regime(run_cfg, sw.regime, seed)
        out.append((value, headline(records, sw.regime)))
    return out


def write_jsonl(records, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(json.dumps(r.to_dict() if isinstance(r, EvalRecord) else r, sort_keys=True) + "\n")


CSV_COLUMNS = ("phase", "predictor", "split", "eval_task", "top1", "auc", "n")


def write_csv(records, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow([f"{r.task}:{r.epoch:g}", r.predictor, r.split,
                        "" if r.eval_task is None else r.eval_task, repr(r.top1), repr(r.auc), r.n])


CURVE_COLUMNS = ("x", "y_true", "y_parametric", "y_attention", "y_mbpa")


def write_curve_csv(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for row in rows:
            w.writerow([repr(float(row[c])) for c in CURVE_COLUMNS])


def summarize_repeats(runs: list[list[EvalRecord]]) -> list[dict]:
    """Mean and standard deviation of top1/auc per (phase, predictor, split, eval_task)."""
    groups = {}
    for records in runs:
        for r in records:
            key = (r.task, r.epoch, r.predictor, r.split, r.eval_task)
            groups.setdefault(key, []).append((r.top1, r.auc))
    out = []
    for (task, epoch, p, s, et), vals in groups.items():
        arr = np.array(vals)
        out.append({"task": task, "epoch": epoch, "predictor": p, "split": s, "eval_task": et,
                    "repeats": len(vals), "top1_mean": float(arr[:, 0].mean()),
                    "top1_std": float(arr[:, 0].std()), "auc_mean": float(arr[:, 1].mean()),
                    "auc_std": float(arr[:, 1].std())})
    return out


def derived_seed(seed: int, repeat: int) -> int:
    return seed if repeat == 0 else int(np.random.default_rng([seed, 99, repeat]).integers(2**31))

