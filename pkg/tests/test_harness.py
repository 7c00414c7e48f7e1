import csv
import json

import numpy as np
import pytest

from mbpa import harness as H
from mbpa.config import parse_config
from mbpa.engine import AdaptationConfig, adapt
from mbpa.memory import EpisodicMemory
from mbpa.nn import OutputNet
from mbpa.optim import Adam

SMALL_CONTINUAL = {
    "continual.train_per_task": 400, "continual.epochs_per_task": 5, "eval_subset": 200,
    "data.dims": 16, "data.train_per_class": 50, "data.test_per_class": 20, "model.hidden": [32],
}
SMALL_CLASSES = {
    "data.dims": 16, "data.classes": 8, "data.train_per_class": 60, "data.test_per_class": 20,
    "model.hidden": [32], "incremental.pretrain_epochs": 5, "eval_subset": 160,
}


def cfg_for(regime, **extra):
    base = dict(SMALL_CONTINUAL if regime == "continual" else SMALL_CLASSES)
    base.update(extra)
    base["regime"] = regime
    return parse_config(None, base)


def by_key(records):
    return {(r.task, r.epoch, r.predictor, r.split, r.eval_task): r for r in records}


class TestAuc:
    def test_constant(self):
        assert H.compute_auc([(0, 0.7), (0.5, 0.7), (4, 0.7)]) == pytest.approx(0.7, abs=1e-15)

    def test_ramp(self):
        assert H.compute_auc([(0, 0.0), (1, 1.0)]) == 0.5

    def test_piecewise(self):
        assert abs(H.compute_auc([(0, 0.2), (1, 0.6), (3, 0.6)]) - (0.4 * 1 + 0.6 * 2) / 3) <= 1e-12

    @pytest.mark.parametrize("pts", [[(0, 1.0)], [(0, 0.1), (0, 0.2)], [(1, 0.1), (0, 0.2)]])
    def test_invalid(self, pts):
        with pytest.raises(ValueError):
            H.compute_auc(pts)


class TestTrainer:
    def test_fractional_epochs_accumulate(self):
        from mbpa import data as D
        from mbpa.nn import EmbeddingNet
        ds = D.gen_synthetic(D.SyntheticSpec(dims=4, classes=2, samples_per_class=50))
        nets = [OutputNet([4, 2], seed=0) for _ in range(2)]
        a = H.Trainer(EmbeddingNet("identity"), nets[0], Adam(10, 1e-2), None, ds, 8, 0)
        b = H.Trainer(EmbeddingNet("identity"), nets[1], Adam(10, 1e-2), None, ds, 8, 0)
        a.advance_epochs(1.0)
        b.advance(64)
        b.advance(36)
        assert a.consumed == b.consumed == 100
        assert nets[0].params.tobytes() == nets[1].params.tobytes()

    def test_first_pass_writes_once(self):
        from mbpa import data as D
        from mbpa.nn import EmbeddingNet
        ds = D.gen_synthetic(D.SyntheticSpec(dims=4, classes=2, samples_per_class=20))
        mem = EpisodicMemory(1000, 4)
        H.Trainer(EmbeddingNet("identity"), OutputNet([4, 2], seed=0), Adam(10, 1e-2), mem, ds, 8, 0
                  ).advance_epochs(3)
        assert len(mem) == 40
        mem2 = EpisodicMemory(1000, 4)
        H.Trainer(EmbeddingNet("identity"), OutputNet([4, 2], seed=0), Adam(10, 1e-2), mem2, ds, 8, 0,
                  write="every_pass").advance_epochs(3)
        assert len(mem2) == 120


class TestStreams:
    def test_permuted_tasks_share_examples(self):
        cfg = cfg_for("continual")
        stream = H.build_permuted_stream(cfg)
        a, b = stream.tasks[0].train, stream.tasks[1].train
        np.testing.assert_array_equal(a.targets, b.targets)
        np.testing.assert_allclose(np.sort(a.inputs, axis=1), np.sort(b.inputs, axis=1))
        assert not np.array_equal(a.inputs, b.inputs)

    def test_train_test_disjoint(self):
        stream = H.build_class_stream(cfg_for("incremental"))
        train, test = stream.tasks[1].train, stream.tasks[1].test
        rows = {r.tobytes() for r in train.inputs}
        assert not any(r.tobytes() in rows for r in test.inputs)

    def test_pretrain_holds_only_pretrained_classes(self):
        stream = H.build_class_stream(cfg_for("incremental"))
        assert set(np.unique(stream.tasks[0].train.targets)) == set(stream.params["pretrained"])

    def test_wrong_stream_kind(self):
        cfg = cfg_for("incremental")
        with pytest.raises(ValueError):
            H.run_continual(H.build_class_stream(cfg), cfg)


class TestContinual:
    def test_single_task_mbpa_not_worse(self):
        cfg = cfg_for("continual", **{"continual.tasks": 1})
        recs = H.run_regime(cfg)
        par = H.headline(recs, "continual", "parametric").top1
        mbpa = H.headline(recs, "continual", "mbpa").top1
        assert mbpa >= par - 0.02

    def test_capacity_zero_degenerates(self):
        cfg = cfg_for("continual", **{"memory.capacity": 0})
        recs = H.run_regime(cfg)
        table = by_key(recs)
        for (t, e, p, s, et), r in table.items():
            if p in ("mbpa", "attention", "mixture", "mbpa-random"):
                assert r.top1 == table[(t, e, "parametric", s, et)].top1

    def test_record_layout(self):
        recs = H.run_regime(cfg_for("continual"))
        per_task = [r for r in recs if r.split == "per-task" and r.predictor == "parametric"]
        assert [(r.task, r.eval_task) for r in per_task] == [(0, 0), (1, 0), (1, 1)]
        assert all(0.0 <= r.top1 <= 1.0 for r in recs)

    def test_auc_is_running_trapezoid(self):
        recs = H.run_regime(cfg_for("continual", **{"continual.tasks": 3}))
        series = [r for r in recs if r.split == "all-seen" and r.predictor == "mbpa"]
        pts = [(r.task, r.top1) for r in series]
        assert series[0].auc == series[0].top1
        assert series[-1].auc == pytest.approx(H.compute_auc(pts), abs=1e-15)


class TestIncremental:
    def test_record_count(self):
        cfg = cfg_for("incremental", **{"incremental.checkpoints": [0.1, 1, 3]})
        recs = H.run_regime(cfg)
        assert len(recs) == 2 * 4 * 3
        assert {r.split for r in recs} == {"novel", "pretrained"}

    def test_mixture_endpoints(self):
        base = cfg_for("incremental", **{"incremental.checkpoints": [0.1]})
        recs = {lam: by_key(H.run_regime(parse_config(None, {**SMALL_CLASSES, "regime": "incremental",
                                                               "incremental.checkpoints": [0.1],
                                                               "mixture.lambda": lam})))
                for lam in (0.0, 1.0)}
        for (t, e, p, s, et), r in recs[1.0].items():
            if p == "mixture":
                assert r.top1 == recs[1.0][(t, e, "parametric", s, et)].top1
                assert recs[0.0][(t, e, p, s, et)].top1 == recs[0.0][(t, e, "attention", s, et)].top1
        assert base.mixture.lam == 0.5

    def test_pretrained_embedding_runs(self):
        recs = H.run_regime(cfg_for("incremental", **{"model.embedding": "pretrained",
                                                       "incremental.checkpoints": [0.1, 1]}))
        assert len(recs) == 16


class TestUnbalanced:
    def test_full_fractions_match_incremental(self):
        inc = by_key(H.run_regime(cfg_for("incremental")))
        unb = H.run_regime(cfg_for("unbalanced", **{"incremental.starved_fraction": 1.0}))
        for r in unb:
            if r.split in ("novel", "pretrained"):
                assert r.top1 == inc[(r.task, r.epoch, r.predictor, r.split, r.eval_task)].top1

    def test_splits(self):
        recs = H.run_regime(cfg_for("unbalanced"))
        assert {r.split for r in recs} == {"novel", "pretrained", "starved", "full"}
        stream = H.build_class_stream(cfg_for("unbalanced"), unbalanced=True)
        counts = np.bincount(stream.tasks[1].train.targets)
        assert all(counts[c] == np.ceil(0.1 * 60) for c in stream.params["starved"])


class TestRegressionDemo:
    def test_shape_and_columns(self):
        rows = H.run_regression_demo(parse_config(None, {"regime": "regression-demo",
                                                         "regression.grid_points": 11}))
        assert len(rows) == 11
        assert all(set(r) == set(H.CURVE_COLUMNS) for r in rows)

    def test_attention_within_neighbour_range(self):
        cfg = parse_config(None, {"regime": "regression-demo", "regression.grid_points": 41})
        rows = H.run_regression_demo(cfg)
        from mbpa import data as D
        ds = D.gen_synthetic(D.SyntheticSpec("regression-1d", 1, 1, cfg.regression.n_train,
                                             cfg.regression.noise, cfg.seed))
        mem = EpisodicMemory(100, 1, value_kind="scalar")
        mem.extend(ds.inputs, ds.targets)
        for r in rows:
            ctx = mem.lookup(np.array([r["x"]]), cfg.regression.k)
            assert ctx.values.min() - 1e-12 <= r["y_attention"] <= ctx.values.max() + 1e-12

    def test_single_point_fit(self):
        net = OutputNet([1, 16, 1], "tanh", "regression", seed=0)
        mem = EpisodicMemory(10, 1, value_kind="scalar")
        mem.extend(np.array([[0.3], [1.5], [-1.0]]), np.array([0.8, -0.2, 0.1]))
        q = np.array([0.3])
        ctx = mem.lookup(q, 1)
        cfg = AdaptationConfig(alpha_m=0.05, beta=0.0, steps=500, k=1)
        y = net.forward(q, params=adapt(net, ctx, cfg).params)
        assert abs(y - 0.8) < 1e-3

    def test_gap_region_mbpa_beats_parametric(self):
        cfg = parse_config(None, {"regime": "regression-demo", "regression.gap": [0.2, 1.2]})
        rows = H.run_regression_demo(cfg)
        inside = [r for r in rows if 0.2 <= r["x"] <= 1.2]
        mse = lambda k: np.mean([(r[k] - r["y_true"]) ** 2 for r in inside])
        assert mse("y_mbpa") <= mse("y_parametric")


class TestSweep:
    def test_single_value_matches_plain_run(self):
        cfg = cfg_for("incremental", **{"sweep.axis": "steps", "sweep.values": [10]})
        (value, rec), = H.run_sweep(cfg)
        assert value == 10
        assert rec == H.headline(H.run_regime(cfg, "incremental"), "incremental")

    @pytest.mark.slow
    def test_k_saturates(self):
        cfg = parse_config(None, {"regime": "sweep", "sweep.axis": "k-neighbours",
                                  "sweep.values": [1, 5, 10, 25, 50], "incremental.checkpoints": [3.0]})
        top = [rec.top1 for _, rec in H.run_sweep(cfg)]
        assert abs(top[-1] - top[-2]) <= 0.02
        assert top[-1] >= top[0] - 0.02

    @pytest.mark.slow
    def test_capacity_never_hurts(self):
        cfg = parse_config(None, {**SMALL_CONTINUAL, "regime": "sweep", "sweep.axis": "memory-capacity",
                                  "sweep.regime": "continual", "sweep.values": [50, 200, 800]})
        top = [rec.top1 for _, rec in H.run_sweep(cfg)]
        assert all(b >= a - 0.02 for a, b in zip(top, top[1:]))


class TestWriters:
    def test_csv_and_jsonl(self, tmp_path):
        recs = [H.EvalRecord("continual", 0, 10.0, "mbpa", "per-task", 0.5, 0.5, 20, 0),
                H.EvalRecord("continual", 0, 10.0, "mbpa", "all-seen", 0.25, 0.25, 20)]
        H.write_csv(recs, tmp_path / "m.csv")
        H.write_jsonl(recs, tmp_path / "m.jsonl")
        rows = list(csv.DictReader(open(tmp_path / "m.csv")))
        assert rows[0]["phase"] == "0:10" and rows[0]["eval_task"] == "0" and rows[1]["eval_task"] == ""
        back = [H.EvalRecord(**json.loads(line)) for line in open(tmp_path / "m.jsonl")]
        assert back == recs

    def test_summarize_repeats(self):
        a = [H.EvalRecord("continual", 0, 1.0, "mbpa", "all-seen", 0.4, 0.4, 10)]
        b = [H.EvalRecord("continual", 0, 1.0, "mbpa", "all-seen", 0.6, 0.6, 10)]
        (row,) = H.summarize_repeats([a, b])
        assert row["top1_mean"] == pytest.approx(0.5) and row["top1_std"] == pytest.approx(0.1)
