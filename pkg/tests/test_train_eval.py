import math
from collections import Counter

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from flowclass.errors import NumericError
from flowclass.train_eval import (MetricsReport, OptimizerConfig, WarmupAdam,
                                  lr_schedule, macro_metrics, optimizer_step,
                                  split)


class TestLrSchedule:
    CFG = OptimizerConfig(base_lr=5e-5, warmup_fraction=0.03, total_steps=1000)

    def test_step_zero(self):
        assert lr_schedule(0, self.CFG) == 0.0

    def test_warmup_end_hits_base_lr(self):
        warm = self.CFG.warmup_fraction * self.CFG.total_steps
        assert lr_schedule(warm, self.CFG) == pytest.approx(5e-5)

    def test_final_step_zero(self):
        assert lr_schedule(1000, self.CFG) == pytest.approx(0.0)

    def test_decay_midpoint_closed_form(self):
        warm = self.CFG.warmup_fraction * self.CFG.total_steps
        mid = (warm + 1000) / 2
        expected = self.CFG.base_lr * (1000 - mid) / (1000 - warm)
        assert lr_schedule(mid, self.CFG) == pytest.approx(expected)
        assert expected == pytest.approx(self.CFG.base_lr / 2)

    def test_piecewise_linear_and_max(self):
        cfg = OptimizerConfig(base_lr=1e-3, warmup_fraction=0.1, total_steps=200)
        values = [lr_schedule(s, cfg) for s in range(201)]
        assert max(values) <= cfg.base_lr + 1e-18
        assert lr_schedule(20, cfg) == pytest.approx(cfg.base_lr)
        # continuity across the corner (finite slopes on either side)
        assert lr_schedule(19.999, cfg) == pytest.approx(lr_schedule(20, cfg),
                                                         abs=1e-7)
        assert lr_schedule(20.001, cfg) == pytest.approx(lr_schedule(20, cfg),
                                                         abs=1e-7)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_schedule(1001, self.CFG)


class PythonAdam:
    """Independent scalar re-implementation used as the trajectory oracle."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.m = 0.0
        self.v = 0.0
        self.t = 0

    def step(self, x, g):
        cfg = self.cfg
        self.t += 1
        step = min(self.t, cfg.total_steps)
        warm = cfg.warmup_fraction * cfg.total_steps
        if step <= warm:
            lr = cfg.base_lr * step / warm
        else:
            lr = cfg.base_lr * (cfg.total_steps - step) / (cfg.total_steps - warm)
        self.m = cfg.beta1 * self.m + (1 - cfg.beta1) * g
        self.v = cfg.beta2 * self.v + (1 - cfg.beta2) * g * g
        update = self.m / (math.sqrt(self.v) + cfg.eps)
        update += cfg.weight_decay * x
        return x - lr * update


class TestOptimizer:
    def test_zero_gradient_zero_decay_is_identity(self):
        cfg = OptimizerConfig(base_lr=1e-2, warmup_fraction=0.1,
                              total_steps=10, weight_decay=0.0)
        param = torch.tensor([1.5, -2.0], dtype=torch.float64)
        opt = WarmupAdam([("p", param)], cfg)
        before = param.clone()
        for _ in range(5):
            opt.step({"p": torch.zeros_like(param)})
        assert torch.equal(param, before)

    def test_scalar_trajectory_matches_oracle(self):
        cfg = OptimizerConfig(base_lr=3e-3, warmup_fraction=0.2,
                              total_steps=50, weight_decay=0.01)
        param = torch.tensor([0.7], dtype=torch.float64)
        opt = WarmupAdam([("p", param)], cfg)
        oracle = PythonAdam(cfg)
        x = 0.7
        for step in range(50):
            g = math.sin(0.1 * step) + 0.3
            opt.step({"p": torch.tensor([g], dtype=torch.float64)})
            x = oracle.step(x, g)
            assert float(param[0]) == pytest.approx(x, abs=1e-10)

    def test_functional_form_matches_class(self):
        cfg = OptimizerConfig(base_lr=1e-3, warmup_fraction=0.1, total_steps=20)
        p1 = torch.tensor([0.4, -0.2], dtype=torch.float64)
        p2 = p1.clone()
        opt = WarmupAdam([("p", p1)], cfg)
        state = {}
        for step in range(1, 11):
            g = torch.tensor([0.1 * step, -0.05], dtype=torch.float64)
            opt.step({"p": g})
            optimizer_step({"p": p2}, {"p": g}, state, step, cfg)
            assert torch.allclose(p1, p2, atol=1e-15)

    def test_weight_decay_shrinks_monotonically(self):
        cfg = OptimizerConfig(base_lr=1e-2, warmup_fraction=0.0,
                              total_steps=100, weight_decay=0.1)
        param = torch.tensor([2.0, -3.0], dtype=torch.float64)
        opt = WarmupAdam([("p", param)], cfg)
        mags = [param.abs().sum().item()]
        for _ in range(20):
            opt.step({"p": torch.zeros_like(param)})
            mags.append(param.abs().sum().item())
        assert all(b < a for a, b in zip(mags, mags[1:]))

    def test_non_finite_gradient_names_tensor(self):
        cfg = OptimizerConfig(total_steps=10)
        param = torch.tensor([1.0], dtype=torch.float64)
        opt = WarmupAdam([("blocks.0.wq.weight", param)], cfg)
        with pytest.raises(NumericError, match="blocks.0.wq.weight"):
            opt.step({"blocks.0.wq.weight":
                      torch.tensor([float("nan")], dtype=torch.float64)})


class Item:
    def __init__(self, label):
        self.label = label


class TestSplit:
    def test_uniform_100_gives_80_10_10(self):
        items = [Item(0)] * 100
        tr, va, te = split(items, seed=1, stratified=False)
        assert (len(tr), len(va), len(te)) == (80, 10, 10)

    def test_same_seed_same_split(self):
        items = [Item(i % 4) for i in range(97)]
        assert split(items, seed=5) == split(items, seed=5)
        assert split(items, seed=5) != split(items, seed=6)

    def test_partition_property(self):
        items = [Item(i % 3) for i in range(53)]
        tr, va, te = split(items, seed=2)
        combined = sorted(tr + va + te)
        assert combined == list(range(53))

    def test_stratified_proportions_within_one(self):
        counts = [50, 5, 5, 2]
        items = [Item(c) for c, k in enumerate(counts) for _ in range(k)]
        tr, va, te = split(items, seed=3)
        for part, ratio in ((tr, 0.8), (va, 0.1), (te, 0.1)):
            got = Counter(items[i].label for i in part)
            for cls, total in enumerate(counts):
                if total < 3:
                    continue
                assert abs(got[cls] - ratio * total) <= 1.0, (cls, part)

    def test_small_class_goes_to_train(self):
        items = [Item(0)] * 30 + [Item(1)] * 2
        tr, va, te = split(items, seed=0)
        minority = [i for i, item in enumerate(items) if item.label == 1]
        assert all(i in tr for i in minority)

    def test_classes_with_ten_samples_reach_all_splits(self):
        items = [Item(0)] * 40 + [Item(1)] * 10
        tr, va, te = split(items, seed=4)
        for part in (tr, va, te):
            assert any(items[i].label == 1 for i in part)


def brute_force_metrics(preds, labels, k):
    """Per-class recount oracle, kept deliberately naive."""
    per_precision, per_recall, per_f1, per_acc = [], [], [], []
    n = len(labels)
    for cls in range(k):
        tp = sum(1 for p, l in zip(preds, labels) if p == cls and l == cls)
        fp = sum(1 for p, l in zip(preds, labels) if p == cls and l != cls)
        fn = sum(1 for p, l in zip(preds, labels) if p != cls and l == cls)
        tn = n - tp - fp - fn
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = (2 * precision * recall / (precision + recall)
              if precision + recall else 0.0)
        per_precision.append(precision)
        per_recall.append(recall)
        per_f1.append(f1)
        per_acc.append((tp + tn) / n if n else 0.0)
    overall = sum(1 for p, l in zip(preds, labels) if p == l) / n if n else 0.0
    return {
        "precision": per_precision, "recall": per_recall, "f1": per_f1,
        "accuracy": overall,
        "macro_f1": sum(per_f1) / k,
        "macro_precision": sum(per_precision) / k,
        "macro_recall": sum(per_recall) / k,
        "macro_accuracy": sum(per_acc) / k,
    }


class TestMacroMetrics:
    def test_perfect_predictions(self):
        report = macro_metrics([0, 1, 2, 1], [0, 1, 2, 1], 3)
        assert report.macro_f1 == 1.0
        assert report.accuracy == 1.0
        assert report.macro_precision == 1.0

    def test_hand_computed_confusion(self):
        # true class 0: 8 correct + 2 as class 1; true class 1: 3 as class 0
        labels = [0] * 10 + [1] * 10
        preds = [0] * 8 + [1] * 2 + [0] * 3 + [1] * 7
        report = macro_metrics(preds, labels, 2)
        assert report.confusion == [[8, 2], [3, 7]]
        assert report.per_class_precision[0] == pytest.approx(8 / 11)
        assert report.per_class_recall[0] == pytest.approx(0.8)
        assert report.per_class_precision[1] == pytest.approx(7 / 9)
        assert report.per_class_recall[1] == pytest.approx(0.7)
        assert report.macro_f1 == pytest.approx(0.7493, abs=1e-4)

    def test_majority_constant_predictor_exposes_bias(self):
        labels = [0] * 90 + [1] * 10
        preds = [0] * 100
        report = macro_metrics(preds, labels, 2)
        assert report.per_class_f1[1] == 0.0
        assert report.macro_f1 == pytest.approx(0.4737, abs=1e-4)

    def test_confusion_rows_sum_to_support(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 4, size=200).tolist()
        preds = rng.integers(0, 4, size=200).tolist()
        report = macro_metrics(preds, labels, 4)
        for cls in range(4):
            assert sum(report.confusion[cls]) == labels.count(cls)

    @given(st.integers(min_value=2, max_value=6), st.data())
    @settings(max_examples=60, deadline=None)
    def test_matches_brute_force_recount(self, k, data):
        n = data.draw(st.integers(min_value=0, max_value=80))
        labels = data.draw(st.lists(st.integers(0, k - 1), min_size=n, max_size=n))
        preds = data.draw(st.lists(st.integers(0, k - 1), min_size=n, max_size=n))
        report = macro_metrics(preds, labels, k)
        oracle = brute_force_metrics(preds, labels, k)
        assert report.per_class_f1 == oracle["f1"]
        assert report.per_class_precision == oracle["precision"]
        assert report.per_class_recall == oracle["recall"]
        assert report.accuracy == oracle["accuracy"]
        assert report.macro_f1 == oracle["macro_f1"]
        assert report.macro_accuracy == oracle["macro_accuracy"]

    def test_all_metrics_in_unit_interval(self):
        rng = np.random.default_rng(1)
        labels = rng.integers(0, 3, size=50).tolist()
        preds = (np.zeros(50, dtype=int)).tolist()
        report = macro_metrics(preds, labels, 3)
        for value in (report.accuracy, report.macro_precision,
                      report.macro_recall, report.macro_f1,
                      report.macro_accuracy):
            assert 0.0 <= value <= 1.0
