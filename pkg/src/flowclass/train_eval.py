"""Optimizer, dataset splitting and macro-averaged evaluation.

The optimizer follows the BERT-style Adam recipe: exponential moment
estimates without bias correction, decoupled weight decay, and a learning
rate that ramps linearly from zero over the warmup fraction of the step
budget and then decays linearly back to zero.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, asdict
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from .errors import NumericError

log = logging.getLogger(__name__)


@dataclass
class OptimizerConfig:
    base_lr: float = 5e-5
    warmup_fraction: float = 0.03
    total_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError(f"warmup_fraction {self.warmup_fraction} outside [0,1)")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")


def lr_schedule(step: float, cfg: OptimizerConfig) -> float:
    """Piecewise-linear rate: 0 -> base_lr over the warmup steps, then
    base_lr -> 0 at total_steps."""
    total = float(cfg.total_steps)
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    warm = cfg.warmup_fraction * total
    if step <= warm:
        return cfg.base_lr * (step / warm if warm > 0 else 1.0)
    return cfg.base_lr * (total - step) / (total - warm)


class WarmupAdam:
    """Adam moments without bias correction plus decoupled weight decay.

    Steps are counted from 1 so the first update already moves (the schedule
    is zero at step 0). Updates are applied in-place under no_grad; the
    parameter ordering is fixed, so runs are bit-reproducible.
    """

    def __init__(self, named_params, cfg: OptimizerConfig):
        self.cfg = cfg
        self.params = list(named_params)
        self.state = {
            name: {"m": torch.zeros_like(p), "v": torch.zeros_like(p)}
            for name, p in self.params
        }
        self.step_count = 0

    def step(self, grads: dict) -> float:
        """Apply one update from a name -> gradient mapping; returns the lr
        used. Raises on non-finite gradients, naming the tensor."""
        self.step_count += 1
        lr = lr_schedule(min(self.step_count, self.cfg.total_steps), self.cfg)
        cfg = self.cfg
        with torch.no_grad():
            for name, param in self.params:
                grad = grads.get(name)
                if grad is None:
                    grad = torch.zeros_like(param)
                if not torch.isfinite(grad).all():
                    raise NumericError(f"non-finite gradient for {name}")
                st = self.state[name]
                st["m"].mul_(cfg.beta1).add_(grad, alpha=1 - cfg.beta1)
                st["v"].mul_(cfg.beta2).addcmul_(grad, grad, value=1 - cfg.beta2)
                update = st["m"] / (st["v"].sqrt() + cfg.eps)
                if cfg.weight_decay > 0:
                    update = update + cfg.weight_decay * param
                param.add_(update, alpha=-lr)
        return lr


def optimizer_step(params: dict, grads: dict, state: dict, step: int,
                   cfg: OptimizerConfig) -> float:
    """Functional single-tensor form of the WarmupAdam update (used by the
    scalar reference tests); mutates params/state in place."""
    lr = lr_schedule(min(step, cfg.total_steps), cfg)
    for name, param in params.items():
        grad = grads[name]
        st = state.setdefault(name, {"m": torch.zeros_like(param),
                                     "v": torch.zeros_like(param)})
        if not torch.isfinite(grad).all():
            raise NumericError(f"non-finite gradient for {name}")
        st["m"].mul_(cfg.beta1).add_(grad, alpha=1 - cfg.beta1)
        st["v"].mul_(cfg.beta2).addcmul_(grad, grad, value=1 - cfg.beta2)
        update = st["m"] / (st["v"].sqrt() + cfg.eps)
        if cfg.weight_decay > 0:
            update = update + cfg.weight_decay * param
        param.add_(update, alpha=-lr)
    return lr


# ---------------------------------------------------------------------------
# Dataset splitting
# ---------------------------------------------------------------------------

def split(items: Sequence, ratios=(8, 1, 1), seed: int = 0,
          stratified: bool = True, labels: Optional[Sequence[int]] = None):
    """Disjoint (train, val, test) index partition.

    Stratified mode keeps per-class proportions within one sample of exact
    and guarantees every class with at least 3 samples appears in val and
    test; classes with fewer go entirely to train (with a warning).
    """
    n = len(items)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    total = float(sum(ratios))
    r_val, r_test = ratios[1] / total, ratios[2] / total
    rng = random.Random(seed)

    if not stratified:
        order = list(range(n))
        rng.shuffle(order)
        n_val = int(n * r_val + 0.5)
        n_test = int(n * r_test + 0.5)
        return (sorted(order[n_val + n_test:]), sorted(order[:n_val]),
                sorted(order[n_val:n_val + n_test]))

    if labels is None:
        labels = [getattr(item, "label") for item in items]
    by_class = {}
    for idx, lab in enumerate(labels):
        by_class.setdefault(lab, []).append(idx)

    train, val, test = [], [], []
    for lab in sorted(by_class, key=lambda x: (x is None, x)):
        members = by_class[lab]
        rng.shuffle(members)
        k = len(members)
        if k < 3:
            log.warning("class %s has %d samples; placing all in train", lab, k)
            train.extend(members)
            continue
        n_val = max(1, int(k * r_val + 0.5))
        n_test = max(1, int(k * r_test + 0.5))
        val.extend(members[:n_val])
        test.extend(members[n_val:n_val + n_test])
        train.extend(members[n_val + n_test:])
    return sorted(train), sorted(val), sorted(test)


# ---------------------------------------------------------------------------
# Macro-averaged metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    n_classes: int
    confusion: list                 # K x K, rows = true class
    per_class_precision: list
    per_class_recall: list
    per_class_f1: list
    per_class_accuracy: list
    accuracy: float                 # overall fraction correct
    macro_accuracy: float           # mean one-vs-rest per-class accuracy
    macro_precision: float
    macro_recall: float
    macro_f1: float

    def to_dict(self) -> dict:
        return asdict(self)


def macro_metrics(predictions: Iterable[int], labels: Iterable[int],
                  n_classes: int) -> MetricsReport:
    """Per-class precision/recall/F1 with 0/0 defined as 0, macro values as
    unweighted means over all n_classes classes."""
    preds = np.asarray(list(predictions), dtype=int)
    labs = np.asarray(list(labels), dtype=int)
    if preds.shape != labs.shape:
        raise ValueError("predictions and labels differ in length")
    if len(labs) and (labs.min() < 0 or labs.max() >= n_classes):
        raise ValueError("label outside [0, K)")
    cm = np.zeros((n_classes, n_classes), dtype=int)
    np.add.at(cm, (labs, preds), 1)

    total = cm.sum()
    tp = np.diag(cm).astype(float)
    pred_count = cm.sum(axis=0).astype(float)
    true_count = cm.sum(axis=1).astype(float)

    def safe_div(num, den):
        return np.divide(num, den, out=np.zeros_like(num, dtype=float),
                         where=den > 0)

    precision = safe_div(tp, pred_count)
    recall = safe_div(tp, true_count)
    f1 = safe_div(2 * precision * recall, precision + recall)
    tn = total - pred_count - true_count + tp
    per_class_acc = (tp + tn) / total if total else np.zeros(n_classes)

    return MetricsReport(
        n_classes=n_classes,
        confusion=cm.tolist(),
        per_class_precision=precision.tolist(),
        per_class_recall=recall.tolist(),
        per_class_f1=f1.tolist(),
        per_class_accuracy=per_class_acc.tolist(),
        accuracy=float(tp.sum() / total) if total else 0.0,
        macro_accuracy=float(per_class_acc.mean()),
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
    )
