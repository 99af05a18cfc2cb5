"""Semi-supervised fine-tuning via confidence-filtered pseudo-labels.

An initial classifier M0 (pre-trained encoder + fresh head, fine-tuned on
the labeled train set) annotates the unlabeled pool. Predictions at or above
the confidence threshold become pseudo-labeled data, resampled toward rare
classes (sampling weight proportional to the inverse class proportion) and
mixed into re-training with a lower loss weight than real data. The loop
re-runs until the validation macro-F1 gain falls to epsilon or the iteration
limit; the best model seen (including M0) is returned, so iteration can
never degrade validation performance.
"""

from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import torch

from .errors import InputError, NumericError
from .model import DTYPE, TrafficEncoder, batch_ids, gradients
from .train_eval import MetricsReport, OptimizerConfig, WarmupAdam, macro_metrics

log = logging.getLogger(__name__)

SOURCE_REAL = "real"
SOURCE_PSEUDO = "pseudo"


@dataclass
class PseudoLabelConfig:
    thr: float = 0.95
    limit: int = 5
    epsilon: float = 0.001
    w1: float = 1.0          # real-data loss weight
    w2: float = 0.5          # pseudo-data loss weight
    budget: Optional[int] = None  # pseudo samples per iteration; None = len(train)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.thr <= 1.0:
            raise ValueError("thr must be in (0, 1]")
        if self.limit < 1:
            raise ValueError("limit must be >= 1")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if not self.w1 >= self.w2 > 0:
            raise ValueError("need w1 >= w2 > 0")


@dataclass
class FineTuneConfig:
    epochs: int = 4
    batch_size: int = 32
    optimizer: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig(total_steps=1))
    seed: int = 0


@dataclass
class ClassWeights:
    """Per-class proportions and the inverse-proportion sampling weights."""

    n_classes: int
    pro: list
    s: list


@dataclass
class PseudoLabelRecord:
    record: object           # the underlying unlabeled TokenRecord
    predicted: int
    confidence: float
    iteration: int
    source: str = SOURCE_PSEUDO


def class_weights(label_counts: Sequence[int]) -> ClassWeights:
    """s_i = (1/pro_i) / sum_j (1/pro_j) where pro_i is class i's share."""
    counts = list(label_counts)
    for cls, count in enumerate(counts):
        if count <= 0:
            raise InputError(f"class {cls} has no samples; cannot weight it")
    total = float(sum(counts))
    pro = [c / total for c in counts]
    inv = [1.0 / p for p in pro]
    norm = sum(inv)
    return ClassWeights(n_classes=len(counts), pro=pro,
                        s=[x / norm for x in inv])


# ---------------------------------------------------------------------------
# Inference helpers
# ---------------------------------------------------------------------------

def predict_records(model: TrafficEncoder, records: Sequence,
                    batch_size: int = 128):
    """Eval-mode predictions; returns (pred list, confidence list)."""
    preds, confs = [], []
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            chunk = records[start:start + batch_size]
            trace = model.forward(batch_ids(chunk), mode="eval")
            _, pred, conf = model.classify(trace.cls)
            preds.extend(int(p) for p in pred)
            confs.extend(float(c) for c in conf)
    return preds, confs


def evaluate_records(model: TrafficEncoder, records: Sequence,
                     n_classes: Optional[int] = None) -> MetricsReport:
    if n_classes is None:
        n_classes = model.cfg.n_classes
    preds, _ = predict_records(model, records)
    return macro_metrics(preds, [r.label for r in records], n_classes)


def pseudo_label(model: TrafficEncoder, unlabeled: Sequence, thr: float,
                 iteration: int = 0) -> list:
    """Predict every unlabeled record and keep those with confidence >= thr."""
    preds, confs = predict_records(model, unlabeled)
    kept = []
    for rec, pred, conf in zip(unlabeled, preds, confs):
        if conf >= thr:
            kept.append(PseudoLabelRecord(record=rec, predicted=pred,
                                          confidence=conf, iteration=iteration))
    return kept


def weighted_sample(records: Sequence, weights: ClassWeights, budget: int,
                    seed: int = 0) -> list:
    """Draw budget records with replacement, each with probability
    proportional to its class's sampling weight."""
    if budget < 0:
        raise ValueError("budget must be >= 0")
    if budget == 0 or not records:
        return []
    present = {r.predicted for r in records}
    missing = [c for c in range(weights.n_classes)
               if weights.s[c] > 0 and c not in present]
    if missing:
        log.warning("no pseudo records for classes %s; renormalizing over "
                    "available classes", missing)
    per_record = [weights.s[r.predicted] for r in records]
    rng = random.Random(seed)
    return rng.choices(records, weights=per_record, k=budget)


# ---------------------------------------------------------------------------
# Loss and training
# ---------------------------------------------------------------------------

def _cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return -torch.log_softmax(logits, dim=-1)[torch.arange(len(labels)), labels]


def mixed_loss(logits: torch.Tensor, labels: torch.Tensor, sources: Sequence,
               w1: float, w2: float) -> torch.Tensor:
    """Mean over the batch of w_source * cross-entropy; real examples weigh
    w1, pseudo-labeled ones w2."""
    weights = torch.tensor([w1 if src == SOURCE_REAL else w2 for src in sources],
                           dtype=DTYPE)
    return (weights * _cross_entropy(logits, labels)).mean()


def _train_examples(records: Sequence) -> list:
    return [(rec.ids, rec.label, SOURCE_REAL) for rec in records]


def _pseudo_examples(samples: Sequence) -> list:
    return [(p.record.ids, p.predicted, SOURCE_PSEUDO) for p in samples]


def _snapshot(model: TrafficEncoder) -> dict:
    return {k: v.clone() for k, v in model.state_dict().items()}


def train_classifier(model: TrafficEncoder, examples: Sequence,
                     val_records: Sequence, ft: FineTuneConfig,
                     w1: float = 1.0, w2: float = 0.5,
                     select_best: bool = True):
    """Gradient fine-tuning. With select_best (the M0 fit), the epoch with
    the highest validation macro-F1 wins, the starting state included;
    without it (warm-start re-training inside the pseudo-label loop, where
    the iteration loop does its own best-model selection) the final epoch
    is returned. history holds (epoch, val_macro_f1); epoch 0 is the
    starting state."""
    if not examples:
        raise InputError("no training examples")
    n_batches = math.ceil(len(examples) / ft.batch_size)
    opt_cfg = replace(ft.optimizer, total_steps=max(1, ft.epochs * n_batches))
    optimizer = WarmupAdam(model.named_parameters(), opt_cfg)

    best_f1 = evaluate_records(model, val_records).macro_f1 if val_records else -1.0
    best_state = _snapshot(model) if select_best else None
    history = [(0, best_f1)]
    step = 0
    for epoch in range(1, ft.epochs + 1):
        order = list(range(len(examples)))
        random.Random(ft.seed * 7919 + epoch).shuffle(order)
        for start in range(0, len(order), ft.batch_size):
            chosen = [examples[i] for i in order[start:start + ft.batch_size]]
            ids = batch_ids([ex[0] for ex in chosen])
            labels = torch.tensor([ex[1] for ex in chosen], dtype=torch.long)
            sources = [ex[2] for ex in chosen]
            trace = model.forward(ids, mode="train",
                                  seed=ft.seed * 60013 + step, with_logits=True)
            loss = mixed_loss(trace.logits, labels, sources, w1, w2)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite fine-tune loss at step {step}")
            optimizer.step(gradients(model, loss))
            step += 1
        if val_records:
            f1 = evaluate_records(model, val_records).macro_f1
            history.append((epoch, f1))
            if select_best and f1 > best_f1:
                best_f1 = f1
                best_state = _snapshot(model)
    if val_records and select_best:
        model.load_state_dict(best_state)
    return model, history


def init_model(pretrained: TrafficEncoder, n_classes: int, train: Sequence,
               val: Sequence, ft: FineTuneConfig):
    """Attach a fresh classification head to the pre-trained encoder and
    fine-tune on the labeled train set. Returns (M0, val MetricsReport)."""
    labels = {rec.label for rec in train}
    if any(lab is None or not 0 <= lab < n_classes for lab in labels):
        raise InputError(
            f"train labels {sorted(labels, key=str)} do not fit K={n_classes}")
    model = pretrained.clone()
    model.add_classifier(n_classes, seed=ft.seed + 7)
    model, _ = train_classifier(model, _train_examples(train), val, ft)
    return model, evaluate_records(model, val)


# ---------------------------------------------------------------------------
# Pseudo-label iteration
# ---------------------------------------------------------------------------

def iterate(m0: TrafficEncoder, train: Sequence, val: Sequence,
            unlabeled: Sequence, plc: PseudoLabelConfig, ft: FineTuneConfig):
    """Pseudo-label iteration loop; returns (best model, report dict).

    Each iteration labels the unlabeled pool with the current model, keeps
    confident predictions, resamples them by inverse class proportion, and
    re-trains from the current weights on real + pseudo data with the mixed
    loss. The returned model is the best validation macro-F1 seen, M0
    included, so output F1 >= M0 F1 by construction.
    """
    counts = [0] * m0.cfg.n_classes
    for rec in train:
        counts[rec.label] += 1
    cw = class_weights(counts)
    budget = plc.budget if plc.budget is not None else len(train)

    model = m0.clone()
    m0_f1 = evaluate_records(model, val).macro_f1
    best_f1, best_state, best_iteration = m0_f1, _snapshot(model), -1
    prev_f1 = m0_f1
    iterations = []
    stopped_early = False

    for t in range(plc.limit):
        pseudo = pseudo_label(model, unlabeled, plc.thr, iteration=t)
        histogram = [0] * m0.cfg.n_classes
        for p in pseudo:
            histogram[p.predicted] += 1
        sampled = weighted_sample(pseudo, cw, budget, seed=plc.seed * 104729 + t)
        if not pseudo:
            log.warning("iteration %d: empty pseudo set, re-training on real "
                        "data only", t)
        examples = _train_examples(train) + _pseudo_examples(sampled)
        ft_t = replace(ft, seed=ft.seed + 1009 * (t + 1))
        model, _ = train_classifier(model, examples, val, ft_t,
                                    w1=plc.w1, w2=plc.w2, select_best=False)
        report = evaluate_records(model, val)
        f1 = report.macro_f1
        if f1 > best_f1:
            best_f1, best_state, best_iteration = f1, _snapshot(model), t
        iterations.append({
            "iteration": t,
            "pseudo_count": len(pseudo),
            "pseudo_histogram": histogram,
            "sampled_count": len(sampled),
            "val_accuracy": report.accuracy,
            "val_macro_precision": report.macro_precision,
            "val_macro_recall": report.macro_recall,
            "val_macro_f1": f1,
            "best_f1": best_f1,
        })
        if f1 - prev_f1 <= plc.epsilon:
            stopped_early = t + 1 < plc.limit
            break
        prev_f1 = f1

    model.load_state_dict(best_state)
    report = {
        "m0_val_f1": m0_f1,
        "best_val_f1": best_f1,
        "best_iteration": best_iteration,
        "iterations_run": len(iterations),
        "stopped_early": stopped_early,
        "iterations": iterations,
    }
    return model, report
