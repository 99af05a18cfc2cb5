"""Contrastive pre-training over class/communication-aware pairs.

Each pre-training sample is a triple {x, x, y}: the anchor flow replicated
(two dropout-noised forward passes make the positive pair) plus one negative
y drawn uniformly until it satisfies either

  * different class label            -> strong negative, loss weight alpha
  * same label, different comm info  -> weak negative,   loss weight beta

with a retry cap per slot to avoid deadlock on degenerate datasets. The
objective is a temperature-scaled InfoNCE over cosine similarities against
the in-batch candidate set, with the negative term subtracted at its
strength weight.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch

from .errors import InputError, NumericError
from .model import DTYPE, TrafficEncoder, batch_ids, gradients
from .train_eval import OptimizerConfig, WarmupAdam

log = logging.getLogger(__name__)

STRONG = "strong"
WEAK = "weak"


@dataclass
class ContrastiveConfig:
    step: int = 100          # number of batches sampled and trained on
    bz: int = 32
    tau: float = 0.1
    alpha: float = 2.0       # strong-negative weight
    beta: float = 1.0        # weak-negative weight
    retry_cap: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if not self.alpha >= self.beta > 0:
            raise ValueError("need alpha >= beta > 0")
        if self.retry_cap < 1:
            raise ValueError("retry_cap must be >= 1")


@dataclass
class ContrastiveTriple:
    anchor: int
    anchor_dup: int
    negative: int
    strength: str

    def __post_init__(self):
        if self.strength not in (STRONG, WEAK):
            raise ValueError(f"bad strength {self.strength!r}")


@dataclass
class SampleResult:
    batches: list
    skipped_slots: int = 0
    diagnostic: Optional[str] = None

    @property
    def n_triples(self) -> int:
        return sum(len(b) for b in self.batches)


def _negative_strength(rec_p, rec_q) -> Optional[str]:
    if rec_p.label != rec_q.label:
        return STRONG
    if rec_p.comm != rec_q.comm:
        return WEAK
    return None


def sample_pairs(records: Sequence, cfg: ContrastiveConfig) -> SampleResult:
    """Draw cfg.step batches of cfg.bz triples from labeled records with
    communication info. Slots whose negative search exhausts the retry cap
    are skipped; if every slot deadlocks the result carries a diagnostic."""
    if not records:
        raise InputError("cannot sample pairs from an empty dataset")
    for rec in records:
        if rec.label is None:
            raise InputError("pair sampling requires labeled records")
    rng = random.Random(cfg.seed)
    n = len(records)
    batches = []
    skipped = 0
    for _ in range(cfg.step):
        batch = []
        for _ in range(cfg.bz):
            p = rng.randrange(n)
            for _ in range(cfg.retry_cap):
                q = rng.randrange(n - 1)
                if q >= p:
                    q += 1
                strength = _negative_strength(records[p], records[q])
                if strength is not None:
                    batch.append(ContrastiveTriple(p, p, q, strength))
                    break
            else:
                skipped += 1
        batches.append(batch)
    result = SampleResult(batches=batches, skipped_slots=skipped)
    if result.n_triples == 0 and skipped > 0:
        result.diagnostic = (
            "no valid negative exists for any sampled anchor: every slot "
            f"exhausted {cfg.retry_cap} retries (single class with a single "
            "communication identity?)")
        log.warning("%s", result.diagnostic)
    return result


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def _rows_normalized(z: torch.Tensor) -> torch.Tensor:
    norms = z.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        raise NumericError("zero-norm embedding in similarity computation")
    return z / norms


def info_nce(anchor_z, target_z, candidates_z, tau: float) -> torch.Tensor:
    """-log( exp(sim(a,t)/tau) / sum_k exp(sim(a,c_k)/tau) ) with cosine
    similarity; candidates must contain the target."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    anchor = torch.as_tensor(anchor_z, dtype=DTYPE)
    target = torch.as_tensor(target_z, dtype=DTYPE)
    cands = torch.stack([torch.as_tensor(c, dtype=DTYPE) for c in candidates_z]) \
        if not isinstance(candidates_z, torch.Tensor) else candidates_z
    a = _rows_normalized(anchor.unsqueeze(0))[0]
    t = _rows_normalized(target.unsqueeze(0))[0]
    c = _rows_normalized(cands)
    target_logit = (a * t).sum() / tau
    cand_logits = (c @ a) / tau
    return torch.logsumexp(cand_logits, dim=0) - target_logit


def cpt_loss(anchor_z, pos_z, neg_z, strength: str, candidates_z,
             cfg: ContrastiveConfig) -> torch.Tensor:
    """Weighted contrast: InfoNCE toward the positive minus the strength
    weight times InfoNCE toward the negative, over one candidate set."""
    weight = cfg.alpha if strength == STRONG else cfg.beta
    return (info_nce(anchor_z, pos_z, candidates_z, cfg.tau)
            - weight * info_nce(anchor_z, neg_z, candidates_z, cfg.tau))


def _batch_cpt_loss(z_x, z_pos, z_neg, strengths, cfg: ContrastiveConfig):
    """Vectorized mean cpt_loss over a batch; candidates are all positive and
    negative projections in the batch."""
    bsz = z_x.shape[0]
    cands = torch.cat([z_pos, z_neg], dim=0)            # 2B x D
    sims = _rows_normalized(z_x) @ _rows_normalized(cands).T / cfg.tau
    lse = torch.logsumexp(sims, dim=1)
    idx = torch.arange(bsz)
    loss_pos = lse - sims[idx, idx]
    loss_neg = lse - sims[idx, bsz + idx]
    weights = torch.tensor([cfg.alpha if s == STRONG else cfg.beta
                            for s in strengths], dtype=DTYPE)
    return (loss_pos - weights * loss_neg).mean()


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def pretrain_loop(records: Sequence, cfg: ContrastiveConfig,
                  model: TrafficEncoder,
                  opt_cfg: Optional[OptimizerConfig] = None):
    """Run contrastive pre-training; returns (model, loss_curve) where the
    curve holds (step, mean batch loss) for every executed step."""
    if cfg.step == 0:
        return model, []
    sample = sample_pairs(records, cfg)
    if sample.n_triples == 0:
        raise InputError(sample.diagnostic or "empty pre-training sample")
    if opt_cfg is None:
        opt_cfg = OptimizerConfig(total_steps=max(cfg.step, 1))
    optimizer = WarmupAdam(model.named_parameters(), opt_cfg)
    curve = []
    for step_idx, batch in enumerate(sample.batches):
        if not batch:
            continue
        anchor_ids = batch_ids([records[t.anchor] for t in batch])
        neg_ids = batch_ids([records[t.negative] for t in batch])
        base_seed = cfg.seed * 1_000_003 + step_idx * 3
        z_x = model.forward(anchor_ids, mode="train", seed=base_seed,
                            with_proj=True).proj
        z_pos = model.forward(anchor_ids, mode="train", seed=base_seed + 1,
                              with_proj=True).proj
        z_neg = model.forward(neg_ids, mode="train", seed=base_seed + 2,
                              with_proj=True).proj
        loss = _batch_cpt_loss(z_x, z_pos, z_neg,
                               [t.strength for t in batch], cfg)
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite contrastive loss at step {step_idx}")
        optimizer.step(gradients(model, loss))
        curve.append((step_idx, float(loss.detach())))
    return model, curve


def save_loss_curve(path, curve) -> None:
    with open(path, "w") as fh:
        for step_idx, value in curve:
            fh.write(f"{step_idx}\t{value:.10g}\n")
