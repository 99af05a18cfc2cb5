"""End-to-end runs over flow corpora and the component ablation harness.

A variant names which pipeline stages run: `full` is contrastive
pre-training + fine-tuning + pseudo-label iteration; `no_cpt` starts
fine-tuning from random init; `no_pli` skips the iteration; `no_rp` /
`no_pl` blank the corresponding token segment at encoding time. Variants
combine with '+', e.g. `no_cpt+no_pli` is the plain fine-tuned baseline.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

from .model import EncoderConfig, build_model
from .pretrain import ContrastiveConfig, pretrain_loop
from .semisup import (FineTuneConfig, PseudoLabelConfig, evaluate_records,
                      init_model, iterate)
from .synthgen import CorpusSpec
from .tokenizer import build_vocab, encode_corpus, sequence_length
from .train_eval import OptimizerConfig, split

log = logging.getLogger(__name__)

VARIANT_FLAGS = ("no_pli", "no_cpt", "no_rp", "no_pl")


def parse_variant(name: str) -> frozenset:
    if name == "full":
        return frozenset()
    flags = frozenset(part.strip() for part in name.split("+"))
    unknown = flags - set(VARIANT_FLAGS)
    if unknown:
        raise ValueError(f"unknown ablation flags {sorted(unknown)}; "
                         f"valid: full, {', '.join(VARIANT_FLAGS)}")
    return flags


@dataclass
class PipelineSettings:
    """Everything a variant run needs besides the corpus itself."""

    m: int = 128
    n: int = 32
    encoder: dict = field(default_factory=dict)  # EncoderConfig overrides
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    cpt_optimizer: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig(total_steps=1))
    finetune: FineTuneConfig = field(default_factory=FineTuneConfig)
    pli: PseudoLabelConfig = field(default_factory=PseudoLabelConfig)
    pli_finetune: Optional[FineTuneConfig] = None  # warm-start retrains
    split_seed: int = 0


def run_variant(labeled_flows: Sequence, unlabeled_flows: Sequence,
                variant: str, seed: int, settings: PipelineSettings) -> dict:
    """One pipeline run; returns a result dict with test metrics plus the
    per-stage summaries needed by the ablation reports."""
    flags = parse_variant(variant)
    masked = [flag[3:] for flag in ("no_rp", "no_pl") if flag in flags]

    tr_idx, va_idx, te_idx = split(labeled_flows, seed=settings.split_seed + seed)
    train_flows = [labeled_flows[i] for i in tr_idx]
    val_flows = [labeled_flows[i] for i in va_idx]
    test_flows = [labeled_flows[i] for i in te_idx]

    vocab = build_vocab(list(train_flows) + list(unlabeled_flows),
                        settings.m, settings.n)
    train = encode_corpus(train_flows, vocab, masked)
    val = encode_corpus(val_flows, vocab, masked)
    test = encode_corpus(test_flows, vocab, masked)
    unlabeled = encode_corpus(unlabeled_flows, vocab, masked)

    n_classes = 1 + max(f.label for f in labeled_flows)
    enc_cfg = EncoderConfig(vocab_size=vocab.size,
                            max_len=sequence_length(settings.m, settings.n),
                            **settings.encoder)
    model = build_model(enc_cfg, seed=seed)

    loss_curve = []
    if "no_cpt" not in flags:
        cpt_cfg = replace(settings.contrastive, seed=settings.contrastive.seed + seed)
        opt = replace(settings.cpt_optimizer, total_steps=cpt_cfg.step)
        model, loss_curve = pretrain_loop(train, cpt_cfg, model, opt)

    ft = replace(settings.finetune, seed=settings.finetune.seed + seed)
    m0, m0_val = init_model(model, n_classes, train, val, ft)

    pli_report = None
    final = m0
    if "no_pli" not in flags:
        pli = replace(settings.pli, seed=settings.pli.seed + seed)
        pli_ft = settings.pli_finetune or settings.finetune
        pli_ft = replace(pli_ft, seed=pli_ft.seed + seed)
        final, pli_report = iterate(m0, train, val, unlabeled, pli, pli_ft)

    test_report = evaluate_records(final, test, n_classes)
    rarest = min(range(n_classes),
                 key=lambda c: sum(1 for f in labeled_flows if f.label == c))
    return {
        "variant": variant,
        "seed": seed,
        "n_classes": n_classes,
        "m0_val_f1": m0_val.macro_f1,
        "final_val_f1": (pli_report["best_val_f1"] if pli_report else
                         m0_val.macro_f1),
        "pli": pli_report,
        "cpt_steps": len(loss_curve),
        "test": test_report.to_dict(),
        "test_macro_f1": test_report.macro_f1,
        "rarest_class": rarest,
        "rarest_class_f1": test_report.per_class_f1[rarest],
    }


def run_ablation(labeled_flows: Sequence, unlabeled_flows: Sequence,
                 variant: str, seeds: Sequence[int],
                 settings: PipelineSettings) -> list:
    results = []
    for seed in seeds:
        result = run_variant(labeled_flows, unlabeled_flows, variant, seed,
                             settings)
        log.info("ablate variant=%s seed=%d test_macro_f1=%.4f",
                 variant, seed, result["test_macro_f1"])
        results.append(result)
    return results


def median(values: Sequence[float]) -> float:
    ordered = sorted(values)
    mid = len(ordered) // 2
    if len(ordered) % 2:
        return ordered[mid]
    return 0.5 * (ordered[mid - 1] + ordered[mid])


# ---------------------------------------------------------------------------
# Desk-scale benchmark: a 4-class 50:5:5:2 corpus with 0.3 shared-domain
# fraction and a small encoder, sized so the whole ablation grid runs in
# minutes on a laptop CPU. The corpus noise levels are calibrated so the
# plain fine-tune plateaus mid-range with weak minority classes, leaving
# measurable headroom for the pre-training and iteration components. Used
# by the acceptance suite and as the `ablate` default when no config is
# given.
# ---------------------------------------------------------------------------

DESK_ENCODER = dict(d=64, heads=4, d_head=16, ffn_dim=128, n_blocks=2,
                    dropout_rate=0.1, proj_dim=64)
DESK_M = 48  # L = m/2 + n + 2 = 34
DESK_N = 8


def desk_corpus_spec(seed: int = 0) -> CorpusSpec:
    return CorpusSpec(class_counts=[900, 90, 90, 36],
                      unlabeled_factor=3.0,
                      shared_fraction=0.3,
                      payload_bytes=16,
                      prefix_len=10,
                      packets_min=4,
                      packets_max=8,
                      band_width=12,
                      payload_noise=0.5,
                      length_noise=0.4,
                      length_stride=40,
                      profile_positions=[0, 2, 4, 1],
                      seed=seed)


def desk_settings() -> PipelineSettings:
    return PipelineSettings(
        m=DESK_M,
        n=DESK_N,
        encoder=dict(DESK_ENCODER),
        contrastive=ContrastiveConfig(step=60, bz=16, tau=0.3,
                                      alpha=2.0, beta=1.0),
        cpt_optimizer=OptimizerConfig(base_lr=3e-4, warmup_fraction=0.1,
                                      total_steps=60),
        finetune=FineTuneConfig(
            epochs=20, batch_size=16,
            optimizer=OptimizerConfig(base_lr=1e-3, warmup_fraction=0.2,
                                      total_steps=1)),
        pli=PseudoLabelConfig(thr=0.95, limit=3, epsilon=0.001),
        pli_finetune=FineTuneConfig(
            epochs=6, batch_size=16,
            optimizer=OptimizerConfig(base_lr=5e-4, warmup_fraction=0.2,
                                      total_steps=1)),
    )


def benchmark_settings() -> PipelineSettings:
    """Settings for the acceptance ablation benchmark."""
    return desk_settings()
