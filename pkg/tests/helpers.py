"""Shared test utilities: finite-difference gradient checking and small
model/record factories."""

from __future__ import annotations

import numpy as np
import torch

from flowclass.model import EncoderConfig, TrafficEncoder, build_model, gradients

LAYER_GROUPS = ("embedding", "attention", "layer_norm", "ffn",
                "projection", "classifier")


def group_of(name: str) -> str:
    if name == "embedding":
        return "embedding"
    if ".wq." in name or ".wk." in name or ".wv." in name or ".wo." in name:
        return "attention"
    if "ln1_" in name or "ln2_" in name:
        return "layer_norm"
    if ".ffn1." in name or ".ffn2." in name:
        return "ffn"
    if name.startswith("proj"):
        return "projection"
    if name.startswith("classifier"):
        return "classifier"
    raise AssertionError(f"unclassified parameter {name}")


def grouped_params(model: TrafficEncoder) -> dict:
    groups = {}
    for name, param in model.named_parameters():
        groups.setdefault(group_of(name), []).append((name, param))
    return groups


def central_difference(loss_fn, param, flat_idx: int, h: float = 1e-5) -> float:
    flat = param.data.view(-1)
    orig = flat[flat_idx].item()
    try:
        flat[flat_idx] = orig + h
        f_plus = float(loss_fn().detach())
        flat[flat_idx] = orig - h
        f_minus = float(loss_fn().detach())
    finally:
        flat[flat_idx] = orig
    return (f_plus - f_minus) / (2.0 * h)


def check_gradients(model, loss_fn, n_per_group: int = 100,
                    rel_tol: float = 1e-4, abs_tol: float = 1e-6,
                    rng: np.random.Generator | None = None,
                    groups: dict | None = None) -> dict:
    """Compare autograd gradients of loss_fn() against central finite
    differences on n_per_group random coordinates per layer group. Returns
    {group: coords checked}; raises AssertionError listing failures."""
    rng = rng or np.random.default_rng(0)
    groups = groups or grouped_params(model)
    analytic = gradients(model, loss_fn())
    failures = []
    checked = {}
    for group, params in groups.items():
        sizes = [p.numel() for _, p in params]
        total = sum(sizes)
        count = min(n_per_group, total)
        picks = rng.choice(total, size=count, replace=False)
        for pick in picks:
            offset = int(pick)
            for (name, param), size in zip(params, sizes):
                if offset < size:
                    break
                offset -= size
            got = float(analytic[name].view(-1)[offset])
            want = central_difference(loss_fn, param, offset)
            tol = max(abs_tol, rel_tol * max(abs(got), abs(want)))
            if abs(got - want) > tol:
                failures.append(
                    f"{group}:{name}[{offset}] autograd={got:.3e} "
                    f"fd={want:.3e} diff={abs(got - want):.3e} tol={tol:.3e}")
        checked[group] = count
    assert not failures, "gradient mismatches:\n" + "\n".join(failures[:20])
    return checked


def small_model(vocab_size: int = 24, max_len: int = 10, n_classes: int = 0,
                seed: int = 0, dropout: float = 0.1) -> TrafficEncoder:
    cfg = EncoderConfig(vocab_size=vocab_size, max_len=max_len, d=8, heads=2,
                        d_head=4, ffn_dim=16, n_blocks=1, dropout_rate=dropout,
                        proj_dim=6, n_classes=n_classes)
    return build_model(cfg, seed=seed)


def random_ids(rng: np.random.Generator, batch: int, length: int,
               vocab_size: int, pad_tail: int = 0) -> torch.Tensor:
    ids = rng.integers(4, vocab_size, size=(batch, length))
    ids[:, 0] = 2  # CLS
    if pad_tail:
        ids[:, -pad_tail:] = 0
    return torch.tensor(ids, dtype=torch.long)
