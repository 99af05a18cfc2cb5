"""Run configuration: flat key=value sections, file < CLI-flag precedence.

Defaults follow the published setup wherever it fixes a value (m=128, n=32,
8 heads of size 64, 1024 FFN neurons, 6 blocks, lr 5e-5, warmup 0.03,
strong-negative weight 2, thr 0.95, iteration limit 5); everything else is
a documented choice. The resolved configuration is logged at the start of
every run so results are reproducible from logs alone.
"""

from __future__ import annotations

import configparser
import logging
from typing import Optional

from .errors import InputError
from .model import EncoderConfig
from .pretrain import ContrastiveConfig
from .semisup import FineTuneConfig, PseudoLabelConfig
from .train_eval import OptimizerConfig

log = logging.getLogger(__name__)

DEFAULTS = {
    "tokenize": {"m": 128, "n": 32},
    "model": {"d": 512, "heads": 8, "d_head": 64, "ffn": 1024, "blocks": 6,
              "dropout": 0.1, "proj_dim": 128, "seed": 0},
    "optimizer": {"lr": 5e-5, "warmup": 0.03, "weight_decay": 0.01,
                  "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
    "pretrain": {"step": 1000, "bz": 32, "tau": 0.1, "alpha": 2.0,
                 "beta": 1.0, "retry_cap": 500, "seed": 0},
    "finetune": {"epochs": 4, "batch_size": 32, "seed": 0},
    "iterate": {"thr": 0.95, "limit": 5, "epsilon": 0.001, "w1": 1.0,
                "w2": 0.5, "budget": 0, "seed": 0},
    "split": {"seed": 0, "stratified": 1},
    "corpus": {},  # free-form, parsed by CorpusSpec.from_mapping
}


def load_config(path: Optional[str] = None, overrides=()) -> dict:
    """Resolve defaults, then the config file, then `section.key=value`
    override strings (CLI flags)."""
    resolved = {section: dict(values) for section, values in DEFAULTS.items()}
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise InputError(f"config file not found: {path}")
        for section in parser.sections():
            target = resolved.setdefault(section, {})
            for key, value in parser.items(section):
                target[key] = _coerce(section, key, value)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise InputError(f"override must be section.key=value: {item!r}")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        resolved.setdefault(section, {})[key] = _coerce(section, key, value)
    return resolved


def _coerce(section: str, key: str, value: str):
    default = DEFAULTS.get(section, {}).get(key)
    if isinstance(default, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def log_resolved(cfg: dict) -> None:
    for section in sorted(cfg):
        for key in sorted(cfg[section]):
            log.info("config %s.%s=%s", section, key, cfg[section][key])


# ---------------------------------------------------------------------------
# Builders for the per-stage config dataclasses
# ---------------------------------------------------------------------------

def encoder_config(cfg: dict, vocab_size: int, max_len: int,
                   n_classes: int = 0) -> EncoderConfig:
    m = cfg["model"]
    return EncoderConfig(vocab_size=vocab_size, max_len=max_len,
                         d=int(m["d"]), heads=int(m["heads"]),
                         d_head=int(m["d_head"]), ffn_dim=int(m["ffn"]),
                         n_blocks=int(m["blocks"]),
                         dropout_rate=float(m["dropout"]),
                         proj_dim=int(m["proj_dim"]), n_classes=n_classes)


def optimizer_config(cfg: dict, total_steps: int) -> OptimizerConfig:
    o = cfg["optimizer"]
    return OptimizerConfig(base_lr=float(o["lr"]),
                           warmup_fraction=float(o["warmup"]),
                           total_steps=total_steps, beta1=float(o["beta1"]),
                           beta2=float(o["beta2"]), eps=float(o["eps"]),
                           weight_decay=float(o["weight_decay"]))


def contrastive_config(cfg: dict) -> ContrastiveConfig:
    p = cfg["pretrain"]
    return ContrastiveConfig(step=int(p["step"]), bz=int(p["bz"]),
                             tau=float(p["tau"]), alpha=float(p["alpha"]),
                             beta=float(p["beta"]),
                             retry_cap=int(p["retry_cap"]),
                             seed=int(p["seed"]))


def finetune_config(cfg: dict, total_steps: int = 1) -> FineTuneConfig:
    f = cfg["finetune"]
    return FineTuneConfig(epochs=int(f["epochs"]),
                          batch_size=int(f["batch_size"]),
                          optimizer=optimizer_config(cfg, total_steps),
                          seed=int(f["seed"]))


def pli_config(cfg: dict) -> PseudoLabelConfig:
    i = cfg["iterate"]
    budget = int(i["budget"])
    return PseudoLabelConfig(thr=float(i["thr"]), limit=int(i["limit"]),
                             epsilon=float(i["epsilon"]), w1=float(i["w1"]),
                             w2=float(i["w2"]),
                             budget=None if budget <= 0 else budget,
                             seed=int(i["seed"]))
