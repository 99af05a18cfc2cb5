"""Command-line pipeline driver.

Subcommands: ingest, synth, vocab, encode, pretrain, finetune, iterate,
eval, ablate, export-vectors. Configuration comes from a key=value config
file (sections) overridden by repeatable `--set section.key=value` flags;
the fully resolved config is logged for every run. Exit codes: 0 success,
1 usage, 2 input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from . import __version__
from . import config as cfgmod
from .errors import InputError, NumericError
from .flows import read_flows, write_flows
from .ingest import load_label_map, reassemble_flows
from .model import batch_ids, build_model, load_checkpoint, save_checkpoint
from .pipeline import (PipelineSettings, desk_settings, median, parse_variant,
                       run_ablation)
from .pretrain import pretrain_loop, save_loss_curve
from .semisup import evaluate_records, init_model, iterate
from .synthgen import CorpusSpec, generate
from .tokenizer import (build_vocab, encode_corpus, load_vocab, read_records,
                        save_vocab, sequence_length, write_records)
from .train_eval import split

log = logging.getLogger("flowclass")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _require(path) -> str:
    if not os.path.exists(path):
        raise InputError(f"input file not found: {path}")
    return path


def _variant(value: str) -> str:
    try:
        parse_variant(value)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))
    return value


def _seed_list(value: str) -> list:
    return [int(x) for x in value.split(",") if x.strip()]


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _figures_enabled(args) -> bool:
    return not getattr(args, "no_figures", False)


def _resolved_config(args) -> dict:
    path = getattr(args, "config", None)
    if path is not None:
        _require(path)
    cfg = cfgmod.load_config(path, getattr(args, "set", None) or ())
    cfgmod.log_resolved(cfg)
    return cfg


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    labels = load_label_map(_require(args.labels)) if args.labels else {}
    flows = []
    totals = {"non_tcp": 0, "skipped": 0, "truncated": 0}
    for path in args.pcap:
        label = labels.get(os.path.basename(path))
        result = reassemble_flows(_require(path), label=label)
        flows.extend(result.flows)
        totals["non_tcp"] += result.non_tcp_dropped
        totals["skipped"] += result.frames_skipped
        totals["truncated"] += result.truncated_records
        log.info("%s: %d flows, %d non-TCP dropped, %d frames skipped",
                 path, len(result.flows), result.non_tcp_dropped,
                 result.frames_skipped)
    n = write_flows(args.out, flows, max_payload_bytes=args.m)
    print(f"wrote {n} flows to {args.out} "
          f"(non-TCP dropped: {totals['non_tcp']}, frames skipped: "
          f"{totals['skipped']}, truncated records: {totals['truncated']})")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = cfgmod.load_config(_require(args.spec), args.set or ())
    cfgmod.log_resolved(cfg)
    if not cfg.get("corpus"):
        raise InputError(f"{args.spec}: missing [corpus] section")
    spec = CorpusSpec.from_mapping(cfg["corpus"])
    labeled, unlabeled = generate(spec)
    n = write_flows(args.out, labeled)
    print(f"wrote {n} labeled flows to {args.out}")
    if args.unlabeled:
        n = write_flows(args.unlabeled, unlabeled)
        print(f"wrote {n} unlabeled flows to {args.unlabeled}")
    return EXIT_OK


def cmd_vocab(args) -> int:
    cfg = _resolved_config(args)
    m = args.m if args.m is not None else int(cfg["tokenize"]["m"])
    n = args.n if args.n is not None else int(cfg["tokenize"]["n"])
    flows = read_flows(_require(args.flows))
    if not flows:
        raise InputError(f"{args.flows}: no flows")
    vocab = build_vocab(flows, m, n)
    save_vocab(args.out, vocab)
    print(f"wrote vocab ({vocab.size} entries, m={m}, n={n}) to {args.out}")
    return EXIT_OK


def _split_path(out: str, part: str) -> str:
    path = Path(out)
    return str(path.with_name(f"{path.stem}.{part}{path.suffix or '.jsonl'}"))


def cmd_encode(args) -> int:
    cfg = _resolved_config(args)
    vocab = load_vocab(_require(args.vocab))
    flows = read_flows(_require(args.flows))
    records = encode_corpus(flows, vocab, args.mask or ())
    write_records(args.out, records)
    print(f"wrote {len(records)} token records to {args.out} "
          f"(L={sequence_length(vocab.m, vocab.n)})")
    if args.split:
        seed = (args.split_seed if args.split_seed is not None
                else int(cfg["split"]["seed"]))
        stratified = bool(int(cfg["split"]["stratified"]))
        tr, va, te = split(records, seed=seed, stratified=stratified)
        for part, idx in (("train", tr), ("val", va), ("test", te)):
            path = _split_path(args.out, part)
            write_records(path, [records[i] for i in idx])
            print(f"wrote {len(idx)} {part} records to {path}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _resolved_config(args)
    vocab = load_vocab(_require(args.vocab))
    records = read_records(_require(args.tokens))
    max_len = sequence_length(vocab.m, vocab.n)
    enc_cfg = cfgmod.encoder_config(cfg, vocab.size, max_len)
    model = build_model(enc_cfg, seed=int(cfg["model"]["seed"]))
    cpt_cfg = cfgmod.contrastive_config(cfg)
    opt_cfg = cfgmod.optimizer_config(cfg, total_steps=cpt_cfg.step)
    model, curve = pretrain_loop(records, cpt_cfg, model, opt_cfg)
    save_checkpoint(args.out, model, meta={"m": vocab.m, "n": vocab.n,
                                           "stage": "pretrain"})
    curve_path = args.loss_curve or f"{args.out}.loss.txt"
    save_loss_curve(curve_path, curve)
    print(f"pre-trained {cpt_cfg.step} steps; checkpoint {args.out}, "
          f"loss curve {curve_path}")
    if _figures_enabled(args):
        from .figures import save_loss_figure
        save_loss_figure(curve, f"{curve_path}.png")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _resolved_config(args)
    train = read_records(_require(args.train))
    val = read_records(_require(args.val))
    labels = [r.label for r in train + val if r.label is not None]
    if not labels:
        raise InputError("fine-tuning requires labeled records")
    n_classes = args.classes or 1 + max(labels)
    model, meta = load_checkpoint(_require(args.pretrained))
    n_batches = -(-len(train) // int(cfg["finetune"]["batch_size"]))
    total = max(1, int(cfg["finetune"]["epochs"]) * n_batches)
    ft = cfgmod.finetune_config(cfg, total_steps=total)
    m0, val_report = init_model(model, n_classes, train, val, ft)
    meta = dict(meta, stage="finetune", n_classes=n_classes)
    save_checkpoint(args.out, m0, meta=meta)
    print(f"fine-tuned model saved to {args.out} "
          f"(val macro-F1 {val_report.macro_f1:.4f})")
    if args.metrics:
        _write_json(args.metrics, val_report.to_dict())
    return EXIT_OK


def cmd_iterate(args) -> int:
    cfg = _resolved_config(args)
    for key, value in (("thr", args.thr), ("limit", args.limit),
                       ("epsilon", args.epsilon)):
        if value is not None:
            cfg["iterate"][key] = value
    model, meta = load_checkpoint(_require(args.model))
    if model.cfg.n_classes < 2:
        raise InputError(f"{args.model}: checkpoint has no classification head")
    train = read_records(_require(args.train))
    val = read_records(_require(args.val))
    unlabeled = read_records(_require(args.unlabeled))
    plc = cfgmod.pli_config(cfg)
    n_batches = -(-2 * len(train) // int(cfg["finetune"]["batch_size"]))
    total = max(1, int(cfg["finetune"]["epochs"]) * n_batches)
    ft = cfgmod.finetune_config(cfg, total_steps=total)
    final, report = iterate(model, train, val, unlabeled, plc, ft)
    save_checkpoint(args.out, final, meta=dict(meta, stage="iterate"))
    _write_json(args.report, report)
    print(f"iteration finished: m0 F1 {report['m0_val_f1']:.4f} -> best "
          f"{report['best_val_f1']:.4f} over {report['iterations_run']} "
          f"iteration(s); model {args.out}, report {args.report}")
    if _figures_enabled(args):
        from .figures import save_iteration_figure
        save_iteration_figure(report, f"{args.report}.png")
    return EXIT_OK


def cmd_eval(args) -> int:
    _resolved_config(args)
    model, _ = load_checkpoint(_require(args.model))
    if model.cfg.n_classes < 2:
        raise InputError(f"{args.model}: checkpoint has no classification head")
    records = read_records(_require(args.tokens))
    if any(r.label is None for r in records):
        raise InputError("evaluation requires labeled records")
    report = evaluate_records(model, records)
    _write_json(args.out, report.to_dict())
    print(f"macro-F1 {report.macro_f1:.4f} accuracy {report.accuracy:.4f} "
          f"-> {args.out}")
    if _figures_enabled(args):
        from .figures import save_confusion_figure
        save_confusion_figure(report.confusion, f"{args.out}.png")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _resolved_config(args)
    labeled = read_flows(_require(args.flows))
    unlabeled = read_flows(_require(args.unlabeled)) if args.unlabeled else []
    if args.config is None:
        settings = desk_settings()
        log.info("no config given: using desk-scale ablation settings")
    else:
        m = int(cfg["tokenize"]["m"])
        n = int(cfg["tokenize"]["n"])
        enc = cfgmod.encoder_config(cfg, vocab_size=4,
                                    max_len=sequence_length(m, n))
        cpt = cfgmod.contrastive_config(cfg)
        settings = PipelineSettings(
            m=m, n=n,
            encoder=dict(d=enc.d, heads=enc.heads, d_head=enc.d_head,
                         ffn_dim=enc.ffn_dim, n_blocks=enc.n_blocks,
                         dropout_rate=enc.dropout_rate, proj_dim=enc.proj_dim),
            contrastive=cpt,
            cpt_optimizer=cfgmod.optimizer_config(cfg, total_steps=cpt.step),
            finetune=cfgmod.finetune_config(cfg),
            pli=cfgmod.pli_config(cfg),
            split_seed=int(cfg["split"]["seed"]),
        )
    results = {}
    for variant in args.variant:
        results[variant] = run_ablation(labeled, unlabeled, variant,
                                        args.seeds, settings)
    summary = {
        variant: {
            "per_seed_macro_f1": [r["test_macro_f1"] for r in runs],
            "median_macro_f1": median([r["test_macro_f1"] for r in runs]),
        }
        for variant, runs in results.items()
    }
    _write_json(args.out, {"summary": summary, "runs": results})
    for variant, entry in summary.items():
        print(f"{variant}: median test macro-F1 "
              f"{entry['median_macro_f1']:.4f} over {len(args.seeds)} seed(s)")
    if _figures_enabled(args):
        from .figures import save_ablation_figure
        save_ablation_figure(
            {v: s["per_seed_macro_f1"] for v, s in summary.items()},
            f"{args.out}.png")
    return EXIT_OK


def cmd_export_vectors(args) -> int:
    _resolved_config(args)
    model, _ = load_checkpoint(_require(args.model))
    records = read_records(_require(args.tokens))
    d = model.cfg.d
    with open(args.out, "w") as fh:
        fh.write("id\tlabel\t" + "\t".join(f"v{i}" for i in range(d)) + "\n")
        with torch.no_grad():
            for start in range(0, len(records), 128):
                chunk = records[start:start + 128]
                trace = model.forward(batch_ids(chunk), mode="eval")
                for rec, vec in zip(chunk, trace.cls):
                    cells = "\t".join(f"{float(x):.8g}" for x in vec)
                    label = "" if rec.label is None else str(rec.label)
                    fh.write(f"{rec.flow_id}\t{label}\t{cells}\n")
    print(f"wrote {len(records)} vectors (d={d}) to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser wiring
# ---------------------------------------------------------------------------

def _build_parser() -> _Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--threads", type=int,
                        default=int(os.environ.get("FLOWCLASS_THREADS", "1")),
                        help="torch CPU threads (env FLOWCLASS_THREADS)")
    common.add_argument("--no-figures", action="store_true",
                        help="skip rendering PNG figures next to reports")
    common.add_argument("--verbose", action="store_true")

    parser = _Parser(prog="flowclass", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="COMMAND")

    p = sub.add_parser("ingest", parents=[common],
                       help="parse pcap captures into flow records")
    p.add_argument("--pcap", nargs="+", required=True)
    p.add_argument("--labels", help="file mapping capture name -> class id")
    p.add_argument("--out", required=True)
    p.add_argument("--m", type=int, default=128,
                   help="payload bytes stored per flow")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", parents=[common],
                       help="generate a synthetic labeled corpus")
    p.add_argument("--spec", required=True, help="config file with [corpus]")
    p.add_argument("--out", required=True)
    p.add_argument("--unlabeled")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("vocab", parents=[common],
                       help="build the coding dictionary")
    p.add_argument("--flows", required=True)
    p.add_argument("--m", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_vocab)

    p = sub.add_parser("encode", parents=[common],
                       help="encode flows into token records")
    p.add_argument("--flows", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mask", action="append", choices=["rp", "pl"],
                   help="blank a segment (ablation)")
    p.add_argument("--split", action="store_true",
                   help="also write stratified 8:1:1 train/val/test files")
    p.add_argument("--split-seed", type=int)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("pretrain", parents=[common],
                       help="contrastive pre-training")
    p.add_argument("--tokens", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--loss-curve")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common],
                       help="attach a classifier head and fine-tune")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--pretrained", required=True)
    p.add_argument("--classes", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("iterate", parents=[common],
                       help="pseudo-label iteration over unlabeled data")
    p.add_argument("--model", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--unlabeled", required=True)
    p.add_argument("--thr", type=float)
    p.add_argument("--limit", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--out", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_iterate)

    p = sub.add_parser("eval", parents=[common],
                       help="evaluate a checkpoint on labeled tokens")
    p.add_argument("--model", required=True)
    p.add_argument("--tokens", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common],
                       help="run pipeline variants over seeds")
    p.add_argument("--flows", required=True)
    p.add_argument("--unlabeled")
    p.add_argument("--variant", action="append", type=_variant, required=True,
                   help="full | no_pli | no_cpt | no_rp | no_pl (+-combos)")
    p.add_argument("--seeds", type=_seed_list, default=[0, 1, 2, 3, 4])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-vectors", parents=[common],
                       help="dump CLS classification-layer vectors as TSV")
    p.add_argument("--model", required=True)
    p.add_argument("--tokens", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_vectors)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.threads))
    log.info("flowclass %s command=%s threads=%d", __version__, args.command,
             max(1, args.threads))
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        log.error("input file not found: %s", exc.filename or exc)
        return EXIT_INPUT
    except InputError as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
