"""Command-line entry point: one executable for the full workflow.

Exit codes: 0 success, 1 usage/validation error, 2 runtime failure.
Every artifact written embeds the resolved config hash and seed.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import tensor as T
from .config import ConfigError, RunConfig, load_config, parse_placements
from .encoder import Vocabulary
from .gradcheck import COMPONENTS, run_gradcheck
from .model import ARCHS, analytic_modulation_count, analytic_sa_count, count_parameters
from .serialize import restore_model, save_checkpoint, write_tensor
from .shapeworld import FAMILIES, generate, majority_rate, write_dataset
from .training import (
    build_model,
    evaluate_model,
    placement_label,
    run_training,
    sweep,
    sweep_table,
    _load_prepared,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def _add_common(p):
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out-dir", default=None, help="directory for output artifacts")
    p.add_argument("--threads", type=int, default=1, help="parallel worker processes (sweep only)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")


def _build_parser() -> _Parser:
    parser = _Parser(prog="samod", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[], help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train-count", type=int, default=10000)
    p.add_argument("--eval-count", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--family-mix", default="", help="e.g. existence=1,attribute=2")

    p = sub.add_parser("train", help="train a model per config")
    p.add_argument("--config", required=True)
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    _add_common(p)

    p = sub.add_parser("sweep", help="train per attention placement and tabulate")
    p.add_argument("--config", required=True)
    p.add_argument("--placements", required=True, help="semicolon-separated, e.g. 'none;S3:B3;S3:B1,3,5'")
    p.add_argument("--seeds", default="0,1,2")
    _add_common(p)

    p = sub.add_parser("params", help="parameter counts, analytic for named architectures")
    p.add_argument("--arch", choices=sorted(ARCHS), default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--sa", default="", help="placements, e.g. S3:B1,3,5")
    p.add_argument("--modulation", choices=["none", "gamma", "beta"], default="none")
    p.add_argument("--h-dim", type=int, default=64)
    p.add_argument("--proj-dim", type=int, default=0)
    p.add_argument("--c-bar-ratio", type=int, default=8)

    p = sub.add_parser("gradcheck", help="central-difference gradient verification")
    p.add_argument("--component", default="all", help=f"one of {sorted(COMPONENTS)} or 'all'")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--max-coords", type=int, default=200)

    p = sub.add_parser("attn-dump", help="dump attention maps for one sample")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    _add_common(p)
    return parser


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config)
    overrides = "\n".join(args.set) if getattr(args, "set", None) else ""
    if overrides:
        from .config import parse_config

        cfg = parse_config(overrides, cfg)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.override(seed=args.seed)
    if getattr(args, "out_dir", None):
        cfg = cfg.override(out_dir=args.out_dir)
    return cfg


# ----------------------------------------------------------------------
# commands


def _cmd_gen_data(args) -> int:
    mix = None
    if args.family_mix:
        mix = {}
        for part in args.family_mix.split(","):
            name, _, weight = part.partition("=")
            if name not in FAMILIES:
                raise ConfigError(f"unknown family {name!r}")
            mix[name] = float(weight) if weight else 1.0
    os.makedirs(args.out, exist_ok=True)
    train = generate(args.seed, args.train_count, mix, split="train")
    evalset = generate(args.seed, args.eval_count, mix, split="eval")
    write_dataset(os.path.join(args.out, "train.tsv"), train)
    write_dataset(os.path.join(args.out, "eval.tsv"), evalset)
    vocab = Vocabulary.from_corpus([s.question for s in train])
    vocab.save(os.path.join(args.out, "vocab.txt"))
    print(f"wrote {len(train)} train / {len(evalset)} eval samples to {args.out}")
    print(f"train majority rate {majority_rate(train):.4f}, eval {majority_rate(evalset):.4f}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out_dir = cfg.out_dir or None
    report = run_training(cfg, out_dir=out_dir)
    last = report.epochs[-1]
    print(f"config_hash {cfg.config_hash()} seed {report.seed}")
    print(f"best eval acc {report.best_acc:.4f} at epoch {report.best_epoch} (majority {report.majority_rate:.4f})")
    print(f"final eval acc {last.eval_acc:.4f}; wall {report.wall_time_s:.1f}s")
    if report.diverged:
        print(f"training diverged: {report.divergence_note}", file=sys.stderr)
        return 2
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    vocab = Vocabulary.load(cfg.vocab)
    model = build_model(cfg, len(vocab))
    meta = restore_model(model, args.checkpoint)
    data = _load_prepared(args.data, cfg.vocab, cfg.max_len)
    acc, family_acc, _ = evaluate_model(model, data)
    print(f"accuracy {acc:.4f} on {len(data)} samples")
    for fam, a in family_acc.items():
        print(f"  {fam}: {a:.4f}")
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        path = os.path.join(args.out_dir, "predictions.tsv")
        with T.no_grad():
            with open(path, "w") as fh:
                fh.write(f"# config_hash={cfg.config_hash()} seed={meta.get('seed', cfg.seed)}\n")
                for start in range(0, len(data), 64):
                    sl = slice(start, min(start + 64, len(data)))
                    logits = model.forward(data.images[sl].astype(np.float64), data.tokens[sl])
                    for sid, row in zip(data.sample_ids[sl], logits.data):
                        fh.write(f"{sid}\t{model.answers[int(np.argmax(row))]}\n")
        print(f"wrote {path}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    placement_sets = []
    for part in args.placements.split(";"):
        part = part.strip()
        if part.lower() in ("none", ""):
            placement_sets.append(())
        else:
            placement_sets.append(parse_placements(part))
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = sweep(cfg, placement_sets, seeds, workers=max(1, args.threads))
    table = sweep_table(rows)
    header = f"# config_hash={cfg.config_hash()} seeds={args.seeds}\n"
    print(header + table, end="")
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        with open(os.path.join(cfg.out_dir, "sweep.txt"), "w") as fh:
            fh.write(header + table)
    return 2 if any(r.failed for r in rows) else 0


def _cmd_params(args) -> int:
    if (args.arch is None) == (args.config is None):
        raise ConfigError("params needs exactly one of --arch or --config")
    placements = parse_placements(args.sa) if args.sa else ()
    if args.arch:
        geom = ARCHS[args.arch]
        widths, blocks = geom.stage_widths, geom.stage_blocks
        sa_total = analytic_sa_count(widths, blocks, placements, args.c_bar_ratio)
        print(f"{args.arch} {placement_label(placements)}")
    else:
        cfg = load_config(args.config)
        if placements:
            cfg = cfg.override(sa_placements=placements)
        widths, blocks = cfg.stage_widths, cfg.stage_blocks
        placements = cfg.sa_placements
        sa_total = analytic_sa_count(widths, blocks, placements, cfg.c_bar_ratio)
        vocab_size = 64  # nominal size; backbone/head counts don't depend on data
        model = build_model(cfg, vocab_size)
        print(f"total parameters (vocab size {vocab_size}): {count_parameters(model, 'all')}")
        print(f"modulation parameters: {count_parameters(model, 'modulation_only')}")
    print(f"{sa_total} ({sa_total / 1e6:.3f}M)")
    if args.modulation != "none":
        mod_total = analytic_modulation_count(
            args.modulation, widths, blocks, placements, args.h_dim, args.proj_dim or None
        )
        print(f"modulation: {mod_total} ({mod_total / 1e6:.3f}M)")
    return 0


def _cmd_gradcheck(args) -> int:
    names = sorted(COMPONENTS) if args.component == "all" else [args.component]
    failed = False
    for name in names:
        report = run_gradcheck(name, seeds=range(args.seeds), max_coords=args.max_coords)
        print(report.summary())
        failed = failed or not report.passed
    return 2 if failed else 0


def _cmd_attn_dump(args) -> int:
    cfg = _load_cfg(args)
    vocab = Vocabulary.load(cfg.vocab)
    model = build_model(cfg, len(vocab))
    if args.checkpoint:
        restore_model(model, args.checkpoint)
    data = _load_prepared(args.data, cfg.vocab, cfg.max_len)
    if not 0 <= args.index < len(data):
        raise ConfigError(f"sample index {args.index} out of range for {len(data)} samples")
    out_dir = args.out_dir or "attn_dump"
    os.makedirs(out_dir, exist_ok=True)
    model.eval()
    model.capture_attention(True)
    with T.no_grad():
        model.forward(data.images[args.index : args.index + 1].astype(np.float64), data.tokens[args.index : args.index + 1])
    lines = [
        f"# samod attention dump",
        f"config_hash: {cfg.config_hash()}",
        f"seed: {cfg.seed}",
        f"sample_id: {data.sample_ids[args.index]}",
        "normalized_axis: key locations (each column of `weights` sums to 1)",
    ]
    count = 0
    for stage, block, sa, mod in model.backbone.attention_sites():
        tag = f"s{stage}b{block}"
        write_tensor(os.path.join(out_dir, f"{tag}_scores.matn"), sa.last_scores[0])
        write_tensor(os.path.join(out_dir, f"{tag}_weights.matn"), sa.last_weights[0])
        lines.append(f"site: stage {stage} block {block}  n_locations: {sa.last_weights.shape[-1]}")
        if mod is not None and getattr(mod, "last_weights", None) is not None:
            write_tensor(os.path.join(out_dir, f"{tag}_location_weights.matn"), mod.last_weights[0])
            lines.append(f"site: stage {stage} block {block}  location re-weighting dumped")
        count += 1
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"dumped {count} attention site(s) to {out_dir}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "params": _cmd_params,
    "gradcheck": _cmd_gradcheck,
    "attn-dump": _cmd_attn_dump,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
