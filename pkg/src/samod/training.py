"""Adamax optimization, the train/eval loops, reports, and the placement sweep."""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
import multiprocessing as mp

import numpy as np

from . import tensor as T
from .config import RunConfig
from .encoder import Vocabulary, tokenize_batch
from .model import VqaModel, _bucket, analytic_sa_count, count_parameters
from .serialize import checkpoint_arrays, restore_model, save_checkpoint
from .shapeworld import ANSWER_IDS, ANSWERS, FAMILIES, Sample, read_dataset, render


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


class Adamax(object):
    """Infinity-norm variant of Adam.

    Update per step: m <- b1*m + (1-b1)*g; u <- max(b2*u, |g|);
    theta <- theta - lr * m / ((1 - b1^t) * (u + eps)).
    Parameters with no gradient this step decay their state with g = 0.
    """

    def __init__(self, named_params, lr: float = 2e-2, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.named_params = list(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.named_params]
        self.u = [np.zeros_like(p.data) for _, p in self.named_params]

    def step(self):
        self.t += 1
        bias = 1.0 - self.beta1**self.t
        for i, (name, p) in enumerate(self.named_params):
            g = p.grad
            if g is None:
                g = 0.0
            elif np.isnan(g).any():
                raise DivergenceError(f"NaN gradient in parameter {name!r}")
            self.m[i] *= self.beta1
            self.m[i] += (1.0 - self.beta1) * g
            np.maximum(self.beta2 * self.u[i], np.abs(g), out=self.u[i])
            p.data -= self.lr * self.m[i] / (bias * (self.u[i] + self.eps))

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None


# ----------------------------------------------------------------------
# data preparation


@dataclass
class PreparedData:
    images: np.ndarray  # (n, 3, H, W) float32 in [0, 1]
    tokens: np.ndarray  # (n, max_len) int64
    labels: np.ndarray  # (n,) int64 answer ids
    families: np.ndarray  # (n,) str
    sample_ids: list

    def __len__(self):
        return len(self.labels)


def prepare_data(samples: list[Sample], vocab: Vocabulary, max_len: int = 12) -> PreparedData:
    images = np.stack([render(s.scene) for s in samples]).astype(np.float32)
    tokens = tokenize_batch([s.question for s in samples], vocab, max_len)
    labels = np.asarray([ANSWER_IDS[s.answer] for s in samples], dtype=np.int64)
    families = np.asarray([s.family for s in samples])
    return PreparedData(images, tokens, labels, families, [s.sample_id for s in samples])


def majority_rate_of(data: PreparedData) -> float:
    _, counts = np.unique(data.labels, return_counts=True)
    return counts.max() / len(data)


# ----------------------------------------------------------------------
# reports


@dataclass
class EpochStats:
    epoch: int
    train_loss: float | None  # None for the pre-training (epoch 0) row
    eval_acc: float
    family_acc: dict = field(default_factory=dict)
    gamma_stats: tuple | None = None  # (mean, min, max) over placed gates
    gammah_stats: tuple | None = None  # (mean, min, max) of per-example gates


@dataclass
class RunReport:
    config_hash: str
    seed: int
    majority_rate: float
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    best_acc: float = 0.0
    diverged: bool = False
    divergence_note: str = ""
    wall_time_s: float = 0.0

    def loss_curve(self) -> list:
        return [e.train_loss for e in self.epochs if e.train_loss is not None]

    def to_text(self) -> str:
        lines = [
            "# samod run report",
            f"config_hash: {self.config_hash}",
            f"seed: {self.seed}",
            f"majority_rate: {self.majority_rate!r}",
            f"best_epoch: {self.best_epoch}",
            f"best_acc: {self.best_acc!r}",
            f"diverged: {'true' if self.diverged else 'false'}",
        ]
        if self.divergence_note:
            lines.append(f"divergence_note: {self.divergence_note}")
        lines.append(f"wall_time_s: {self.wall_time_s!r}")
        for e in self.epochs:
            lines.append(f"epoch: {e.epoch}")
            loss = "-" if e.train_loss is None else repr(e.train_loss)
            lines.append(f"  train_loss: {loss}")
            lines.append(f"  eval_acc: {e.eval_acc!r}")
            for fam in FAMILIES:
                if fam in e.family_acc:
                    lines.append(f"  acc[{fam}]: {e.family_acc[fam]!r}")
            if e.gamma_stats is not None:
                mean, lo, hi = e.gamma_stats
                lines.append(f"  gamma_mean: {mean!r}")
                lines.append(f"  gamma_min: {lo!r}")
                lines.append(f"  gamma_max: {hi!r}")
            if e.gammah_stats is not None:
                mean, lo, hi = e.gammah_stats
                lines.append(f"  gammah_mean: {mean!r}")
                lines.append(f"  gammah_min: {lo!r}")
                lines.append(f"  gammah_max: {hi!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunReport":
        report = cls(config_hash="", seed=0, majority_rate=0.0)
        current = None
        for raw in text.splitlines():
            if raw.startswith("#") or not raw.strip():
                continue
            key, _, value = raw.partition(":")
            key, value = key.strip(), value.strip()
            if key == "epoch":
                current = EpochStats(epoch=int(value), train_loss=None, eval_acc=0.0)
                report.epochs.append(current)
            elif key == "config_hash":
                report.config_hash = value
            elif key == "seed":
                report.seed = int(value)
            elif key == "majority_rate":
                report.majority_rate = float(value)
            elif key == "best_epoch":
                report.best_epoch = int(value)
            elif key == "best_acc":
                report.best_acc = float(value)
            elif key == "diverged":
                report.diverged = value == "true"
            elif key == "divergence_note":
                report.divergence_note = value
            elif key == "wall_time_s":
                report.wall_time_s = float(value)
            elif key == "train_loss":
                current.train_loss = None if value == "-" else float(value)
            elif key == "eval_acc":
                current.eval_acc = float(value)
            elif key.startswith("acc["):
                current.family_acc[key[4:-1]] = float(value)
            elif key.startswith("gamma_") or key.startswith("gammah_"):
                stat = key.rsplit("_", 1)[1]
                attr = "gammah_stats" if key.startswith("gammah") else "gamma_stats"
                stats = dict(zip(("mean", "min", "max"), getattr(current, attr) or (0.0, 0.0, 0.0)))
                stats[stat] = float(value)
                setattr(current, attr, (stats["mean"], stats["min"], stats["max"]))
        return report


# ----------------------------------------------------------------------
# model construction from config


def build_model(cfg: RunConfig, vocab_size: int, seed: int | None = None) -> VqaModel:
    return VqaModel(
        cfg.plan(),
        vocab_size,
        ANSWERS,
        seed=cfg.seed if seed is None else seed,
        h_dim=cfg.h_dim,
        embed_dim=cfg.embed_dim,
        cell=cfg.cell,
        attn_hidden=cfg.attn_hidden,
        cls_hidden=cfg.cls_hidden,
        c_bar_ratio=cfg.c_bar_ratio,
        proj_dim=cfg.proj_dim or None,
        gamma_squash=cfg.gamma_squash,
    )


def trainable_parameters(model: VqaModel, freeze_backbone: bool):
    """All parameters, minus plain backbone weights when frozen (attention
    and modulator weights inside the backbone stay trainable)."""
    chosen = []
    for name, p in model.named_parameters():
        if freeze_backbone and _bucket(name) == "backbone":
            continue
        chosen.append((name, p))
    return chosen


# ----------------------------------------------------------------------
# evaluation


def evaluate_model(model: VqaModel, data: PreparedData, batch_size: int = 64):
    """(overall accuracy, per-family accuracy, gate-stat tuple or None)."""
    model.eval()
    sites = model.backbone.attention_sites()
    gamma_mods = [mod for _, _, _, mod in sites if mod is not None and hasattr(mod, "gate_values")]
    correct = np.zeros(len(data), dtype=bool)
    gammah_values = []
    with T.no_grad():
        for start in range(0, len(data), batch_size):
            sl = slice(start, min(start + batch_size, len(data)))
            images = data.images[sl].astype(np.float64)
            logits = model.forward(images, data.tokens[sl])
            pred = np.argmax(logits.data, axis=1)
            correct[sl] = pred == data.labels[sl]
            for mod in gamma_mods:
                if mod.last_gamma is not None:
                    gammah_values.append(mod.last_gamma.reshape(-1))
    overall = float(correct.mean())
    family_acc = {}
    for fam in FAMILIES:
        mask = data.families == fam
        if mask.any():
            family_acc[fam] = float(correct[mask].mean())
    gammah_stats = None
    if gammah_values:
        allv = np.concatenate(gammah_values)
        gammah_stats = (float(allv.mean()), float(allv.min()), float(allv.max()))
    return overall, family_acc, gammah_stats


def _gate_stats(model: VqaModel):
    gammas = [float(sa.gamma.data) for _, _, sa, _ in model.backbone.attention_sites()]
    if not gammas:
        return None
    arr = np.asarray(gammas)
    return (float(arr.mean()), float(arr.min()), float(arr.max()))


# ----------------------------------------------------------------------
# the training loop


def train_model(
    model: VqaModel,
    train_data: PreparedData,
    eval_data: PreparedData,
    cfg: RunConfig,
    *,
    seed: int | None = None,
    out_dir: str | None = None,
) -> RunReport:
    """Train with a fixed shuffle schedule; deterministic given (cfg, seed).

    Checkpoints (when ``out_dir`` is set) track the best eval accuracy.
    A non-finite loss or gradient aborts the loop and marks the report.
    """
    seed = cfg.seed if seed is None else seed
    t0 = time.monotonic()
    report = RunReport(
        config_hash=cfg.config_hash(),
        seed=seed,
        majority_rate=majority_rate_of(eval_data),
    )
    optimizer = Adamax(
        trainable_parameters(model, cfg.freeze_backbone),
        lr=cfg.lr,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps=cfg.eps,
    )

    def record_epoch(epoch: int, train_loss: float | None):
        acc, family_acc, gammah = evaluate_model(model, eval_data, batch_size=max(cfg.batch_size, 64))
        report.epochs.append(
            EpochStats(
                epoch=epoch,
                train_loss=train_loss,
                eval_acc=acc,
                family_acc=family_acc,
                gamma_stats=_gate_stats(model),
                gammah_stats=gammah,
            )
        )
        return acc

    best = record_epoch(0, None)  # pre-training baseline row
    report.best_epoch = 0
    report.best_acc = best
    if out_dir:
        _save_best(model, out_dir, cfg, seed)

    n = len(train_data)
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = np.random.default_rng([seed, 7001, epoch]).permutation(n)
        loss_sum = 0.0
        try:
            for start in range(0, n, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                T.active_tape().clear()
                images = train_data.images[idx].astype(np.float64)
                logits = model.forward(images, train_data.tokens[idx])
                loss = T.softmax_cross_entropy(logits, train_data.labels[idx])
                loss_val = loss.item()
                if not np.isfinite(loss_val):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}")
                loss_sum += loss_val * len(idx)
                T.backward(loss)
                optimizer.step()
                optimizer.zero_grad()
        except DivergenceError as exc:
            report.diverged = True
            report.divergence_note = str(exc)
            break
        acc = record_epoch(epoch, loss_sum / n)
        if acc > report.best_acc:
            report.best_acc = acc
            report.best_epoch = epoch
            if out_dir:
                _save_best(model, out_dir, cfg, seed)

    report.wall_time_s = time.monotonic() - t0
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.txt"), "w") as fh:
            fh.write(report.to_text())
    return report


def _save_best(model, out_dir, cfg, seed):
    named, kinds = checkpoint_arrays(model)
    save_checkpoint(
        os.path.join(out_dir, "checkpoint_best"),
        named,
        config_hash=cfg.config_hash(),
        seed=seed,
        kinds=kinds,
    )


# ----------------------------------------------------------------------
# end-to-end run from config paths


@lru_cache(maxsize=4)
def _load_prepared(path: str, vocab_path: str, max_len: int) -> PreparedData:
    vocab = Vocabulary.load(vocab_path)
    return prepare_data(read_dataset(path), vocab, max_len)


def run_training(cfg: RunConfig, *, seed: int | None = None, out_dir: str | None = None) -> RunReport:
    """Load data per config, build the model, train, return the report."""
    if not cfg.train_data or not cfg.eval_data or not cfg.vocab:
        raise ValueError("config must set train_data, eval_data and vocab paths")
    seed = cfg.seed if seed is None else seed
    train_pd = _load_prepared(cfg.train_data, cfg.vocab, cfg.max_len)
    eval_pd = _load_prepared(cfg.eval_data, cfg.vocab, cfg.max_len)
    vocab = Vocabulary.load(cfg.vocab)
    model = build_model(cfg, len(vocab), seed=seed)
    if cfg.init_checkpoint:
        restore_model(model, cfg.init_checkpoint)
    return train_model(model, train_pd, eval_pd, cfg, seed=seed, out_dir=out_dir)


# ----------------------------------------------------------------------
# placement sweep


@dataclass
class SweepRow:
    label: str
    placements: tuple
    seeds: list
    accs: list
    mean_acc: float
    sa_params: int
    failed: bool = False
    error: str = ""


def placement_label(placements) -> str:
    if not placements:
        return "No SA"
    by_stage: dict[int, list[int]] = {}
    for stage, block in sorted(placements):
        by_stage.setdefault(stage, []).append(block)
    block_sets = {tuple(v) for v in by_stage.values()}
    if len(block_sets) == 1:
        stages = ",".join(str(s) for s in sorted(by_stage))
        blocks = ",".join(str(b) for b in next(iter(block_sets)))
        return f"SA (S: {stages} - B: {blocks})"
    pairs = " ".join(f"S{s}:B{b}" for s, b in sorted(placements))
    return f"SA ({pairs})"


def _sweep_cell(args):
    cfg, seed = args
    try:
        report = run_training(cfg, seed=seed)
        return (True, report.best_acc, report.to_text())
    except Exception as exc:  # failed cells are marked, the sweep continues
        return (False, 0.0, f"{type(exc).__name__}: {exc}")


def sweep(
    base_cfg: RunConfig,
    placement_sets: list,
    seeds: list,
    *,
    workers: int = 1,
    include_baseline: bool = True,
) -> list[SweepRow]:
    """One seeded run per placement set per seed, on fixed data.

    Returns rows with the baseline first (when included), remaining rows
    sorted by descending seed-mean accuracy. Failed cells keep their row,
    marked, without stopping the sweep.
    """
    todo = [tuple(sorted(p)) for p in placement_sets]
    if include_baseline and () not in todo:
        todo.insert(0, ())
    cells = [(base_cfg.override(sa_placements=p), s) for p in todo for s in seeds]
    if workers > 1:
        old = {k: os.environ.get(k) for k in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS")}
        os.environ["OMP_NUM_THREADS"] = "1"
        os.environ["OPENBLAS_NUM_THREADS"] = "1"
        try:
            with ProcessPoolExecutor(max_workers=workers, mp_context=mp.get_context("spawn")) as pool:
                results = list(pool.map(_sweep_cell, cells))
        finally:
            for k, v in old.items():
                if v is None:
                    os.environ.pop(k, None)
                else:
                    os.environ[k] = v
    else:
        results = [_sweep_cell(c) for c in cells]

    rows = []
    widths = base_cfg.stage_widths
    blocks = base_cfg.stage_blocks
    for i, placements in enumerate(todo):
        cell_results = results[i * len(seeds) : (i + 1) * len(seeds)]
        ok = all(r[0] for r in cell_results)
        accs = [r[1] for r in cell_results]
        rows.append(
            SweepRow(
                label=placement_label(placements),
                placements=placements,
                seeds=list(seeds),
                accs=accs if ok else [],
                mean_acc=float(np.mean(accs)) if ok else float("nan"),
                sa_params=analytic_sa_count(widths, blocks, placements, base_cfg.c_bar_ratio),
                failed=not ok,
                error="; ".join(r[2] for r in cell_results if not r[0]),
            )
        )
    if include_baseline:
        head = [r for r in rows if not r.placements]
        tail = [r for r in rows if r.placements]
    else:
        head, tail = [], list(rows)
    tail.sort(key=lambda r: -(float("-inf") if r.failed else r.mean_acc))
    return head + tail


def sweep_table(rows: list[SweepRow]) -> str:
    """Fixed-width text table: configuration, seed-mean eval %, #param."""
    header = f"{'configuration':<28} {'eval %':>8} {'seeds':>24} {'#param':>10}"
    lines = [header, "-" * len(header)]
    for r in rows:
        if r.failed:
            lines.append(f"{r.label:<28} {'FAILED':>8} {r.error[:24]:>24} {r.sa_params:>10}")
            continue
        per_seed = "/".join(f"{a * 100:.2f}" for a in r.accs)
        lines.append(f"{r.label:<28} {r.mean_acc * 100:>8.2f} {per_seed:>24} {r.sa_params:>10}")
    return "\n".join(lines) + "\n"
