"""Plain-text key=value run configuration.

Unknown keys are rejected; the canonical form (sorted keys, normalized
values) feeds a stable hash that every output artifact embeds, so a
(config hash, seed) pair pins a run's outputs byte for byte.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace

from .resnet import NetworkPlan, StageSpec


class ConfigError(ValueError):
    """Bad key, value, or combination in a run configuration."""


@dataclass
class RunConfig:
    # backbone plan
    stage_widths: tuple = (16, 32, 64)
    stage_blocks: tuple = (2, 2, 3)
    stage_strides: tuple = (1, 2, 2)
    input_hw: int = 32
    in_channels: int = 3
    sa_placements: tuple = ()  # 1-based (stage, block) pairs
    modulation: str = "none"  # none | gamma | beta
    gamma_squash: str = "none"  # none | sigmoid
    c_bar_ratio: int = 8
    proj_dim: int = 0  # 0 means "match the placed module's channels"
    # question encoder
    h_dim: int = 64
    embed_dim: int = 32
    max_len: int = 12
    cell: str = "gated"  # gated | vanilla
    # head
    attn_hidden: int = 64
    cls_hidden: int = 64
    # optimizer / loop
    lr: float = 2e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    freeze_backbone: bool = False
    init_checkpoint: str = ""
    # data
    train_data: str = ""
    eval_data: str = ""
    vocab: str = ""
    out_dir: str = ""

    # ------------------------------------------------------------------
    def plan(self) -> NetworkPlan:
        if not (len(self.stage_widths) == len(self.stage_blocks) == len(self.stage_strides)):
            raise ConfigError(
                "stage_widths, stage_blocks and stage_strides must have the same length"
            )
        stages = tuple(
            StageSpec(blocks=b, width=w, stride=s)
            for b, w, s in zip(self.stage_blocks, self.stage_widths, self.stage_strides)
        )
        return NetworkPlan(
            stages=stages,
            input_hw=self.input_hw,
            in_channels=self.in_channels,
            sa_placements=frozenset(self.sa_placements),
            modulation=self.modulation,
        ).validate()

    def canonical_text(self) -> str:
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            lines.append(f"{f.name}={_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]

    def override(self, **kwargs) -> "RunConfig":
        return replace(self, **kwargs)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(f"{a}:{b}" for a, b in value)
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_int_tuple(text: str) -> tuple:
    if not text.strip():
        return ()
    try:
        return tuple(int(p) for p in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


def parse_placements(text: str) -> tuple:
    """Parse placement syntax: either ``3:1,3:3`` pairs or the tabular
    ``S3:B1,3,5`` / ``S1,2,3:B2`` shorthand (stage set x block set)."""
    text = text.strip()
    if not text:
        return ()
    if text.upper().startswith("S"):
        stage_part, _, block_part = text.partition(":")
        if not block_part or not block_part.upper().startswith("B"):
            raise ConfigError(f"bad placement spec {text!r}; expected like S3:B1,3,5")
        try:
            stages = [int(p) for p in stage_part[1:].split(",")]
            blocks = [int(p) for p in block_part[1:].split(",")]
        except ValueError as exc:
            raise ConfigError(f"bad placement spec {text!r}") from exc
        return tuple(sorted((s, b) for s in stages for b in blocks))
    pairs = []
    for part in text.split(","):
        stage, _, block = part.partition(":")
        try:
            pairs.append((int(stage), int(block)))
        except ValueError as exc:
            raise ConfigError(f"bad placement pair {part!r} in {text!r}") from exc
    return tuple(sorted(pairs))


_PARSERS = {
    int: int,
    float: float,
    str: str,
}


def _parse_value(name: str, text: str, example):
    text = text.strip()
    if isinstance(example, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {text!r}")
    if isinstance(example, tuple):
        if name == "sa_placements":
            return parse_placements(text)
        return _parse_int_tuple(text)
    try:
        return _PARSERS[type(example)](text)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"{name}: cannot parse {text!r}") from exc


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse key=value lines; '#' starts a comment; unknown keys rejected."""
    cfg = base if base is not None else RunConfig()
    known = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        updates[key] = _parse_value(key, value, known[key])
    cfg = cfg.override(**updates)
    _validate(cfg)
    return cfg


def load_config(path: str, base: RunConfig | None = None) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read(), base)


def _validate(cfg: RunConfig):
    if cfg.modulation not in ("none", "gamma", "beta"):
        raise ConfigError(f"modulation must be none|gamma|beta, got {cfg.modulation!r}")
    if cfg.gamma_squash not in ("none", "sigmoid"):
        raise ConfigError(f"gamma_squash must be none|sigmoid, got {cfg.gamma_squash!r}")
    if cfg.cell not in ("gated", "vanilla"):
        raise ConfigError(f"cell must be gated|vanilla, got {cfg.cell!r}")
    for name in ("c_bar_ratio", "h_dim", "embed_dim", "max_len", "batch_size"):
        if getattr(cfg, name) <= 0:
            raise ConfigError(f"{name} must be positive")
    if cfg.epochs < 0:
        raise ConfigError("epochs must be >= 0")
    if cfg.lr <= 0:
        raise ConfigError("lr must be positive")
