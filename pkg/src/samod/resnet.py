"""Residual blocks and a configurable small backbone.

A backbone is a 3x3 stem convolution followed by stages of two-conv
residual blocks. The feature map handed to the answering head is the
output of stage 3 flattened to (channels, locations). Attention modules
sit between a block's second convolution and its second batchnorm; stage
and block coordinates are 1-based throughout (stage 3 is the third stage
built, matching how placement labels like "S: 3 - B: 2" read).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import SelfAttention
from .modulation import BetaModulator, GammaModulator, SQUASH_MODES, modulated_sa_forward
from .nn import BatchNorm2d, Conv2d, Initializer, Module
from .tensor import ShapeError, Tensor

MODULATION_KINDS = ("none", "gamma", "beta")


class PlanError(ValueError):
    """A network plan violates its structural invariants."""


@dataclass(frozen=True)
class StageSpec:
    blocks: int
    width: int
    stride: int


@dataclass(frozen=True)
class NetworkPlan:
    """Declarative backbone description plus attention placements.

    ``sa_placements`` holds 1-based (stage, block) coordinates;
    ``modulation`` selects how placed attention modules are conditioned on
    the question encoding.
    """

    stages: tuple[StageSpec, ...]
    input_hw: int = 32
    in_channels: int = 3
    sa_placements: frozenset = field(default_factory=frozenset)
    modulation: str = "none"

    def validate(self):
        if not self.stages:
            raise PlanError("plan has no stages")
        if self.input_hw < 4:
            raise PlanError(f"input side {self.input_hw} too small")
        prev_width = 0
        for i, st in enumerate(self.stages, start=1):
            if st.blocks < 1:
                raise PlanError(f"stage {i} has {st.blocks} blocks; every stage needs at least one")
            if st.width < prev_width:
                raise PlanError(
                    f"stage widths must be non-decreasing, stage {i} narrows {prev_width} -> {st.width}"
                )
            if st.stride < 1:
                raise PlanError(f"stage {i} stride {st.stride} invalid")
            prev_width = st.width
        for stage, block in self.sa_placements:
            if not 1 <= stage <= len(self.stages):
                raise PlanError(f"attention placement (S:{stage}, B:{block}) names a missing stage")
            if not 1 <= block <= self.stages[stage - 1].blocks:
                raise PlanError(f"attention placement (S:{stage}, B:{block}) names a missing block")
        if self.modulation not in MODULATION_KINDS:
            raise PlanError(f"modulation must be one of {MODULATION_KINDS}, got {self.modulation!r}")
        return self

    def with_placements(self, placements, modulation: str | None = None) -> "NetworkPlan":
        return NetworkPlan(
            stages=self.stages,
            input_hw=self.input_hw,
            in_channels=self.in_channels,
            sa_placements=frozenset(placements),
            modulation=self.modulation if modulation is None else modulation,
        )

    def stage_output_hw(self, stage: int) -> int:
        hw = self.input_hw
        for st in self.stages[:stage]:
            if hw % st.stride:
                raise PlanError(f"stride {st.stride} does not divide extent {hw}")
            hw //= st.stride
        return hw


def desk_plan(**overrides) -> NetworkPlan:
    """Default desk-scale backbone: 16/32/64 channels, 2/2/3 blocks,
    32x32 inputs, stage-3 maps of 8x8 = 64 locations."""
    base = dict(
        stages=(StageSpec(2, 16, 1), StageSpec(2, 32, 2), StageSpec(3, 64, 2)),
        input_hw=32,
        in_channels=3,
    )
    base.update(overrides)
    return NetworkPlan(**base).validate()


class ResidualBlock(Module):
    """Two 3x3 convolutions with a shortcut add and trailing relu.

    The shortcut is the identity when shape allows, otherwise a 1x1
    projection. An optional attention module (possibly question-modulated)
    applies to the second convolution's output right before its batchnorm.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        stride: int,
        *,
        init: Initializer,
        scope: str,
        sa: SelfAttention | None = None,
        sa_mod=None,
    ):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.conv1 = Conv2d(in_channels, out_channels, 3, stride=stride, pad=1, init=init, scope=scope + ".conv1")
        self.bn1 = BatchNorm2d(out_channels)
        self.conv2 = Conv2d(out_channels, out_channels, 3, stride=1, pad=1, init=init, scope=scope + ".conv2")
        self.bn2 = BatchNorm2d(out_channels)
        if in_channels != out_channels or stride != 1:
            self.shortcut = Conv2d(in_channels, out_channels, 1, stride=stride, pad=0, init=init, scope=scope + ".shortcut")
        else:
            self.shortcut = None
        if sa is not None:
            self.sa = sa
        else:
            self.sa = None
        if sa_mod is not None:
            self.sa_mod = sa_mod
        else:
            self.sa_mod = None

    def forward(self, x: Tensor, cond: Tensor | None = None) -> Tensor:
        if x.shape[-3] != self.in_channels:
            raise ShapeError(f"block expects {self.in_channels} input channels, got {x.shape[-3]}")
        out = T.relu(self.bn1(self.conv1(x)))
        out = self.conv2(out)
        if self.sa is not None:
            out = self._apply_attention(out, cond)
        out = self.bn2(out)
        skip = self.shortcut(x) if self.shortcut is not None else x
        return T.relu(T.add(out, skip))

    def _apply_attention(self, out: Tensor, cond: Tensor | None) -> Tensor:
        shape = out.shape
        flat = T.reshape(out, shape[:-2] + (shape[-2] * shape[-1],))
        if isinstance(self.sa_mod, GammaModulator):
            if cond is None:
                raise ShapeError("block attention is question-modulated but no question encoding was given")
            maps = self.sa.attention_maps(flat)
            mixed = self.sa.mix_values(flat, maps)
            flat = self.sa_mod(cond, mixed, flat)
        elif isinstance(self.sa_mod, BetaModulator):
            if cond is None:
                raise ShapeError("block attention is question-modulated but no question encoding was given")
            flat = modulated_sa_forward(self.sa, self.sa_mod, cond, flat)
        else:
            flat = self.sa(flat)
        return T.reshape(flat, shape)


class Backbone(Module):
    """Stem + stages per plan; features() returns the stage-3 map as (C, N)."""

    def __init__(
        self,
        plan: NetworkPlan,
        *,
        init: Initializer,
        c_bar_ratio: int = 8,
        h_dim: int = 64,
        proj_dim: int | None = None,
        gamma_squash: str = "none",
    ):
        super().__init__()
        plan.validate()
        if gamma_squash not in SQUASH_MODES:
            raise PlanError(f"gamma_squash must be one of {SQUASH_MODES}")
        self.plan = plan
        stem_width = plan.stages[0].width
        self.stem = Conv2d(plan.in_channels, stem_width, 3, stride=1, pad=1, init=init, scope="backbone.stem")
        self.stem_bn = BatchNorm2d(stem_width)
        self.blocks: list[list[ResidualBlock]] = []
        in_ch = stem_width
        for si, st in enumerate(plan.stages, start=1):
            stage_blocks = []
            for bi in range(1, st.blocks + 1):
                scope = f"backbone.s{si}.b{bi}"
                sa = None
                sa_mod = None
                if (si, bi) in plan.sa_placements:
                    reduced = max(1, st.width // c_bar_ratio)
                    sa = SelfAttention(st.width, reduced, init=init, scope=scope + ".sa")
                    if plan.modulation == "gamma":
                        sa_mod = GammaModulator(h_dim, squash=gamma_squash)
                    elif plan.modulation == "beta":
                        sa_mod = BetaModulator(st.width, h_dim, proj_dim, init=init, scope=scope + ".sa_mod")
                stride = st.stride if bi == 1 else 1
                block = ResidualBlock(in_ch, st.width, stride, init=init, scope=scope, sa=sa, sa_mod=sa_mod)
                setattr(self, f"s{si}_b{bi}", block)  # registers as a child
                stage_blocks.append(block)
                in_ch = st.width
            self.blocks.append(stage_blocks)

    def attention_sites(self):
        """(stage, block, attention layer, modulator) for every placement."""
        sites = []
        for si, stage_blocks in enumerate(self.blocks, start=1):
            for bi, block in enumerate(stage_blocks, start=1):
                if block.sa is not None:
                    sites.append((si, bi, block.sa, block.sa_mod))
        return sites

    def features(self, image: Tensor, cond: Tensor | None = None) -> Tensor:
        """Stage-3 output flattened to (..., channels, locations)."""
        if len(self.blocks) < 3:
            raise ShapeError(f"feature extraction needs 3 stages, plan has {len(self.blocks)}")
        if image.shape[-3:] != (self.plan.in_channels, self.plan.input_hw, self.plan.input_hw):
            raise ShapeError(
                f"image shape {image.shape} does not match configured input "
                f"({self.plan.in_channels}, {self.plan.input_hw}, {self.plan.input_hw})"
            )
        x = T.relu(self.stem_bn(self.stem(image)))
        for stage_blocks in self.blocks[:3]:
            for block in stage_blocks:
                x = block(x, cond)
        shape = x.shape
        return T.reshape(x, shape[:-2] + (shape[-2] * shape[-1],))


def build_backbone(plan: NetworkPlan, seed: int = 0, **kwargs) -> Backbone:
    """Deterministic construction: same plan and seed give identical bytes."""
    return Backbone(plan, init=Initializer(seed), **kwargs)
