"""Answer classifier: backbone features + question encoding + attention head.

The head scores each feature-map location against the question encoding
(single-glimpse multiplicative attention), pools the features under the
resulting softmax, fuses the pooled vector with a projection of the
question encoding by elementwise product, and classifies with a two-layer
net over the closed answer set.

``count_parameters`` reports exact integer counts for an instantiated
model; the ``analytic_*`` helpers compute the same closed forms for
named large geometries (resnet34/resnet152 stage shapes) without
allocating any weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import sa_param_count
from .encoder import QuestionEncoder
from .modulation import modulation_param_count
from .nn import Initializer, Linear, Module, Parameter
from .resnet import Backbone, NetworkPlan, PlanError
from .tensor import Tensor


class TopDownHead(Module):
    """Question-guided pooling over locations plus a two-layer classifier."""

    def __init__(
        self,
        channels: int,
        h_dim: int,
        n_answers: int,
        *,
        attn_hidden: int = 64,
        cls_hidden: int = 64,
        init: Initializer,
        scope: str = "head",
    ):
        super().__init__()
        self.channels = channels
        self.feat_proj = Parameter(init.he_uniform(scope + ".feat_proj", (attn_hidden, channels), fan_in=channels))
        self.quest_proj = Linear(h_dim, attn_hidden, bias=False, init=init, scope=scope + ".quest_proj")
        self.score_w = Parameter(init.he_uniform(scope + ".score_w", (1, attn_hidden), fan_in=attn_hidden))
        self.fuse_proj = Linear(h_dim, channels, init=init, scope=scope + ".fuse_proj")
        self.cls1 = Linear(channels, cls_hidden, init=init, scope=scope + ".cls1")
        self.cls2 = Linear(cls_hidden, n_answers, init=init, scope=scope + ".cls2")

    def forward(self, features: Tensor, h: Tensor) -> Tensor:
        """features (B, C, N) and h (B, h_dim) to answer logits (B, K)."""
        bsz, _, n_loc = features.shape
        proj_f = T.matmul(self.feat_proj, features)  # (B, A, N)
        proj_q = self.quest_proj(h)  # (B, A)
        joint = T.relu(T.mul(proj_f, T.reshape(proj_q, (bsz, -1, 1))))
        scores = T.reshape(T.matmul(self.score_w, joint), (bsz, n_loc))
        att = T.softmax(scores, axis=1)
        pooled = T.reshape(T.matmul(features, T.reshape(att, (bsz, n_loc, 1))), (bsz, self.channels))
        fused = T.mul(pooled, self.fuse_proj(h))
        return self.cls2(T.relu(self.cls1(fused)))


class VqaModel(Module):
    """Backbone + question encoder + answering head over a closed answer set."""

    def __init__(
        self,
        plan: NetworkPlan,
        vocab_size: int,
        answers: tuple[str, ...],
        *,
        seed: int = 0,
        h_dim: int = 64,
        embed_dim: int = 32,
        cell: str = "gated",
        attn_hidden: int = 64,
        cls_hidden: int = 64,
        c_bar_ratio: int = 8,
        proj_dim: int | None = None,
        gamma_squash: str = "none",
    ):
        super().__init__()
        plan.validate()
        init = Initializer(seed)
        self.plan = plan
        self.answers = tuple(answers)
        self.h_dim = h_dim
        self.backbone = Backbone(
            plan,
            init=init,
            c_bar_ratio=c_bar_ratio,
            h_dim=h_dim,
            proj_dim=proj_dim,
            gamma_squash=gamma_squash,
        )
        self.encoder = QuestionEncoder(
            vocab_size, embed_dim, h_dim, cell=cell, init=init, scope="encoder"
        )
        feat_channels = plan.stages[2].width
        self.head = TopDownHead(
            feat_channels,
            h_dim,
            len(answers),
            attn_hidden=attn_hidden,
            cls_hidden=cls_hidden,
            init=init,
            scope="head",
        )

    def forward(self, images, tokens) -> Tensor:
        """images (B, 3, H, W) array/Tensor + token ids (B, L) to logits."""
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images, dtype=np.float64))
        h = self.encoder(tokens)
        features = self.backbone.features(images, cond=h)
        return self.head(features, h)

    def predict(self, image, tokens) -> str:
        """Answer string for one sample; ties break to the lowest index."""
        image = np.asarray(image, dtype=np.float64)
        tokens = np.asarray(tokens, dtype=np.int64)
        with T.no_grad():
            logits = self.forward(image[None], tokens[None])
        return self.answers[int(np.argmax(logits.data[0]))]

    def capture_attention(self, on: bool = True):
        for _, _, sa, _ in self.backbone.attention_sites():
            sa.capture = on


# ----------------------------------------------------------------------
# parameter accounting


def _bucket(name: str) -> str:
    if ".sa_mod." in name or name.endswith(".sa_mod.w"):
        return "modulation"
    if ".sa." in name:
        return "sa_gate" if name.endswith(".gamma") else "sa"
    if name.startswith("backbone."):
        return "backbone"
    if name.startswith("encoder."):
        return "encoder"
    if name.startswith("head."):
        return "head"
    return "other"


def parameter_buckets(model: Module) -> dict[str, int]:
    """Exact parameter counts partitioned by component."""
    buckets: dict[str, int] = {}
    for name, p in model.named_parameters():
        b = _bucket(name)
        buckets[b] = buckets.get(b, 0) + p.size
    return buckets


def count_parameters(model: Module, which: str = "all") -> int:
    """``all`` counts everything; ``sa_only`` counts attention projection
    weights (gate scalars excluded, matching how such counts are usually
    reported); ``modulation_only`` counts modulator weights."""
    buckets = parameter_buckets(model)
    if which == "all":
        return sum(buckets.values())
    if which == "sa_only":
        return buckets.get("sa", 0)
    if which == "modulation_only":
        return buckets.get("modulation", 0)
    raise ValueError(f"unknown parameter filter {which!r}")


@dataclass(frozen=True)
class ArchGeometry:
    """Stage widths/blocks of a named architecture, for analytic counts."""

    name: str
    stage_widths: tuple[int, ...]
    stage_blocks: tuple[int, ...]


ARCHS = {
    "resnet34": ArchGeometry("resnet34", (64, 128, 256, 512), (3, 4, 6, 3)),
    "resnet152": ArchGeometry("resnet152", (256, 512, 1024, 2048), (3, 8, 36, 3)),
}


def _check_placements(widths, blocks, placements):
    for stage, block in placements:
        if not 1 <= stage <= len(widths):
            raise PlanError(f"placement (S:{stage}, B:{block}) names a missing stage")
        if not 1 <= block <= blocks[stage - 1]:
            raise PlanError(f"placement (S:{stage}, B:{block}) names a missing block")


def analytic_sa_count(widths, blocks, placements, c_bar_ratio: int = 8) -> int:
    """Attention parameter total for placements on a (widths, blocks) geometry."""
    _check_placements(widths, blocks, placements)
    total = 0
    for stage, _ in placements:
        c = widths[stage - 1]
        total += sa_param_count(c, max(1, c // c_bar_ratio))
    return total


def analytic_modulation_count(kind, widths, blocks, placements, h_dim, proj_dim=None) -> int:
    """Modulator parameter total for the same placements."""
    if kind == "none":
        return 0
    _check_placements(widths, blocks, placements)
    total = 0
    for stage, _ in placements:
        c = widths[stage - 1]
        d = proj_dim if proj_dim else c
        total += modulation_param_count(kind, c, h_dim, d)
    return total
