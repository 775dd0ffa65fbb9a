"""Question-conditioned control of the self-attention path.

Two mechanisms, both driven by the question encoding vector ``h``:

* gate modulation: a per-example scalar ``W_h^T h`` (optionally squashed
  through a sigmoid) replaces the layer's shared residual gate
* location modulation: a softmax over the N feature locations, scored as
  ``(W_q^T x_i) . (W_p^T h)``, rescales each column of the attention
  output before the gated residual add

``W_h`` starts at zero so the gate-modulated path is inactive at init with
no squash, and sits at exactly 0.5 with a sigmoid squash. The location
modulator's projections are randomly initialized: with both at zero its
score gradients would vanish identically.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import SelfAttention
from .nn import Initializer, Module, Parameter
from .tensor import ShapeError, Tensor

SQUASH_MODES = ("none", "sigmoid")


def modulation_param_count(kind: str, channels: int, h_dim: int, proj_dim: int = 0) -> int:
    """Parameter count of one modulator (no biases anywhere).

    ``gamma`` needs only the h_dim gate vector; ``beta`` needs the two
    projections into the shared proj_dim space.
    """
    if kind == "gamma":
        if h_dim <= 0:
            raise ValueError(f"h_dim must be positive, got {h_dim}")
        return h_dim
    if kind == "beta":
        if h_dim <= 0 or channels <= 0 or proj_dim <= 0:
            raise ValueError(
                f"beta modulator needs positive dims, got channels={channels}, "
                f"h_dim={h_dim}, proj_dim={proj_dim}"
            )
        return proj_dim * (h_dim + channels)
    raise ValueError(f"unknown modulation kind {kind!r}")


class GammaModulator(Module):
    """Per-example residual gate computed linearly from the question vector."""

    def __init__(self, h_dim: int, *, squash: str = "none", scope: str = ""):
        super().__init__()
        if squash not in SQUASH_MODES:
            raise ValueError(f"squash must be one of {SQUASH_MODES}, got {squash!r}")
        self.h_dim = h_dim
        self.squash = squash
        self.w = Parameter(np.zeros((h_dim, 1)))
        self.last_gamma = None  # np copy of the most recent per-example gates

    def gate_values(self, h: Tensor) -> Tensor:
        """Per-example gate: squash(h @ w), shape (..., 1)."""
        if h.shape[-1] != self.h_dim:
            raise ShapeError(f"question encoding has dim {h.shape[-1]}, modulator expects {self.h_dim}")
        hh = T.reshape(h, (1, -1)) if h.ndim == 1 else h
        g = T.matmul(hh, self.w)  # (B, 1)
        if self.squash == "sigmoid":
            g = T.sigmoid(g)
        if h.ndim == 1:
            g = T.reshape(g, (1,))
        self.last_gamma = g.data.copy()
        return g

    def forward(self, h: Tensor, mixed: Tensor, x: Tensor) -> Tensor:
        """gate(h) * mixed + x, with one gate per leading-batch example."""
        g = self.gate_values(h)
        if h.ndim == 1:
            g = T.reshape(g, (1, 1))  # scalar gate over a single (C, N) map
        else:
            if g.shape[0] != mixed.shape[0]:
                raise ShapeError(
                    f"{g.shape[0]} gates for attention output batch {mixed.shape}"
                )
            g = T.reshape(g, (g.shape[0], 1, 1))
        return T.add(T.mul(g, mixed), x)


class BetaModulator(Module):
    """Question-driven probability weights over the N feature locations."""

    def __init__(self, channels: int, h_dim: int, proj_dim: int | None = None, *, init: Initializer, scope: str):
        super().__init__()
        self.channels = channels
        self.h_dim = h_dim
        self.proj_dim = proj_dim if proj_dim else channels
        if self.proj_dim <= 0:
            raise ValueError(f"proj_dim must be positive, got {self.proj_dim}")
        self.p_w = Parameter(init.he_uniform(scope + ".p_w", (h_dim, self.proj_dim), fan_in=h_dim))
        self.q_w = Parameter(init.he_uniform(scope + ".q_w", (channels, self.proj_dim), fan_in=channels))
        self.last_weights = None

    def location_weights(self, h: Tensor, x: Tensor) -> Tensor:
        """Softmax over locations of (W_q^T x_i) . (W_p^T h); shape (..., N)."""
        if h.shape[-1] != self.h_dim:
            raise ShapeError(f"question encoding has dim {h.shape[-1]}, modulator expects {self.h_dim}")
        if x.shape[-2] != self.channels:
            raise ShapeError(f"features have {x.shape[-2]} channels, modulator expects {self.channels}")
        q = T.matmul(T.transpose(self.q_w), x)  # (..., D, N)
        p = T.matmul(h, self.p_w)  # (..., D)
        p_col = T.reshape(p, p.shape + (1,))  # (..., D, 1)
        scores = T.matmul(T.swap_last2(q), p_col)  # (..., N, 1)
        weights = T.softmax(scores, axis=-2)
        flat = T.reshape(weights, weights.shape[:-1])  # (..., N)
        self.last_weights = flat.data.copy()
        return flat

    def reweight(self, mixed: Tensor, weights: Tensor) -> Tensor:
        """Scale column j of the attention output by weights[..., j]."""
        if weights.shape[-1] != mixed.shape[-1]:
            raise ShapeError(
                f"{weights.shape[-1]} location weights for {mixed.shape[-1]} locations"
            )
        row = T.reshape(weights, weights.shape[:-1] + (1,) + weights.shape[-1:])
        return T.mul(mixed, row)


def modulated_sa_forward(layer: SelfAttention, mod: BetaModulator, h: Tensor, x: Tensor) -> Tensor:
    """Attention forward with location re-weighting before the gated add."""
    maps = layer.attention_maps(x)
    mixed = layer.mix_values(x, maps)
    weights = mod.location_weights(h, x)
    reweighted = mod.reweight(mixed, weights)
    return T.add(T.mul(layer.gamma, reweighted), x)
