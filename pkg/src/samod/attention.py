"""Location-pair self-attention over flattened feature maps.

Input is a (channels, locations) view of a feature map, optionally with a
leading batch dimension; each example's slice is mapped independently.
Index convention, fixed once here and asserted by the tests:

* ``scores[i, j]`` is the affinity between key location i and query
  (output) location j
* ``weights`` shares that layout and is normalized over the key axis, so
  each *column* j is output-j's distribution over attended locations

The layer's residual gate starts at exactly zero, making a fresh layer a
bitwise identity map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Initializer, Module, Parameter
from .tensor import ShapeError, Tensor


@dataclass
class AttentionMaps:
    """Raw affinities and their normalized form for one forward pass."""

    scores: Tensor  # (..., N, N), [key location, query location]
    weights: Tensor  # same layout, each column sums to 1


def sa_param_count(channels: int, reduced: int) -> int:
    """Weight-matrix parameter count of one attention module.

    Two (channels x reduced) projections plus one (channels x channels)
    value map, no biases; the scalar residual gate is excluded so counts
    line up with the usual reported numbers.
    """
    if channels <= 0 or reduced <= 0:
        raise ValueError(f"channel counts must be positive, got {channels}, {reduced}")
    if reduced > channels:
        raise ValueError(f"reduced width {reduced} exceeds channels {channels}")
    return 2 * channels * reduced + channels * channels


class SelfAttention(Module):
    """Content-based mixing of feature-map locations behind a zero gate."""

    def __init__(self, channels: int, reduced: int | None = None, *, init: Initializer, scope: str):
        super().__init__()
        self.channels = channels
        self.reduced = reduced if reduced is not None else max(1, channels // 8)
        if not 1 <= self.reduced <= channels:
            raise ValueError(f"reduced width {self.reduced} out of range for {channels} channels")
        self.key_w = Parameter(init.he_uniform(scope + ".key_w", (channels, self.reduced), fan_in=channels))
        self.query_w = Parameter(
            init.he_uniform(scope + ".query_w", (channels, self.reduced), fan_in=channels)
        )
        self.value_w = Parameter(init.he_uniform(scope + ".value_w", (channels, channels), fan_in=channels))
        # Residual gate; zero at init so the layer starts as an exact identity.
        self.gamma = Parameter(np.zeros(()))
        self.capture = False
        self.last_scores = None
        self.last_weights = None

    def _check_input(self, x: Tensor):
        if x.ndim < 2:
            raise ShapeError(f"attention input must be (channels, locations)[+batch], got {x.shape}")
        if x.shape[-2] != self.channels:
            raise ShapeError(
                f"attention input has {x.shape[-2]} channels, layer expects {self.channels}"
            )

    def attention_maps(self, x: Tensor) -> AttentionMaps:
        """Affinity scores and normalized weights for input ``x``."""
        self._check_input(x)
        keys = T.matmul(T.transpose(self.key_w), x)  # (..., reduced, N)
        queries = T.matmul(T.transpose(self.query_w), x)
        scores = T.matmul(T.swap_last2(keys), queries)  # (..., N, N)
        weights = T.softmax(scores, axis=-2)  # normalize over key locations
        if self.capture:
            self.last_scores = scores.data.copy()
            self.last_weights = weights.data.copy()
        return AttentionMaps(scores=scores, weights=weights)

    def mix_values(self, x: Tensor, maps: AttentionMaps) -> Tensor:
        """Weight-averaged value projections: column j mixes values by
        maps.weights[:, j]."""
        self._check_input(x)
        if maps.weights.shape[-1] != x.shape[-1]:
            raise ShapeError(
                f"attention weights cover {maps.weights.shape[-1]} locations, input has {x.shape[-1]}"
            )
        values = T.matmul(T.transpose(self.value_w), x)  # (..., C, N)
        return T.matmul(values, maps.weights)

    def forward(self, x: Tensor) -> Tensor:
        """gate * mixed + x; an exact identity while the gate is zero."""
        maps = self.attention_maps(x)
        mixed = self.mix_values(x, maps)
        return T.add(T.mul(self.gamma, mixed), x)

    def weight_param_count(self) -> int:
        return self.key_w.size + self.query_w.size + self.value_w.size
