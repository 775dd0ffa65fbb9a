"""Question tokenization and the recurrent encoder producing h_T.

Token id 0 is padding and id 1 is the unknown token. The encoder runs a
single recurrent layer over the embedded tokens and returns the hidden
state after the last non-pad position, so trailing padding never changes
the encoding. An all-pad sequence encodes to the zero vector.
"""

from __future__ import annotations

import re

import numpy as np

from . import tensor as T
from .nn import Initializer, Linear, Module, Parameter
from .tensor import Tensor

PAD_ID = 0
UNK_ID = 1

CELL_KINDS = ("gated", "vanilla")

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def split_tokens(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Token ids built deterministically from a corpus.

    Non-reserved tokens are ordered by descending frequency, ties broken
    lexicographically; ids 0 and 1 stay reserved for pad/unknown.
    """

    def __init__(self, tokens: list[str]):
        self.tokens = list(tokens)
        self._ids = {tok: i + 2 for i, tok in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            raise ValueError("vocabulary has duplicate tokens")

    @classmethod
    def from_corpus(cls, texts) -> "Vocabulary":
        freq: dict[str, int] = {}
        for text in texts:
            for tok in split_tokens(text):
                freq[tok] = freq.get(tok, 0) + 1
        ordered = sorted(freq, key=lambda t: (-freq[t], t))
        return cls(ordered)

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        if idx == PAD_ID:
            return "<pad>"
        if idx == UNK_ID:
            return "<unk>"
        return self.tokens[idx - 2]

    def __len__(self):
        return len(self.tokens) + 2

    def save(self, path: str):
        with open(path, "w") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        with open(path) as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])


def tokenize(text: str, vocab: Vocabulary, max_len: int = 12) -> np.ndarray:
    """Token ids truncated/padded to ``max_len`` (pad id 0, unknown id 1)."""
    ids = [vocab.id_of(tok) for tok in split_tokens(text)][:max_len]
    ids.extend([PAD_ID] * (max_len - len(ids)))
    return np.asarray(ids, dtype=np.int64)


def tokenize_batch(texts, vocab: Vocabulary, max_len: int = 12) -> np.ndarray:
    return np.stack([tokenize(t, vocab, max_len) for t in texts])


class QuestionEncoder(Module):
    """Embedding lookup plus a single recurrent layer; returns h_T."""

    def __init__(
        self,
        vocab_size: int,
        embed_dim: int = 32,
        hidden_dim: int = 64,
        *,
        cell: str = "gated",
        init: Initializer,
        scope: str = "encoder",
    ):
        super().__init__()
        if cell not in CELL_KINDS:
            raise ValueError(f"cell must be one of {CELL_KINDS}, got {cell!r}")
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.cell = cell
        self.embed = Parameter(init.uniform(scope + ".embed", (vocab_size, embed_dim), -0.1, 0.1))
        if cell == "gated":
            self.update_x = Linear(embed_dim, hidden_dim, init=init, scope=scope + ".update_x")
            self.update_h = Linear(hidden_dim, hidden_dim, bias=False, init=init, scope=scope + ".update_h")
            self.reset_x = Linear(embed_dim, hidden_dim, init=init, scope=scope + ".reset_x")
            self.reset_h = Linear(hidden_dim, hidden_dim, bias=False, init=init, scope=scope + ".reset_h")
            self.cand_x = Linear(embed_dim, hidden_dim, init=init, scope=scope + ".cand_x")
            self.cand_h = Linear(hidden_dim, hidden_dim, bias=False, init=init, scope=scope + ".cand_h")
        else:
            self.step_x = Linear(embed_dim, hidden_dim, init=init, scope=scope + ".step_x")
            self.step_h = Linear(hidden_dim, hidden_dim, bias=False, init=init, scope=scope + ".step_h")

    def forward(self, tokens: np.ndarray) -> Tensor:
        """Encode (batch, length) int token ids to (batch, hidden) h_T."""
        tokens = np.asarray(tokens, dtype=np.int64)
        single = tokens.ndim == 1
        if single:
            tokens = tokens[None]
        bsz, length = tokens.shape
        emb = T.embedding(self.embed, tokens)  # (B, L, E)
        h = Tensor(np.zeros((bsz, self.hidden_dim)))
        for t in range(length):
            x_t = emb[:, t, :]
            mask = Tensor((tokens[:, t] != PAD_ID).astype(np.float64)[:, None])
            h_new = self._step(x_t, h)
            # Hold the previous state wherever this position is padding.
            h = T.add(T.mul(mask, h_new), T.mul(Tensor(1.0) - mask, h))
        if single:
            h = T.reshape(h, (self.hidden_dim,))
        return h

    def _step(self, x_t: Tensor, h: Tensor) -> Tensor:
        if self.cell == "vanilla":
            return T.tanh(T.add(self.step_x(x_t), self.step_h(h)))
        z = T.sigmoid(T.add(self.update_x(x_t), self.update_h(h)))
        r = T.sigmoid(T.add(self.reset_x(x_t), self.reset_h(h)))
        cand = T.tanh(T.add(self.cand_x(x_t), self.cand_h(T.mul(r, h))))
        return T.add(T.mul(Tensor(1.0) - z, h), T.mul(z, cand))
