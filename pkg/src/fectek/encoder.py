"""Contextual encoder: a small post-norm transformer over token embeddings.

One tower serves queries and passages alike (Siamese use is the caller's
concern).  Each sequence is processed at its natural length; trailing [PAD]
positions, when present, are masked out of attention columns so no real row
ever attends to padding.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ShapeError
from .tokenizer import PAD_ID

INIT_STD = 0.02
LAYER_NORM_EPS = 1e-5
# Additive attention bias for padded columns; exp() underflows to exactly 0.
MASK_BIAS = -1e30


@dataclass(frozen=True)
class EncoderConfig:
    """Shape of the encoder stack and the two truncation lengths."""

    dim: int = 64
    layers: int = 2
    heads: int = 2
    ffn_multiplier: int = 4
    max_query_len: int = 64
    max_passage_len: int = 192

    def __post_init__(self):
        if self.dim <= 0 or self.layers <= 0 or self.heads <= 0:
            raise ValueError("dim, layers and heads must be positive")
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.min_len < 3:
            raise ValueError("truncation lengths must be at least 3 (CLS + token + SEP)")
        if self.ffn_multiplier <= 0:
            raise ValueError("ffn_multiplier must be positive")

    @property
    def min_len(self) -> int:
        return min(self.max_query_len, self.max_passage_len)

    @property
    def max_len(self) -> int:
        """Size of the positional table."""
        return max(self.max_query_len, self.max_passage_len)

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


@dataclass
class EncodedSequence:
    """Output of one encoder forward pass.

    `hidden` has one row per input position, including any [PAD] rows;
    `real_mask` marks the positions that carry actual tokens.
    """

    token_ids: np.ndarray
    hidden: Tensor
    real_mask: np.ndarray
    attention: list[np.ndarray] | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.token_ids)


class ContextEncoder:
    """Token + position embeddings followed by `layers` transformer blocks."""

    def __init__(
        self,
        vocab_size: int,
        config: EncoderConfig | None = None,
        rng: int | np.random.Generator = 42,
    ):
        if vocab_size < 5:
            raise ValueError(f"vocab_size must cover the reserved ids, got {vocab_size}")
        self.config = config or EncoderConfig()
        self.vocab_size = vocab_size
        if isinstance(rng, np.random.Generator):
            self._rng = rng
        else:
            self._rng = np.random.default_rng(rng)
        self.params: dict[str, Tensor] = {}
        self._init_parameters()

    # Parameter creation order is fixed, so one seed pins every weight.
    def _normal(self, name: str, shape: tuple[int, ...]) -> None:
        self.params[name] = Tensor(
            self._rng.normal(0.0, INIT_STD, size=shape), requires_grad=True
        )

    def _zeros(self, name: str, shape: tuple[int, ...]) -> None:
        self.params[name] = Tensor(np.zeros(shape), requires_grad=True)

    def _ones(self, name: str, shape: tuple[int, ...]) -> None:
        self.params[name] = Tensor(np.ones(shape), requires_grad=True)

    def _init_parameters(self) -> None:
        cfg = self.config
        d = cfg.dim
        self._normal("embeddings.token", (self.vocab_size, d))
        self._normal("embeddings.position", (cfg.max_len, d))
        self._ones("embeddings.norm.gain", (d,))
        self._zeros("embeddings.norm.bias", (d,))
        hidden = d * cfg.ffn_multiplier
        for i in range(cfg.layers):
            for part in ("query", "key", "value", "output"):
                self._normal(f"layers.{i}.attn.{part}.weight", (d, d))
                self._zeros(f"layers.{i}.attn.{part}.bias", (d,))
            self._ones(f"layers.{i}.norm1.gain", (d,))
            self._zeros(f"layers.{i}.norm1.bias", (d,))
            self._normal(f"layers.{i}.ffn.expand.weight", (d, hidden))
            self._zeros(f"layers.{i}.ffn.expand.bias", (hidden,))
            self._normal(f"layers.{i}.ffn.contract.weight", (hidden, d))
            self._zeros(f"layers.{i}.ffn.contract.bias", (d,))
            self._ones(f"layers.{i}.norm2.gain", (d,))
            self._zeros(f"layers.{i}.norm2.bias", (d,))

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def forward(
        self, token_ids: Sequence[int], collect_attention: bool = False
    ) -> EncodedSequence:
        cfg = self.config
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ShapeError("forward expects a non-empty 1-d id sequence")
        n = int(ids.size)
        if n > cfg.max_len:
            raise ShapeError(
                f"sequence length {n} exceeds positional table size {cfg.max_len}"
            )
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise ShapeError(
                f"token id outside vocabulary of size {self.vocab_size}"
            )
        real = ids != PAD_ID
        p = self.params

        x = ag.add(
            ag.gather(p["embeddings.token"], ids),
            ag.gather(p["embeddings.position"], np.arange(n)),
        )
        x = ag.layer_norm(
            x, p["embeddings.norm.gain"], p["embeddings.norm.bias"], LAYER_NORM_EPS
        )

        # Padded columns get a huge negative bias; rows stay untouched, so
        # every row (real or pad) still softmaxes to a proper distribution.
        bias = np.where(real, 0.0, MASK_BIAS).reshape(1, 1, n)
        mask_bias = Tensor(bias)

        h = cfg.heads
        dh = cfg.head_dim
        scale = 1.0 / math.sqrt(dh)
        attentions: list[np.ndarray] | None = [] if collect_attention else None

        def split_heads(t: Tensor) -> Tensor:
            return ag.permute(ag.reshape(t, (n, h, dh)), (1, 0, 2))

        for i in range(cfg.layers):
            q = split_heads(
                ag.add(
                    ag.matmul(x, p[f"layers.{i}.attn.query.weight"]),
                    p[f"layers.{i}.attn.query.bias"],
                )
            )
            k = split_heads(
                ag.add(
                    ag.matmul(x, p[f"layers.{i}.attn.key.weight"]),
                    p[f"layers.{i}.attn.key.bias"],
                )
            )
            v = split_heads(
                ag.add(
                    ag.matmul(x, p[f"layers.{i}.attn.value.weight"]),
                    p[f"layers.{i}.attn.value.bias"],
                )
            )
            logits = ag.add(ag.mul(ag.matmul(q, ag.transpose_last_two(k)), scale), mask_bias)
            weights = ag.softmax(logits, axis=-1)
            if attentions is not None:
                attentions.append(weights.data.copy())
            ctx = ag.reshape(ag.permute(ag.matmul(weights, v), (1, 0, 2)), (n, cfg.dim))
            attended = ag.add(
                ag.matmul(ctx, p[f"layers.{i}.attn.output.weight"]),
                p[f"layers.{i}.attn.output.bias"],
            )
            x = ag.layer_norm(
                ag.add(x, attended),
                p[f"layers.{i}.norm1.gain"],
                p[f"layers.{i}.norm1.bias"],
                LAYER_NORM_EPS,
            )
            expanded = ag.relu(
                ag.add(
                    ag.matmul(x, p[f"layers.{i}.ffn.expand.weight"]),
                    p[f"layers.{i}.ffn.expand.bias"],
                )
            )
            contracted = ag.add(
                ag.matmul(expanded, p[f"layers.{i}.ffn.contract.weight"]),
                p[f"layers.{i}.ffn.contract.bias"],
            )
            x = ag.layer_norm(
                ag.add(x, contracted),
                p[f"layers.{i}.norm2.gain"],
                p[f"layers.{i}.norm2.bias"],
                LAYER_NORM_EPS,
            )

        return EncodedSequence(ids, x, real, attentions)
