"""BERT-style caption encoder with a weight-tied masked-language-model head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import LayerNorm, Module, ModuleList, TransformerBlock, block_parameter_count, trunc_normal
from .numcore import ShapeError, Tensor, log_softmax
from .numcore.tensor import DEFAULT_DTYPE
from .tokenizer import IGNORE_INDEX, PAD, DataError, MaskedBatch


@dataclass(frozen=True)
class TextConfig:
    vocab_size: int
    width: int = 128
    depth: int = 2
    heads: int = 2
    mlp_ratio: float = 4.0
    max_positions: int = 64

    def __post_init__(self):
        if self.width % self.heads:
            raise ShapeError(f"width {self.width} not divisible by heads {self.heads}")


def full_text_config(vocab_size: int) -> TextConfig:
    return TextConfig(vocab_size=vocab_size, width=768, depth=12, heads=12, mlp_ratio=4.0, max_positions=512)


def count_parameters(cfg: TextConfig) -> int:
    d = cfg.width
    embeddings = cfg.vocab_size * d + cfg.max_positions * d
    return embeddings + cfg.depth * block_parameter_count(d, cfg.mlp_ratio) + 2 * d + cfg.vocab_size


@dataclass
class TextEncoding:
    cls_embedding: Tensor
    token_embeddings: Tensor


class TextEncoder(Module):
    def __init__(self, cfg: TextConfig, rng: np.random.Generator | None = None, dtype=DEFAULT_DTYPE):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        d = cfg.width
        self.param("tok_embed", trunc_normal(rng, (cfg.vocab_size, d), dtype=dtype))
        self.param("pos_embed", trunc_normal(rng, (cfg.max_positions, d), dtype=dtype))
        self.blocks = ModuleList(TransformerBlock(d, cfg.heads, cfg.mlp_ratio, rng, dtype) for _ in range(cfg.depth))
        self.norm = LayerNorm(d, dtype)
        self.param("mlm_bias", np.zeros(cfg.vocab_size, dtype=dtype))

    @property
    def embedding_table(self) -> Tensor:
        """The vocabulary rows that generation scores against."""
        return self.tok_embed

    def __call__(self, ids) -> TextEncoding:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        length = ids.shape[1]
        if length > self.cfg.max_positions:
            raise ShapeError(f"sequence length {length} exceeds max_positions {self.cfg.max_positions}")
        pad = ids == PAD
        x = self.tok_embed[ids] + self.pos_embed[:length]
        for block in self.blocks:
            x = block(x, pad)
        x = self.norm(x)
        return TextEncoding(cls_embedding=x[:, 0], token_embeddings=x)

    def mlm_logits(self, token_embeddings: Tensor) -> Tensor:
        return token_embeddings @ self.tok_embed.swapaxes(0, 1) + self.mlm_bias

    def mlm_loss(self, batch: MaskedBatch) -> Tensor:
        logits = self.mlm_logits(self(batch.input_ids).token_embeddings)
        return masked_cross_entropy(logits, batch.labels)


def masked_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over positions whose label is not ``IGNORE_INDEX``."""
    labels = np.asarray(labels)
    rows = np.nonzero(labels != IGNORE_INDEX)
    if len(rows[0]) == 0:
        raise DataError("no labeled positions in the batch")
    logp = log_softmax(logits, axis=-1)
    picked = logp[rows + (labels[rows],)]
    return -picked.mean()
