"""The assembled captioner: vision encoder, text encoder and LSTM decoder."""

from __future__ import annotations

import numpy as np

from .alignment import DEFAULT_EXCLUDED, TokenScorer
from .config import ModelConfig
from .decoder import Decoder
from .layers import Module, load_parameters
from .numcore import Tensor, no_grad
from .text import TextEncoder
from .tokenizer import CLS, Vocabulary, decode
from .vision import VisionEncoder


class CaptionModel(Module):
    def __init__(self, cfg: ModelConfig, vocab: Vocabulary, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        self.vision = VisionEncoder(cfg.vision(), np.random.default_rng([seed, 10]))
        self.text = TextEncoder(cfg.text(len(vocab)), np.random.default_rng([seed, 11]))
        self.decoder = Decoder(cfg.decoder(), np.random.default_rng([seed, 12]))
        self._scorer: TokenScorer | None = None

    def image_condition(self, images) -> Tensor:
        enc = self.vision(images)
        return enc.cls_embedding if self.cfg.conditioning == "cls" else enc.pooled()

    def token_scorer(self) -> TokenScorer:
        if self._scorer is None:
            self._scorer = TokenScorer(self.text.embedding_table, DEFAULT_EXCLUDED)
        return self._scorer

    def next_input(self, tokens: list[int]) -> Tensor:
        """Decoder input following the generated ``tokens``."""
        if self.cfg.decoder_inputs in ("table", "full"):
            return Tensor(self.text.embedding_table.data[[tokens[-1]]])
        ids = np.array([[CLS] + tokens[-(self.cfg.max_len - 1):]], dtype=np.int64)
        with no_grad():
            return self.text(ids).token_embeddings[:, -1]

    def caption(self, image, policy=None, rng=None) -> str:
        from .alignment import DecodePolicy, generate
        return decode(generate(image, self, policy or DecodePolicy(), rng), self.vocab)

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {name: p.data for name, p in self.named_parameters().items()}
        arrays.update(self.decoder.named_buffers("decoder."))
        return arrays

    def load_arrays(self, arrays: dict[str, np.ndarray], prefixes=("vision.", "text.", "decoder.")) -> None:
        for prefix in prefixes:
            load_parameters(getattr(self, prefix.rstrip(".")), arrays, prefix)
        if "decoder." in prefixes:
            self.decoder.load_buffers(arrays, "decoder.")
