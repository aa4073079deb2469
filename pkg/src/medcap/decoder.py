"""Image-conditioned stacked LSTM decoder that emits caption-space embeddings."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .layers import Module, ModuleList
from .numcore import ShapeError, Tensor, concat, sigmoid, tanh
from .numcore.tensor import DEFAULT_DTYPE

GATES = ("i", "f", "g", "o")


@dataclass(frozen=True)
class DecoderConfig:
    input_size: int = 128
    hidden_size: int = 128
    num_layers: int = 2
    inter_layer_dropout: float = 0.1
    encoder_width: int = 64


FULL_DECODER = DecoderConfig(input_size=768, hidden_size=768, num_layers=2, inter_layer_dropout=0.1, encoder_width=384)


@dataclass
class DecoderState:
    h: list[Tensor]
    c: list[Tensor]


def _uniform(rng, shape, bound, dtype):
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class LSTMLayer(Module):
    """One LSTM layer; each gate owns a (input + hidden, hidden) weight and a bias."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        bound = 1.0 / math.sqrt(hidden)
        for gate in GATES:
            self.param(f"w_{gate}", _uniform(rng, (n_in + hidden, hidden), bound, dtype))
        for gate in GATES:
            if gate == "f":
                self.param("b_f", np.ones(hidden, dtype=dtype))
            else:
                self.param(f"b_{gate}", _uniform(rng, (hidden,), bound, dtype))

    def __call__(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        xh = concat([x, h], axis=-1)
        i = sigmoid(xh @ self.w_i + self.b_i)
        f = sigmoid(xh @ self.w_f + self.b_f)
        g = tanh(xh @ self.w_g + self.b_g)
        o = sigmoid(xh @ self.w_o + self.b_o)
        c_new = f * c + i * g
        h_new = o * tanh(c_new)
        return h_new, c_new


class Affine(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.param("w", _uniform(rng, (n_in, n_out), 1.0 / math.sqrt(n_in), dtype))
        self.param("b", np.zeros(n_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b


class Decoder(Module):
    def __init__(self, cfg: DecoderConfig = DecoderConfig(), rng: np.random.Generator | None = None,
                 dtype=DEFAULT_DTYPE):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.init_h = Affine(cfg.encoder_width, cfg.hidden_size, rng, dtype)
        self.init_c = Affine(cfg.encoder_width, cfg.hidden_size, rng, dtype)
        sizes = [cfg.input_size] + [cfg.hidden_size] * (cfg.num_layers - 1)
        self.lstm = ModuleList(LSTMLayer(n, cfg.hidden_size, rng, dtype) for n in sizes)
        self.proj = Affine(cfg.hidden_size, cfg.input_size, rng, dtype)
        # fixed standardization of the image embedding, identity until fitted;
        # plain arrays, so the optimizer never sees them
        self.cond_mean = np.zeros(cfg.encoder_width, dtype=dtype)
        self.cond_scale = np.ones(cfg.encoder_width, dtype=dtype)

    def fit_condition(self, embeddings: np.ndarray, eps: float = 1e-6) -> None:
        """Set the standardization from a sample of image embeddings (N, d)."""
        embeddings = np.asarray(embeddings, dtype=np.float64)
        if embeddings.ndim != 2 or embeddings.shape[1] != self.cfg.encoder_width:
            raise ShapeError(f"expected (N, {self.cfg.encoder_width}) embeddings, got {embeddings.shape}")
        dtype = self.cond_mean.dtype
        self.cond_mean = embeddings.mean(axis=0).astype(dtype)
        self.cond_scale = (1.0 / (embeddings.std(axis=0) + eps)).astype(dtype)

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + "cond_mean": self.cond_mean, prefix + "cond_scale": self.cond_scale}

    def load_buffers(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        for name in ("cond_mean", "cond_scale"):
            key = prefix + name
            if key not in arrays:
                raise KeyError(key)
            arr = np.asarray(arrays[key])
            if arr.shape != (self.cfg.encoder_width,):
                raise ValueError(f"{key}: shape {arr.shape} does not match ({self.cfg.encoder_width},)")
            setattr(self, name, arr.astype(self.cond_mean.dtype).copy())

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        # layers are named l1, l2, ... in checkpoints
        out = {}
        for name, p in super().named_parameters(prefix).items():
            head, _, rest = name.partition(prefix + "lstm.")
            if not head and rest:
                idx, _, tail = rest.partition(".")
                name = f"{prefix}lstm.l{int(idx) + 1}.{tail}"
            out[name] = p
        return out

    def init_state(self, image_embedding: Tensor) -> DecoderState:
        if image_embedding.shape[-1] != self.cfg.encoder_width:
            raise ShapeError(
                f"image embedding width {image_embedding.shape[-1]} != encoder_width {self.cfg.encoder_width}"
            )
        z = (image_embedding - self.cond_mean) * self.cond_scale
        h0 = self.init_h(z)
        c0 = self.init_c(z)
        return DecoderState(h=[h0] * self.cfg.num_layers, c=[c0] * self.cfg.num_layers)

    def step(self, x: Tensor, state: DecoderState, training: bool = False,
             rng: np.random.Generator | None = None) -> tuple[Tensor, DecoderState]:
        if x.shape[-1] != self.cfg.input_size:
            raise ShapeError(f"input width {x.shape[-1]} != input_size {self.cfg.input_size}")
        hs, cs = [], []
        inp = x
        rate = self.cfg.inter_layer_dropout
        for k, layer in enumerate(self.lstm):
            h, c = layer(inp, state.h[k], state.c[k])
            hs.append(h)
            cs.append(c)
            inp = h
            if training and rate > 0 and k < len(self.lstm) - 1:
                if rng is None:
                    raise ValueError("training-mode dropout needs an rng")
                keep = (rng.random(h.shape) >= rate).astype(h.dtype) / (1.0 - rate)
                inp = h * keep
        return hs[-1], DecoderState(hs, cs)

    def project(self, y: Tensor) -> Tensor:
        return self.proj(y)

    def teacher_forced(self, inputs: Tensor, state: DecoderState, training: bool = False,
                       rng: np.random.Generator | None = None) -> list[Tensor]:
        """Run one step per position of ``inputs`` (B, L, d); returns L projected outputs."""
        outputs = []
        for t in range(inputs.shape[1]):
            y, state = self.step(inputs[:, t], state, training, rng)
            outputs.append(self.project(y))
        return outputs
