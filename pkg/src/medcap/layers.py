"""Parameter containers and the transformer building blocks shared by both encoders."""

from __future__ import annotations

import math

import numpy as np

from .numcore import Tensor, gelu, layer_norm, softmax, where
from .numcore.tensor import DEFAULT_DTYPE

MASK_VALUE = -1e9


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Normal samples truncated at two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


class Module:
    """Holds named parameters and child modules in registration order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True)
        setattr(self, name, t)
        return t

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, p in self._params.items():
            out[prefix + name] = p
        for name, child in self._children.items():
            out.update(child.named_parameters(f"{prefix}{name}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag


class ModuleList(Module):
    def __init__(self, modules):
        super().__init__()
        self._items = []
        for i, m in enumerate(modules):
            setattr(self, str(i), m)
            self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Linear(Module):
    """``x @ w + b`` with ``w`` stored as (in, out)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, std: float = 0.02,
                 bias: bool = True, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.param("w", trunc_normal(rng, (n_in, n_out), std, dtype))
        if bias:
            self.param("b", np.zeros(n_out, dtype=dtype))
        else:
            self.b = None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.w
        return y + self.b if self.b is not None else y


class LayerNorm(Module):
    def __init__(self, width: int, dtype=DEFAULT_DTYPE, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.param("g", np.ones(width, dtype=dtype))
        self.param("b", np.zeros(width, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.g, self.b, self.eps)


class SelfAttention(Module):
    def __init__(self, width: int, heads: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        if width % heads:
            raise ValueError(f"width {width} not divisible by heads {heads}")
        self.heads = heads
        self.qkv = Linear(width, 3 * width, rng, dtype=dtype)
        self.proj = Linear(width, width, rng, dtype=dtype)
        self.last_weights: np.ndarray | None = None

    def __call__(self, x: Tensor, key_padding_mask: np.ndarray | None = None) -> Tensor:
        """``x`` is (B, T, d); ``key_padding_mask`` is (B, T), true where a key is padding."""
        b, t, d = x.shape
        h = self.heads
        dh = d // h
        qkv = self.qkv(x).reshape(b, t, 3, h, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
        if key_padding_mask is not None:
            scores = where(key_padding_mask[:, None, None, :], MASK_VALUE, scores)
        weights = softmax(scores, axis=-1)
        self.last_weights = weights.data
        out = (weights @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
        return self.proj(out)


class MLP(Module):
    def __init__(self, width: int, hidden: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.fc1 = Linear(width, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, width, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm block: ``x + attn(ln(x))`` then ``x + mlp(ln(x))``."""

    def __init__(self, width: int, heads: int, mlp_ratio: float, rng: np.random.Generator,
                 dtype=DEFAULT_DTYPE):
        super().__init__()
        self.ln1 = LayerNorm(width, dtype)
        self.attn = SelfAttention(width, heads, rng, dtype)
        self.ln2 = LayerNorm(width, dtype)
        self.mlp = MLP(width, int(width * mlp_ratio), rng, dtype)

    def __call__(self, x: Tensor, key_padding_mask: np.ndarray | None = None) -> Tensor:
        x = x + self.attn(self.ln1(x), key_padding_mask)
        return x + self.mlp(self.ln2(x))


def block_parameter_count(width: int, mlp_ratio: float) -> int:
    hidden = int(width * mlp_ratio)
    norms = 2 * 2 * width
    attn = width * 3 * width + 3 * width + width * width + width
    mlp = width * hidden + hidden + hidden * width + width
    return norms + attn + mlp


def load_parameters(module: Module, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    """Copy ``arrays`` into ``module``'s parameters; every name must be present."""
    for name, p in module.named_parameters(prefix).items():
        if name not in arrays:
            raise KeyError(name)
        arr = np.asarray(arrays[name])
        if arr.shape != p.shape:
            raise ValueError(f"{name}: shape {arr.shape} does not match {p.shape}")
        p.data = arr.astype(p.dtype).copy()
