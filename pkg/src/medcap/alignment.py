"""Hybrid cosine/MSE embedding loss, nearest-token lookup, and caption decoding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numcore import Tensor, as_tensor, no_grad, sqrt, tsum
from .tokenizer import CLS, PAD, SEP

DEFAULT_ALPHA = 0.7
DEFAULT_EXCLUDED = (PAD, CLS)


class DomainError(ValueError):
    """Cosine similarity is undefined for a zero vector."""


def cosine_similarity(a, b) -> Tensor:
    """Cosine over the last axis; differentiable, raises on zero-norm inputs."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"width mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    sq_a = tsum(a * a, axis=-1)
    sq_b = tsum(b * b, axis=-1)
    if np.any(sq_a.data == 0) or np.any(sq_b.data == 0):
        raise DomainError("cosine similarity of a zero vector")
    return tsum(a * b, axis=-1) / (sqrt(sq_a) * sqrt(sq_b))


def hybrid_loss(pred, target, alpha: float = DEFAULT_ALPHA, reduction: str = "mean") -> Tensor:
    """``alpha * (1 - cos) + (1 - alpha) * ||pred - target||^2`` over the last axis.

    ``reduction`` is ``"mean"`` (over leading axes), ``"sum"`` or ``"none"``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    pred, target = as_tensor(pred), as_tensor(target)
    diff = pred - target
    sq = tsum(diff * diff, axis=-1)
    if alpha == 0.0:
        per_item = sq
    else:
        per_item = (1.0 - cosine_similarity(pred, target)) * alpha
        if alpha < 1.0:
            per_item = per_item + sq * (1.0 - alpha)
    if reduction == "none" or per_item.ndim == 0:
        return per_item
    if reduction == "sum":
        return per_item.sum()
    return per_item.mean()


class TokenScorer:
    """Cosine scores of a query against every row of an embedding table.

    Row norms are computed once per table array; assigning a new array to
    the parameter (as the optimizer does) triggers renormalization.
    """

    def __init__(self, table: Tensor | np.ndarray, excluded: Sequence[int] = DEFAULT_EXCLUDED):
        self._source = table
        self.excluded = tuple(excluded)
        self._array = None
        self._unit = None
        self._refresh()

    def _current(self) -> np.ndarray:
        return self._source.data if isinstance(self._source, Tensor) else np.asarray(self._source)

    def _refresh(self) -> None:
        arr = self._current()
        if arr.ndim != 2 or arr.shape[0] == 0:
            raise ValueError("embedding table must be a non-empty (V, d) matrix")
        norms = np.linalg.norm(arr.astype(np.float64), axis=1)
        candidates = np.ones(arr.shape[0], dtype=bool)
        candidates[list(self.excluded)] = False
        if not candidates.any():
            raise ValueError("no candidate tokens remain after exclusions")
        if np.any(norms[candidates] == 0):
            raise DomainError("embedding table has a zero row among candidates")
        unit = arr / np.where(norms == 0, 1.0, norms)[:, None]
        self._array, self._unit, self._candidates = arr, unit, candidates

    def scores(self, query) -> np.ndarray:
        if self._current() is not self._array:
            self._refresh()
        q = np.asarray(query.data if isinstance(query, Tensor) else query, dtype=np.float64)
        norm = np.linalg.norm(q, axis=-1, keepdims=True)
        if np.any(norm == 0):
            raise DomainError("query embedding is the zero vector")
        s = (q / norm) @ self._unit.T
        return np.where(self._candidates, s, -np.inf)


def nearest_token(pred, table, excluded: Sequence[int] = ()) -> int:
    """Index of the table row most cosine-similar to ``pred``; ties go to the lowest id."""
    return int(np.argmax(TokenScorer(table, excluded).scores(pred)))


@dataclass(frozen=True)
class DecodePolicy:
    mode: str = "greedy"
    k: int = 5
    p: float = 0.9
    temperature: float = 1.0
    max_len: int = 64
    stop_token: int = SEP

    def __post_init__(self):
        if self.mode not in ("greedy", "top_k", "top_p"):
            raise ValueError(f"unknown decode mode {self.mode!r}")
        if self.mode == "top_k" and self.k < 1:
            raise ValueError("top_k needs k >= 1")
        if self.mode == "top_p" and not 0.0 < self.p <= 1.0:
            raise ValueError("top_p needs p in (0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.max_len < 1:
            raise ValueError("max_len must be at least 1")


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max())
    return z / z.sum()


def choose_token(scores: np.ndarray, policy: DecodePolicy, rng: np.random.Generator | None = None) -> int:
    """Pick a token from similarity scores (``-inf`` marks excluded ids)."""
    if policy.mode == "greedy":
        return int(np.argmax(scores))
    if rng is None:
        raise ValueError("sampling modes need an rng")
    valid = np.flatnonzero(np.isfinite(scores))
    # stable sort gives lowest id first among equal scores
    order = valid[np.argsort(-scores[valid], kind="stable")]
    logits = scores[order] / policy.temperature
    if policy.mode == "top_k":
        keep = order[: policy.k]
        probs = _softmax(logits[: policy.k])
    else:
        probs_all = _softmax(logits)
        cutoff = int(np.searchsorted(np.cumsum(probs_all), policy.p - 1e-12)) + 1
        keep = order[:cutoff]
        probs = probs_all[:cutoff] / probs_all[:cutoff].sum()
    return int(keep[rng.choice(len(keep), p=probs)])


def generate(image, model, policy: DecodePolicy = DecodePolicy(), rng: np.random.Generator | None = None) -> list[int]:
    """Caption token ids for one preprocessed (H, W, C) image.

    ``model`` is a :class:`medcap.pipeline.CaptionModel` (anything exposing
    ``image_condition``, ``decoder`` and ``text``).
    """
    table = model.text.embedding_table
    if table.shape[0] == 0:
        raise ValueError("empty vocabulary")
    scorer = model.token_scorer()
    out: list[int] = []
    with no_grad():
        state = model.decoder.init_state(model.image_condition(np.asarray(image)[None]))
        x = Tensor(table.data[[CLS]])
        for _ in range(policy.max_len):
            y, state = model.decoder.step(x, state, training=False)
            token = choose_token(scorer.scores(model.decoder.project(y))[0], policy, rng)
            out.append(token)
            if token == policy.stop_token:
                break
            x = model.next_input(out)
    return out
