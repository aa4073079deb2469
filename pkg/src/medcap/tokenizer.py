"""Domain WordPiece: vocabulary training, encode/decode, and MLM masking."""

from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
IGNORE_INDEX = -100
CONTINUATION = "##"


class ConfigurationError(ValueError):
    pass


class DataError(ValueError):
    pass


def _is_punctuation(ch: str) -> bool:
    cp = ord(ch)
    if 33 <= cp <= 47 or 58 <= cp <= 64 or 91 <= cp <= 96 or 123 <= cp <= 126:
        return True
    return unicodedata.category(ch).startswith("P")


def pre_tokenize(text: str) -> list[str]:
    """Lowercase, NFC-normalize, split on whitespace and isolate punctuation."""
    text = unicodedata.normalize("NFC", text).lower()
    words: list[str] = []
    for chunk in text.split():
        current = []
        for ch in chunk:
            if _is_punctuation(ch):
                if current:
                    words.append("".join(current))
                    current = []
                words.append(ch)
            else:
                current.append(ch)
        if current:
            words.append("".join(current))
    return words


def normalize(text: str) -> str:
    return " ".join(pre_tokenize(text))


class Vocabulary:
    """Bijective token/id map with the five special tokens at ids 0-4."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ConfigurationError("vocabulary must start with " + ", ".join(SPECIAL_TOKENS))
        if len(set(tokens)) != len(tokens):
            raise ConfigurationError("vocabulary contains duplicate tokens")
        self.id_to_token = tokens
        self.token_to_id = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def to_bytes(self) -> bytes:
        return ("\n".join(self.id_to_token) + "\n").encode("utf-8")

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def _split_word(word: str) -> tuple[str, ...]:
    return (word[0],) + tuple(CONTINUATION + ch for ch in word[1:])


def _merge_name(a: str, b: str) -> str:
    return a + (b[len(CONTINUATION):] if b.startswith(CONTINUATION) else b)


def train_wordpiece(corpus: Iterable[str], vocab_size: int = 4096, min_frequency: int = 2) -> Vocabulary:
    """Grow a WordPiece vocabulary by likelihood-scored merges.

    A pair ``(a, b)`` scores ``count(ab) / (count(a) * count(b))``. The best
    pair with at least ``min_frequency`` occurrences is merged each round;
    ties go to the lexicographically smallest pair. Training stops at
    ``vocab_size`` tokens or when no pair qualifies.
    """
    word_counts: Counter[str] = Counter()
    for line in corpus:
        word_counts.update(pre_tokenize(line))
    if not word_counts:
        raise DataError("cannot train a vocabulary on an empty corpus")

    words = {w: _split_word(w) for w in sorted(word_counts)}
    alphabet = sorted({piece for pieces in words.values() for piece in pieces})
    if vocab_size < len(SPECIAL_TOKENS) + len(alphabet):
        raise ConfigurationError(
            f"vocab_size {vocab_size} is below specials + alphabet ({len(SPECIAL_TOKENS) + len(alphabet)})"
        )
    tokens = list(SPECIAL_TOKENS) + alphabet
    known = set(tokens)

    while len(tokens) < vocab_size:
        unit_counts: Counter[str] = Counter()
        pair_counts: Counter[tuple[str, str]] = Counter()
        for word, pieces in words.items():
            c = word_counts[word]
            for piece in pieces:
                unit_counts[piece] += c
            for pair in zip(pieces, pieces[1:]):
                pair_counts[pair] += c
        best = None
        best_score = -1.0
        for pair in sorted(pair_counts):
            freq = pair_counts[pair]
            if freq < min_frequency:
                continue
            score = freq / (unit_counts[pair[0]] * unit_counts[pair[1]])
            if score > best_score:
                best, best_score = pair, score
        if best is None:
            break
        merged = _merge_name(*best)
        for word, pieces in words.items():
            if len(pieces) < 2:
                continue
            out = []
            i = 0
            while i < len(pieces):
                if i + 1 < len(pieces) and (pieces[i], pieces[i + 1]) == best:
                    out.append(merged)
                    i += 2
                else:
                    out.append(pieces[i])
                    i += 1
            words[word] = tuple(out)
        if merged not in known:
            known.add(merged)
            tokens.append(merged)
    return Vocabulary(tokens)


def tokenize_word(word: str, vocab: Vocabulary, max_chars: int = 100) -> list[int]:
    """Greedy longest-match-first split; an unsplittable word becomes one [UNK]."""
    if len(word) > max_chars:
        return [UNK]
    ids = []
    start = 0
    while start < len(word):
        end = len(word)
        found = None
        while start < end:
            piece = word[start:end] if start == 0 else CONTINUATION + word[start:end]
            if piece in vocab.token_to_id:
                found = vocab.token_to_id[piece]
                break
            end -= 1
        if found is None:
            return [UNK]
        ids.append(found)
        start = end
    return ids


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    ids: list[int] = []
    for word in pre_tokenize(text):
        ids.extend(tokenize_word(word, vocab))
    return ids


def encode(text: str, vocab: Vocabulary, max_len: int = 64) -> np.ndarray:
    """``[CLS] pieces... [SEP]`` truncated and right-padded to ``max_len``."""
    if max_len < 2:
        raise ConfigurationError("max_len must be at least 2")
    pieces = tokenize(text, vocab)[: max_len - 2]
    ids = np.full(max_len, PAD, dtype=np.int64)
    ids[0] = CLS
    ids[1: 1 + len(pieces)] = pieces
    ids[1 + len(pieces)] = SEP
    return ids


def encode_batch(texts: Sequence[str], vocab: Vocabulary, max_len: int = 64) -> np.ndarray:
    return np.stack([encode(t, vocab, max_len) for t in texts]) if texts else np.zeros((0, max_len), np.int64)


def decode(ids: Iterable[int], vocab: Vocabulary) -> str:
    words: list[str] = []
    for i in ids:
        i = int(i)
        if i < len(SPECIAL_TOKENS):
            if i == UNK:
                words.append("[UNK]")
            continue
        tok = vocab.id_to_token[i]
        if tok.startswith(CONTINUATION) and words:
            words[-1] += tok[len(CONTINUATION):]
        else:
            words.append(tok)
    return " ".join(words)


@dataclass
class MaskedBatch:
    input_ids: np.ndarray
    labels: np.ndarray
    mask_rate: float

    @property
    def num_labeled(self) -> int:
        return int((self.labels != IGNORE_INDEX).sum())


def apply_mlm_mask(ids: np.ndarray, vocab_size: int, rng: np.random.Generator, rate: float = 0.15) -> MaskedBatch:
    """Select each non-special position with probability ``rate``.

    Selected positions become [MASK] 80% of the time, a random non-special
    id 10%, and stay unchanged 10%. Labels hold the original id at selected
    positions and ``IGNORE_INDEX`` elsewhere.
    """
    if not 0.0 < rate < 1.0:
        raise ConfigurationError("mask rate must lie in (0, 1)")
    ids = np.asarray(ids, dtype=np.int64)
    eligible = ids >= len(SPECIAL_TOKENS)
    selected = eligible & (rng.random(ids.shape) < rate)
    action = rng.random(ids.shape)
    random_ids = rng.integers(len(SPECIAL_TOKENS), max(vocab_size, len(SPECIAL_TOKENS) + 1), size=ids.shape)

    inputs = ids.copy()
    to_mask = selected & (action < 0.8)
    to_random = selected & (action >= 0.8) & (action < 0.9)
    inputs[to_mask] = MASK
    inputs[to_random] = random_ids[to_random]
    labels = np.where(selected, ids, IGNORE_INDEX)
    return MaskedBatch(inputs, labels, rate)
