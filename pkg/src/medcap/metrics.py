"""Caption-quality metrics and the paired t-test used to compare systems.

All metrics consume word-level token lists (see :func:`tokenize_for_metrics`),
independent of the model's WordPiece vocabulary.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

Tokens = Sequence[str]
Item = tuple[Tokens, Sequence[Tokens]]

_PUNCT = re.compile(r"[^\w\s]", flags=re.UNICODE)


def tokenize_for_metrics(text: str) -> list[str]:
    return _PUNCT.sub(" ", text.lower()).split()


def _validate(corpus: Sequence[Item]) -> None:
    if not corpus:
        raise ValueError("corpus must contain at least one item")
    for cand, refs in corpus:
        if not refs:
            raise ValueError("every item needs at least one reference")


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

def _closest_ref_length(cand_len: int, refs: Sequence[Tokens]) -> int:
    return min((abs(len(r) - cand_len), len(r)) for r in refs)[1]


def _clipped_counts(cand: Tokens, refs: Sequence[Tokens], n: int) -> tuple[int, int]:
    cand_counts = ngrams(cand, n)
    max_ref: Counter = Counter()
    for ref in refs:
        for gram, c in ngrams(ref, n).items():
            if c > max_ref[gram]:
                max_ref[gram] = c
    matched = sum(min(c, max_ref[g]) for g, c in cand_counts.items())
    return matched, max(len(cand) - n + 1, 0)


def bleu4(corpus: Sequence[Item]) -> float:
    """Unsmoothed corpus BLEU-4 with the closest-reference brevity penalty."""
    _validate(corpus)
    matched = [0] * 4
    total = [0] * 4
    cand_len = ref_len = 0
    for cand, refs in corpus:
        for n in range(1, 5):
            m, t = _clipped_counts(cand, refs, n)
            matched[n - 1] += m
            total[n - 1] += t
        cand_len += len(cand)
        ref_len += _closest_ref_length(len(cand), refs)
    if cand_len == 0 or min(matched) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / 4.0
    bp = math.exp(min(0.0, 1.0 - ref_len / cand_len))
    return bp * math.exp(log_p)


def sentence_bleu4(cand: Tokens, refs: Sequence[Tokens]) -> float:
    """Per-item BLEU-4 with add-one smoothing on the 2- to 4-gram precisions."""
    if not cand:
        return 0.0
    m1, t1 = _clipped_counts(cand, refs, 1)
    if m1 == 0:
        return 0.0
    log_p = math.log(m1 / t1)
    for n in range(2, 5):
        m, t = _clipped_counts(cand, refs, n)
        log_p += math.log((m + 1) / (t + 1))
    bp = math.exp(min(0.0, 1.0 - _closest_ref_length(len(cand), refs) / len(cand)))
    return bp * math.exp(log_p / 4.0)


# ---------------------------------------------------------------------------
# ROUGE-L
# ---------------------------------------------------------------------------

def lcs_length(a: Tokens, b: Tokens) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(cand: Tokens, refs: Sequence[Tokens]) -> float:
    if not refs:
        raise ValueError("rouge_l needs at least one reference")
    best = 0.0
    for ref in refs:
        lcs = lcs_length(cand, ref)
        if lcs == 0:
            continue
        p, r = lcs / len(cand), lcs / len(ref)
        best = max(best, 2 * p * r / (p + r))
    return best


# ---------------------------------------------------------------------------
# METEOR (exact-match module only)
# ---------------------------------------------------------------------------

def align(cand: Tokens, ref: Tokens) -> tuple[int, int]:
    """(matches, chunks) of the exact-match alignment with most matches, then fewest chunks.

    Solved exactly by memoized search over candidate positions, tracking
    which reference positions are taken and where the previous match landed.
    """
    positions: dict[str, list[int]] = {}
    for j, tok in enumerate(ref):
        positions.setdefault(tok, []).append(j)
    cand = tuple(cand)

    @lru_cache(maxsize=None)
    def best(i: int, used: int, prev: int) -> tuple[int, int]:
        # returns (-matches, chunks) minimized lexicographically
        if i == len(cand):
            return (0, 0)
        skip = best(i + 1, used, -2)
        choice = skip
        for j in positions.get(cand[i], ()):
            if used >> j & 1:
                continue
            neg_m, ch = best(i + 1, used | (1 << j), j)
            option = (neg_m - 1, ch + (0 if j == prev + 1 else 1))
            if option < choice:
                choice = option
        return choice

    neg_m, chunks = best(0, 0, -2)
    best.cache_clear()
    return -neg_m, chunks


def meteor_single(cand: Tokens, ref: Tokens, alpha: float = 0.9, beta: float = 3.0, gamma: float = 0.5) -> float:
    if not cand or not ref:
        return 0.0
    matches, chunks = align(cand, ref)
    if matches == 0:
        return 0.0
    p, r = matches / len(cand), matches / len(ref)
    f_mean = p * r / (alpha * p + (1 - alpha) * r)
    penalty = gamma * (chunks / matches) ** beta
    return f_mean * (1 - penalty)


def meteor(cand: Tokens, refs: Sequence[Tokens]) -> float:
    """``Fmean * (1 - 0.5 * (chunks/matches)^3)`` with ``Fmean = 10PR / (R + 9P)``; max over references."""
    if not refs:
        raise ValueError("meteor needs at least one reference")
    return max(meteor_single(cand, ref) for ref in refs)


# ---------------------------------------------------------------------------
# CIDEr-D
# ---------------------------------------------------------------------------

def _tfidf(tokens: Tokens, df: dict, log_n: float, n_max: int):
    vecs, norms = [], []
    for n in range(1, n_max + 1):
        vec = {g: tf * (log_n - math.log(max(1.0, df.get(g, 0.0)))) for g, tf in ngrams(tokens, n).items()}
        vecs.append(vec)
        norms.append(math.sqrt(sum(v * v for v in vec.values())))
    return vecs, norms


def cider_scores(corpus: Sequence[Item], n_max: int = 4, sigma: float = 6.0) -> list[float]:
    """Per-item CIDEr-D (clipped TF-IDF cosine with gaussian length penalty, x10)."""
    _validate(corpus)
    df: Counter = Counter()
    for _, refs in corpus:
        seen = set()
        for ref in refs:
            for n in range(1, n_max + 1):
                seen.update(ngrams(ref, n))
        df.update(seen)
    log_n = math.log(float(len(corpus)))
    scores = []
    for cand, refs in corpus:
        vec_c, norm_c = _tfidf(cand, df, log_n, n_max)
        per_n = [0.0] * n_max
        for ref in refs:
            vec_r, norm_r = _tfidf(ref, df, log_n, n_max)
            delta = len(cand) - len(ref)
            penalty = math.exp(-(delta * delta) / (2 * sigma * sigma))
            for k in range(n_max):
                val = sum(min(v, vec_r[k][g]) * vec_r[k][g] for g, v in vec_c[k].items() if g in vec_r[k])
                if norm_c[k] != 0 and norm_r[k] != 0:
                    val /= norm_c[k] * norm_r[k]
                per_n[k] += val * penalty
        scores.append(10.0 * sum(per_n) / n_max / len(refs))
    return scores


def cider(corpus: Sequence[Item]) -> float:
    scores = cider_scores(corpus)
    return sum(scores) / len(scores)


# ---------------------------------------------------------------------------
# paired t-test
# ---------------------------------------------------------------------------

def _betacf(a: float, b: float, x: float, max_iter: int = 300, eps: float = 3e-16) -> float:
    """Continued fraction for the regularized incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return h


def incomplete_beta(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    degenerate: bool = False
    n: int = 0


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-sided paired t-test on ``a - b`` with ``n - 1`` degrees of freedom."""
    if len(a) != len(b) or len(a) < 2:
        raise ValueError("paired_t_test needs two equal-length samples of size >= 2")
    diffs = [x - y for x, y in zip(a, b)]
    n = len(diffs)
    mean = sum(diffs) / n
    var = sum((d - mean) ** 2 for d in diffs) / (n - 1)
    if var == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, False, n)
        return TTestResult(math.copysign(math.inf, mean), 0.0, True, n)
    t = mean / math.sqrt(var / n)
    dof = n - 1
    p = incomplete_beta(dof / 2.0, 0.5, dof / (dof + t * t))
    return TTestResult(t, min(1.0, max(0.0, p)), False, n)


# ---------------------------------------------------------------------------
# reports and file surfaces
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    bleu4: float
    meteor: float
    rouge_l: float
    cider: float
    ids: list = field(default_factory=list)
    per_item: dict[str, list[float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(d["bleu4"], d["meteor"], d["rouge_l"], d["cider"], list(d.get("ids", [])), dict(d.get("per_item", {})))


def score_corpus(corpus: Sequence[Item], ids: Sequence | None = None) -> MetricReport:
    _validate(corpus)
    per_item = {
        "bleu4": [sentence_bleu4(c, r) for c, r in corpus],
        "meteor": [meteor(c, r) for c, r in corpus],
        "rouge_l": [rouge_l(c, r) for c, r in corpus],
        "cider": cider_scores(corpus),
    }
    n = len(corpus)
    return MetricReport(
        bleu4=bleu4(corpus),
        meteor=sum(per_item["meteor"]) / n,
        rouge_l=sum(per_item["rouge_l"]) / n,
        cider=sum(per_item["cider"]) / n,
        ids=list(ids) if ids is not None else list(range(n)),
        per_item=per_item,
    )


def _read_jsonl(path) -> list[dict]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rows.append(json.loads(line))
    return rows


def load_eval_corpus(predictions_path, references_path) -> tuple[list, list[Item]]:
    """Join predictions ``{"id", "candidate"}`` with references ``{"id", "references"}`` by id."""
    refs = {row["id"]: row["references"] for row in _read_jsonl(references_path)}
    ids, corpus = [], []
    for row in _read_jsonl(predictions_path):
        if row["id"] not in refs:
            raise KeyError(f"prediction id {row['id']!r} has no references")
        ids.append(row["id"])
        corpus.append((tokenize_for_metrics(row["candidate"]), [tokenize_for_metrics(r) for r in refs[row["id"]]]))
    return ids, corpus


def compare_reports(a: MetricReport, b: MetricReport, metrics: Sequence[str] = ("bleu4", "meteor", "rouge_l", "cider")) -> dict:
    """Paired t-tests of ``a`` vs ``b`` per metric, aligned on item ids."""
    index_b = {i: k for k, i in enumerate(b.ids)}
    shared = [(k, index_b[i]) for k, i in enumerate(a.ids) if i in index_b]
    if len(shared) < 2:
        raise ValueError("reports share fewer than two item ids")
    out = {}
    for m in metrics:
        xa = [a.per_item[m][ka] for ka, _ in shared]
        xb = [b.per_item[m][kb] for _, kb in shared]
        out[m] = asdict(paired_t_test(xa, xb))
    return out


def write_report(report: MetricReport, path, extra: dict | None = None) -> None:
    payload = report.to_dict()
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2), encoding="utf-8")


def read_report(path) -> MetricReport:
    return MetricReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
