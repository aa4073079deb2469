"""Finite-difference checks of the model's differentiable pieces.

Every case builds a tiny float64 instance from one seed, so a full sweep of
20 seeds finishes well inside half a minute. ``run_suite`` is what ``medcap gradcheck``
and the acceptance tests call.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .alignment import hybrid_loss
from .decoder import Decoder, DecoderConfig, LSTMLayer
from .layers import TransformerBlock
from .numcore import Tensor, tsum
from .numcore import check_gradients as _check
from .numcore.gradcheck import GradCheckResult
from .text import TextConfig, TextEncoder
from .tokenizer import IGNORE_INDEX, MaskedBatch

F64 = np.float64
ALPHAS = (0.0, 0.3, 0.7, 1.0)
# central-difference step; 1e-4 leaves O(h^2) truncation error near 5e-4
# relative on the decoder case, 1e-6 starts to lose digits to rounding
STEP = 1e-5


def check_gradients(fn, inputs) -> GradCheckResult:
    return _check(fn, inputs, h=STEP)


def _hybrid_case(alpha: float) -> Callable[[int], GradCheckResult]:
    def case(seed: int) -> GradCheckResult:
        rng = np.random.default_rng([seed, 1])
        pred = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        target = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        return check_gradients(lambda: hybrid_loss(pred, target, alpha), [pred, target])
    return case


def lstm_step_case(seed: int) -> GradCheckResult:
    rng = np.random.default_rng([seed, 2])
    layer = LSTMLayer(4, 5, rng, dtype=F64)
    x = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    h = Tensor(rng.uniform(-0.9, 0.9, size=(2, 5)), requires_grad=True)
    c = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
    wh, wc = rng.normal(size=(2, 5)), rng.normal(size=(2, 5))

    def fn():
        h2, c2 = layer(x, h, c)
        return tsum(h2 * wh) + tsum(c2 * wc)

    return check_gradients(fn, [x, h, c] + layer.parameters())


def decoder_case(seed: int) -> GradCheckResult:
    """Two-layer step plus projection, starting from an image-conditioned state."""
    rng = np.random.default_rng([seed, 3])
    dec = Decoder(DecoderConfig(input_size=3, hidden_size=3, num_layers=2, inter_layer_dropout=0.0,
                                encoder_width=2), rng, dtype=F64)
    image = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    xs = rng.normal(size=(2, 2, 3))
    target = rng.normal(size=(2, 3))

    def fn():
        state = dec.init_state(image)
        y = None
        for t in range(xs.shape[1]):
            y, state = dec.step(Tensor(xs[:, t]), state)
        return hybrid_loss(dec.project(y), target)

    return check_gradients(fn, [image] + dec.parameters())


def attention_block_case(seed: int) -> GradCheckResult:
    rng = np.random.default_rng([seed, 4])
    block = TransformerBlock(4, 2, 2.0, rng, dtype=F64)
    # larger than the 0.02 init so the check exercises non-trivial attention
    for p in block.parameters():
        if p.data.ndim == 2:
            p.data = rng.normal(scale=0.3, size=p.shape)
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    pad = np.array([[False, False, True], [False, False, False]])
    w = rng.normal(size=(2, 3, 4))
    return check_gradients(lambda: tsum(block(x, pad) * w), [x] + block.parameters())


def mlm_loss_case(seed: int) -> GradCheckResult:
    rng = np.random.default_rng([seed, 5])
    cfg = TextConfig(vocab_size=8, width=4, depth=1, heads=2, mlp_ratio=2.0, max_positions=5)
    enc = TextEncoder(cfg, rng, dtype=F64)
    for p in enc.parameters():
        if p.data.ndim == 2:
            p.data = rng.normal(scale=0.3, size=p.shape)
    ids = rng.integers(5, cfg.vocab_size, size=(2, 5))
    ids[:, 0] = 2
    labels = np.full(ids.shape, IGNORE_INDEX)
    labels[0, 1], labels[1, 3], labels[1, 4] = ids[0, 1], ids[1, 3], ids[1, 4]
    inputs = ids.copy()
    inputs[0, 1] = inputs[1, 3] = 4
    batch = MaskedBatch(inputs, labels, 0.3)
    return check_gradients(lambda: enc.mlm_loss(batch), enc.parameters())


CASES: dict[str, Callable[[int], GradCheckResult]] = {
    **{f"hybrid_loss[alpha={a:g}]": _hybrid_case(a) for a in ALPHAS},
    "lstm_step": lstm_step_case,
    "decoder_step_project": decoder_case,
    "attention_block": attention_block_case,
    "mlm_loss": mlm_loss_case,
}


@dataclass
class SuiteResult:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    failures: list[tuple[str, int]] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def run_suite(seeds=range(20), cases: dict | None = None) -> SuiteResult:
    cases = CASES if cases is None else cases
    result = SuiteResult()
    start = time.perf_counter()
    for name, case in cases.items():
        worst = 0.0
        for seed in seeds:
            r = case(seed)
            worst = max(worst, r.max_rel_error)
            if not r.passed:
                result.failures.append((name, seed))
        result.max_rel_error[name] = worst
    result.seconds = time.perf_counter() - start
    return result
