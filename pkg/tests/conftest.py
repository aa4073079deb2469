"""Shared fixtures: a small synthetic corpus with a vocabulary and an MLM checkpoint."""

from __future__ import annotations

from dataclasses import replace

import pytest

from medcap.config import Config, DataConfig, MLMConfig, TrainConfig
from medcap.data import synth_generate
from medcap.pipeline import pretrain_mlm
from medcap.tokenizer import train_wordpiece

# criterion name -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """40 synthetic records, their vocabulary and a short MLM run."""
    root = tmp_path_factory.mktemp("small")
    records = synth_generate(40, 3, root / "synth")
    vocab = train_wordpiece([r.caption for r in records if r.split == "train"], 4096)
    vocab.save(root / "vocab.txt")
    data = DataConfig(manifest=str(root / "synth" / "manifest.jsonl"), vocab=str(root / "vocab.txt"),
                      mlm_checkpoint=str(root / "mlm"), mlm_out_dir=str(root / "mlm"),
                      out_dir=str(root / "cap"))
    config = Config(train=TrainConfig(epochs=2, lr_decoder=3e-3), mlm=MLMConfig(epochs=2), data=data)
    mlm = pretrain_mlm(config)
    return {"root": root, "records": records, "vocab": vocab, "config": config, "mlm": mlm}


@pytest.fixture
def small_config(small_corpus, tmp_path):
    """The small config with a fresh output directory per test."""
    cfg = small_corpus["config"]
    return replace(cfg, data=replace(cfg.data, out_dir=str(tmp_path / "cap")))
