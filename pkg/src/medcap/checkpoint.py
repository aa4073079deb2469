"""Checkpoint directories: ``manifest.json`` plus one float32 ``.bin`` per named tensor."""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numcore.io import TensorFormatError, read_tensor, write_tensor
from .numcore.optim import AdamState
from .tokenizer import Vocabulary

FORMAT_VERSION = 1


class CheckpointFormatError(ValueError):
    """A checkpoint is missing files, corrupt, or from another format version."""


@dataclass
class Checkpoint:
    path: Path
    kind: str
    config: dict
    params: dict[str, np.ndarray]
    counters: dict = field(default_factory=dict)
    history: dict = field(default_factory=dict)
    optimizer: dict[str, AdamState] = field(default_factory=dict)
    vocab: Vocabulary | None = None


def save_checkpoint(path, kind: str, config: dict, params: dict[str, np.ndarray], counters: dict | None = None,
                    history: dict | None = None, optimizer: dict[str, AdamState] | None = None,
                    vocab: Vocabulary | None = None) -> Checkpoint:
    """Write a checkpoint directory, replacing any previous one atomically-ish."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    (tmp / "optim").mkdir(parents=True)
    for name, arr in params.items():
        write_tensor(tmp / f"{name}.bin", np.asarray(arr, dtype=np.float32), "f32")
    optim_meta = {}
    for name, state in (optimizer or {}).items():
        write_tensor(tmp / "optim" / f"{name}.m.bin", state.first_moment[0], "f32")
        write_tensor(tmp / "optim" / f"{name}.v.bin", state.second_moment[0], "f32")
        optim_meta[name] = {"step_count": state.step_count, "beta1": state.beta1,
                            "beta2": state.beta2, "epsilon": state.epsilon}
    if vocab is not None:
        vocab.save(tmp / "vocab.txt")
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "parameters": {name: list(np.shape(arr)) for name, arr in params.items()},
        "optimizer": optim_meta,
        "counters": counters or {},
        "history": history or {},
    }
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    if path.exists():
        shutil.rmtree(path)
    tmp.rename(path)
    return Checkpoint(path, kind, config, dict(params), counters or {}, history or {}, dict(optimizer or {}), vocab)


def _read_named(path: Path, name: str, shape) -> np.ndarray:
    if not path.exists():
        raise CheckpointFormatError(f"missing tensor file for '{name}' ({path.name})")
    try:
        arr = read_tensor(path)
    except TensorFormatError as exc:
        raise CheckpointFormatError(f"corrupt tensor file for '{name}': {exc}") from None
    if shape is not None and list(arr.shape) != list(shape):
        raise CheckpointFormatError(f"tensor '{name}' has shape {list(arr.shape)}, manifest says {shape}")
    return arr


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise CheckpointFormatError(f"{path} has no manifest.json")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointFormatError(f"unreadable manifest.json: {exc}") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"checkpoint format version {version!r}, expected {FORMAT_VERSION}")
    params = {name: _read_named(path / f"{name}.bin", name, shape) for name, shape in manifest["parameters"].items()}
    optimizer = {}
    for name, meta in manifest.get("optimizer", {}).items():
        m = _read_named(path / "optim" / f"{name}.m.bin", f"optim.{name}.m", manifest["parameters"].get(name))
        v = _read_named(path / "optim" / f"{name}.v.bin", f"optim.{name}.v", manifest["parameters"].get(name))
        optimizer[name] = AdamState([m], [v], meta["step_count"], meta["beta1"], meta["beta2"], meta["epsilon"])
    vocab_path = path / "vocab.txt"
    vocab = Vocabulary.load(vocab_path) if vocab_path.exists() else None
    return Checkpoint(path, manifest["kind"], manifest["config"], params, manifest.get("counters", {}),
                      manifest.get("history", {}), optimizer, vocab)
