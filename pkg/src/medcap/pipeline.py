"""MLM pretraining, vision-language training, evaluation and the alpha ablation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np

from .alignment import DecodePolicy, generate, hybrid_loss
from .checkpoint import Checkpoint, CheckpointFormatError, load_checkpoint, save_checkpoint
from .config import Config
from .data import CaptionRecord, load_images, load_manifest, shuffle_captions, split_records, write_manifest
from .metrics import (
    MetricReport,
    bleu4,
    compare_reports,
    meteor,
    score_corpus,
    tokenize_for_metrics,
    write_report,
)
from .layers import load_parameters
from .model import CaptionModel
from .numcore import (
    Adam,
    LrSchedule,
    NonFiniteError,
    Tensor,
    backward,
    clip_global_norm,
    global_norm,
    lr_at,
    no_grad,
    stack,
    zero_grad,
)
from .text import TextEncoder
from .tokenizer import (
    PAD,
    ConfigurationError,
    DataError,
    Vocabulary,
    apply_mlm_mask,
    decode,
    encode_batch,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def _vocab_from(config: Config, mlm: Checkpoint | None = None) -> Vocabulary:
    if config.data.vocab and Path(config.data.vocab).exists():
        return Vocabulary.load(config.data.vocab)
    if mlm is not None and mlm.vocab is not None:
        return mlm.vocab
    raise ConfigurationError(f"vocabulary file not found: {config.data.vocab or '(unset)'}")


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


# ---------------------------------------------------------------------------
# masked language model pretraining
# ---------------------------------------------------------------------------

@dataclass
class MLMResult:
    checkpoint: Checkpoint
    epoch_losses: list[float]
    heldout_loss: float | None
    baseline: float


def masked_ce(encoder: TextEncoder, ids: np.ndarray, seed: int, rate: float = 0.15, batch_size: int = 64) -> float:
    """Mean masked-token cross-entropy in inference mode with a fixed masking seed."""
    rng = np.random.default_rng([seed, 99])
    total, count = 0.0, 0
    with no_grad():
        for start in range(0, len(ids), batch_size):
            batch = apply_mlm_mask(ids[start:start + batch_size], encoder.cfg.vocab_size, rng, rate)
            if batch.num_labeled == 0:
                continue
            total += float(encoder.mlm_loss(batch).data) * batch.num_labeled
            count += batch.num_labeled
    if count == 0:
        raise DataError("no maskable tokens in held-out captions")
    return total / count


def pretrain_mlm(config: Config, captions: Sequence[str] | None = None,
                 heldout: Sequence[str] | None = None) -> MLMResult:
    """Masked-language-model pretraining of the caption encoder.

    Captions default to the train split of ``config.data.manifest`` and the
    held-out set to its val split. The lowest-loss epoch is saved to
    ``config.data.mlm_out_dir`` along with ``mlm_log.jsonl``.
    """
    vocab = _vocab_from(config)
    mcfg = config.mlm
    if captions is None:
        records = load_manifest(config.data.manifest)
        captions = [r.caption for r in records if r.split == "train"]
        if heldout is None:
            heldout = [r.caption for r in records if r.split == "val"]
    if not captions:
        raise DataError("no captions to pretrain on")
    text_cfg = config.model.text(len(vocab))
    encoder = TextEncoder(text_cfg, np.random.default_rng([mcfg.seed, 11]))
    ids = encode_batch(list(captions), vocab, text_cfg.max_positions)
    heldout_ids = encode_batch(list(heldout), vocab, text_cfg.max_positions) if heldout else None
    # trailing columns that are padding everywhere carry no signal
    width = int((ids != PAD).sum(axis=1).max())
    ids = ids[:, :width]

    params = encoder.named_parameters("text.")
    opt = Adam({"text": params})
    steps_per_epoch = math.ceil(len(ids) / mcfg.batch_size)
    sched = LrSchedule.with_warmup_fraction(mcfg.lr, mcfg.epochs * steps_per_epoch, mcfg.warmup_fraction)
    out_dir = Path(config.data.mlm_out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir.parent / f"{out_dir.name}_log.jsonl"
    history = {"epoch_loss": [], "lr": []}
    best_loss = math.inf
    best = None
    step = 0
    with log_path.open("w", encoding="utf-8") as log_fh:
        for epoch in range(mcfg.epochs):
            losses = []
            for batch_idx in _batches(len(ids), mcfg.batch_size, np.random.default_rng([mcfg.seed, 30, epoch])):
                batch = apply_mlm_mask(ids[batch_idx], len(vocab), np.random.default_rng([mcfg.seed, 31, step]),
                                       mcfg.mask_rate)
                lr = lr_at(sched, step)
                step += 1
                history["lr"].append(lr)
                if batch.num_labeled == 0:
                    continue
                zero_grad(params.values())
                loss = encoder.mlm_loss(batch)
                backward(loss)
                names = [n for n, p in params.items() if p.grad is not None]
                grads, _ = clip_global_norm([params[n].grad for n in names], mcfg.clip_norm)
                for n, g in zip(names, grads):
                    params[n].grad = g
                opt.step({"text": lr})
                losses.append(float(loss.data))
            epoch_loss = float(np.mean(losses)) if losses else math.nan
            history["epoch_loss"].append(epoch_loss)
            log_fh.write(json.dumps({"epoch": epoch + 1, "loss": epoch_loss}) + "\n")
            log_fh.flush()
            if epoch_loss < best_loss:
                best_loss = epoch_loss
                best = {name: p.data.copy() for name, p in params.items()}
    if best is None:
        best = {name: p.data.copy() for name, p in params.items()}
    load_parameters(encoder, best, "text.")
    heldout_loss = masked_ce(encoder, heldout_ids, mcfg.seed, mcfg.mask_rate) if heldout_ids is not None else None
    history["heldout_loss"] = heldout_loss
    ckpt = save_checkpoint(out_dir, "mlm", config.to_dict(), best,
                           counters={"step": step, "epoch": mcfg.epochs}, history=history, vocab=vocab)
    return MLMResult(ckpt, history["epoch_loss"], heldout_loss, math.log(len(vocab)))


# ---------------------------------------------------------------------------
# vision-language training
# ---------------------------------------------------------------------------

@dataclass
class TextFeatures:
    ids: np.ndarray
    lengths: np.ndarray
    cls: np.ndarray
    tokens: np.ndarray

    def take(self, idx) -> "TextFeatures":
        return TextFeatures(self.ids[idx], self.lengths[idx], self.cls[idx], self.tokens[idx])


def caption_features(model: CaptionModel, captions: Sequence[str], chunk: int = 64) -> TextFeatures:
    """Frozen text-encoder outputs for every caption, computed once.

    ``tokens[:, t]`` is the decoder input for step ``t``. Under the
    ``prefix`` input mode it is the contextual embedding of position ``t``
    when only ``ids[:, :t+1]`` is encoded, which is what generation can
    reproduce; ``full`` encodes the whole caption and ``table`` uses raw
    embedding rows.
    """
    ids = encode_batch(list(captions), model.vocab, model.cfg.max_len)
    lengths = (ids != PAD).sum(axis=1)
    mode = model.cfg.decoder_inputs
    cls, tokens = [], []
    with no_grad():
        for start in range(0, len(ids), chunk):
            part = ids[start:start + chunk]
            enc = model.text(part)
            cls.append(enc.cls_embedding.data)
            if mode == "full":
                tokens.append(enc.token_embeddings.data)
            elif mode == "table":
                tokens.append(model.text.embedding_table.data[part])
            else:
                out = np.zeros(enc.token_embeddings.shape, dtype=enc.token_embeddings.data.dtype)
                for t in range(int(lengths[start:start + chunk].max())):
                    out[:, t] = model.text(part[:, :t + 1]).token_embeddings.data[:, t]
                tokens.append(out)
    return TextFeatures(ids, lengths, np.concatenate(cls), np.concatenate(tokens))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def alignment_loss(model: CaptionModel, images: np.ndarray, feats: TextFeatures, alpha: float,
                   per_step: bool = True, training: bool = True,
                   rng: np.random.Generator | None = None, normalize_targets: bool = False) -> tuple[Tensor, dict]:
    """Teacher-forced hybrid loss for a batch.

    One decoder step runs per non-pad caption token. The projection after
    the last step is compared with the caption's [CLS] embedding; with
    ``per_step`` every earlier step is also compared with the embedding-table
    row of the next caption token. ``normalize_targets`` rescales every
    target to unit length first, so the caption [CLS] (norm near sqrt(width))
    and the table rows (norm near 0.5) weigh comparably in the squared term.
    """
    fix = _unit_rows if normalize_targets else (lambda x: x)
    b = len(images)
    steps = int(feats.lengths.max())
    state = model.decoder.init_state(model.image_condition(images))
    inputs = Tensor(feats.tokens[:, :steps])
    outputs = stack(model.decoder.teacher_forced(inputs, state, training, rng), axis=1)
    rows = np.arange(b)
    last = feats.lengths - 1
    final = hybrid_loss(outputs[rows, last], Tensor(fix(feats.cls)), alpha)
    parts = {"final": float(final.data)}
    loss = final
    if per_step:
        r, c = np.nonzero(np.arange(steps)[None, :] < last[:, None])
        if len(r):
            table = model.text.embedding_table.data
            targets = Tensor(fix(table[feats.ids[r, c + 1]]))
            per_tok = hybrid_loss(outputs[r, c], targets, alpha)
            parts["per_step"] = float(per_tok.data)
            loss = loss + per_tok
    return loss, parts


def _unfreeze_threshold(schedule: list[tuple[int, int]], epoch: int, depth: int) -> int:
    threshold = depth
    for start, value in schedule:
        if epoch >= start:
            threshold = value
    return threshold


def build_model(config: Config, vocab: Vocabulary, mlm: Checkpoint | None = None) -> CaptionModel:
    model = CaptionModel(config.model, vocab, seed=config.train.seed)
    if mlm is not None:
        try:
            model.load_arrays(mlm.params, prefixes=("text.",))
        except KeyError as exc:
            raise CheckpointFormatError(f"MLM checkpoint lacks parameter {exc.args[0]}") from None
    return model


def _greedy_captions(model: CaptionModel, images: np.ndarray, policy: DecodePolicy) -> list[str]:
    return [decode(generate(img, model, policy), model.vocab) for img in images]


def _corpus(candidates: Sequence[str], references: Sequence[str]):
    return [(tokenize_for_metrics(c), [tokenize_for_metrics(r)]) for c, r in zip(candidates, references)]


def train(config: Config, resume: str | Path | None = None, max_steps: int | None = None,
          fresh_text_encoder: bool = False) -> Checkpoint:
    """Train the captioner; returns the best checkpoint by validation metric.

    ``max_steps`` stops early (after saving ``last``) for resume testing.
    ``out_dir/last`` holds the latest state, ``out_dir/best`` the best epoch.
    """
    tcfg = config.train
    out_dir = Path(config.data.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    mlm = None
    if config.data.mlm_checkpoint:
        mlm = load_checkpoint(config.data.mlm_checkpoint)
    elif not fresh_text_encoder:
        raise ConfigurationError("no MLM checkpoint configured; pass fresh_text_encoder=True to train without one")
    vocab = _vocab_from(config, mlm)
    model = build_model(config, vocab, mlm)
    model.text.set_requires_grad(False)

    records = load_manifest(config.data.manifest)
    train_recs = split_records(records, "train")
    val_recs = split_records(records, "val")
    if not train_recs:
        raise DataError("manifest has no train records")
    vcfg = config.model.vision()
    train_images = load_images(train_recs, vcfg.image_size, vcfg.channels)
    val_images = load_images(val_recs, vcfg.image_size, vcfg.channels) if val_recs else None
    feats = caption_features(model, [r.caption for r in train_recs])

    opt = Adam({"decoder": model.decoder.named_parameters("decoder."),
                "vision": model.vision.named_parameters("vision.")})
    all_params = list(model.decoder.parameters()) + list(model.vision.parameters())
    steps_per_epoch = math.ceil(len(train_recs) / tcfg.batch_size)
    total_steps = tcfg.epochs * steps_per_epoch
    schedules = {
        "decoder": LrSchedule.with_warmup_fraction(tcfg.lr_decoder, total_steps, tcfg.warmup_fraction),
        "vision": LrSchedule.with_warmup_fraction(tcfg.lr_vision, total_steps, tcfg.warmup_fraction),
    }
    unfreeze = tcfg.schedule_for(vcfg.depth)
    policy = replace(config.decode.policy(), mode="greedy")

    history = {"step_loss": [], "lr": {"decoder": [], "vision": []}, "grad_norm": [],
               "grad_norm_clipped": [], "epochs": [], "fresh_text_encoder": mlm is None}
    counters = {"step": 0, "epoch": 0, "batch": 0, "best_value": None, "best_epoch": None, "bad_epochs": 0}
    if tcfg.standardize_condition and resume is None:
        with no_grad():
            cond = np.concatenate([model.image_condition(train_images[i:i + 64]).data
                                   for i in range(0, len(train_images), 64)])
        model.decoder.fit_condition(cond)
    if resume is not None:
        state = load_checkpoint(resume)
        model.load_arrays(state.params)
        opt.states = dict(state.optimizer)
        history = state.history
        counters = state.counters

    def snapshot(name: str) -> Checkpoint:
        return save_checkpoint(out_dir / name, "captioner", config.to_dict(), model.state_arrays(),
                               counters=dict(counters), history=history, optimizer=opt.states, vocab=vocab)

    step = counters["step"]
    for epoch in range(counters["epoch"], tcfg.epochs):
        threshold = _unfreeze_threshold(unfreeze, epoch, vcfg.depth)
        model.vision.set_trainable(threshold)
        batches = _batches(len(train_recs), tcfg.batch_size, np.random.default_rng([tcfg.seed, 20, epoch]))
        first = counters["batch"] if epoch == counters["epoch"] else 0
        for b in range(first, len(batches)):
            if max_steps is not None and step >= max_steps:
                counters.update(step=step, epoch=epoch, batch=b)
                return snapshot("last")
            idx = batches[b]
            zero_grad(all_params)
            try:
                loss, _ = alignment_loss(model, train_images[idx], feats.take(idx), tcfg.alpha,
                                         tcfg.per_step_loss, True, np.random.default_rng([tcfg.seed, 21, step]),
                                         tcfg.normalize_targets)
            except NonFiniteError as exc:
                counters.update(step=step, epoch=epoch, batch=b)
                snapshot("diagnostic")
                raise TrainingError(f"non-finite loss at step {step}: {exc}") from exc
            backward(loss)
            active = opt.named_active()
            grads, norm = clip_global_norm([p.grad for _, _, p in active], tcfg.clip_norm)
            for (_, _, p), g in zip(active, grads):
                p.grad = g
            lrs = {name: lr_at(s, step) for name, s in schedules.items()}
            opt.step(lrs)
            history["step_loss"].append(float(loss.data))
            history["grad_norm"].append(norm)
            history["grad_norm_clipped"].append(global_norm(grads))
            for name, lr in lrs.items():
                history["lr"][name].append(lr)
            step += 1

        epoch_losses = history["step_loss"][epoch * steps_per_epoch:(epoch + 1) * steps_per_epoch]
        row = {"epoch": epoch + 1, "loss": float(np.mean(epoch_losses)), "threshold": threshold}
        if val_images is not None:
            captions = _greedy_captions(model, val_images, policy)
            corpus = _corpus(captions, [r.caption for r in val_recs])
            row["val_bleu4"] = bleu4(corpus)
            row["val_meteor"] = float(np.mean([meteor(c, r) for c, r in corpus]))
        history["epochs"].append(row)
        log.info("epoch %d: %s", epoch + 1, row)
        counters.update(step=step, epoch=epoch + 1, batch=0)

        value = row.get(f"val_{tcfg.early_stop_metric}")
        stop = False
        if value is not None:
            best = counters["best_value"]
            if best is None or value > best + tcfg.min_delta:
                counters.update(best_value=value, best_epoch=epoch + 1, bad_epochs=0)
                snapshot("best")
            else:
                counters["bad_epochs"] += 1
                stop = counters["bad_epochs"] >= tcfg.patience
        elif counters["best_value"] is None or epoch + 1 == tcfg.epochs:
            snapshot("best")
        snapshot("last")
        if stop:
            log.info("early stop after epoch %d", epoch + 1)
            break
    return load_checkpoint(out_dir / "best")


def load_model(checkpoint: Checkpoint | str | Path) -> CaptionModel:
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    if ckpt.vocab is None:
        raise CheckpointFormatError(f"{ckpt.path} has no vocab.txt")
    config = Config.from_dict(ckpt.config)
    model = CaptionModel(config.model, ckpt.vocab, seed=config.train.seed)
    try:
        model.load_arrays(ckpt.params)
    except KeyError as exc:
        raise CheckpointFormatError(f"checkpoint lacks parameter '{exc.args[0]}'") from None
    return model


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(checkpoint: Checkpoint | str | Path, manifest, policy: DecodePolicy = DecodePolicy(),
             split: str = "test", out_path=None, seed: int = 0) -> MetricReport:
    """Caption every record of ``split`` and score against its caption.

    The written report also carries a shuffled-reference control: the same
    predictions scored against references rotated by one item.
    """
    model = load_model(checkpoint)
    records = load_manifest(manifest) if not isinstance(manifest, list) else manifest
    records = split_records(records, split)
    if not records:
        raise DataError(f"split {split!r} is empty")
    vcfg = model.cfg.vision()
    images = load_images(records, vcfg.image_size, vcfg.channels)
    rng = np.random.default_rng([seed, 40])
    predictions = [decode(generate(img, model, policy, rng), model.vocab) for img in images]
    references = [r.caption for r in records]
    report = score_corpus(_corpus(predictions, references), ids=[r.record_id for r in records])
    if out_path is not None:
        write_report(report, out_path, {
            "policy": asdict(policy),
            "split": split,
            "predictions": predictions,
            "references": references,
            "control": shuffled_control(predictions, references),
        })
    return report


def shuffled_control(predictions: Sequence[str], references: Sequence[str]) -> dict:
    if len(references) < 2:
        return {}
    rotated = list(references[1:]) + [references[0]]
    corpus = _corpus(predictions, rotated)
    return {"bleu4": bleu4(corpus), "meteor": float(np.mean([meteor(c, r) for c, r in corpus]))}


@dataclass
class ControlResult:
    report: MetricReport
    checkpoint: Checkpoint
    manifest: Path


def shuffled_caption_control(config: Config, split: str = "val", policy: DecodePolicy = DecodePolicy()) -> ControlResult:
    """Train an identical model on train captions permuted across images.

    The pairing is broken but word statistics are kept, so the control's
    score on the untouched ``split`` is what the language prior alone earns.
    Outputs go to ``<out_dir>_shuffled``.
    """
    out_dir = Path(str(Path(config.data.out_dir)) + "_shuffled")
    out_dir.mkdir(parents=True, exist_ok=True)
    records = load_manifest(config.data.manifest)
    shuffled = shuffle_captions(records, np.random.default_rng([config.train.seed, 50]))
    manifest = out_dir / "manifest.jsonl"
    write_manifest(shuffled, manifest)
    cfg = replace(config, data=replace(config.data, manifest=str(manifest), out_dir=str(out_dir)))
    ckpt = train(cfg)
    report = evaluate(ckpt, records, policy, split, out_path=out_dir / f"report_{split}.json")
    return ControlResult(report, ckpt, manifest)


def write_jsonl_surfaces(records: Sequence[CaptionRecord], predictions: Sequence[str], directory) -> tuple[Path, Path]:
    """Write the predictions / references JSONL pair consumed by the metrics tools."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pred_path, ref_path = directory / "predictions.jsonl", directory / "references.jsonl"
    with pred_path.open("w", encoding="utf-8") as fp, ref_path.open("w", encoding="utf-8") as fr:
        for rec, pred in zip(records, predictions):
            fp.write(json.dumps({"id": rec.record_id, "candidate": pred}) + "\n")
            fr.write(json.dumps({"id": rec.record_id, "references": [rec.caption]}) + "\n")
    return pred_path, ref_path


# ---------------------------------------------------------------------------
# alpha ablation
# ---------------------------------------------------------------------------

@dataclass
class AblationResult:
    rows: list[dict]
    reports: dict[float, MetricReport]
    tests: dict[str, dict]


ABLATION_LABELS = {0.0: "MSE-only", 1.0: "Cosine-only"}


def run_alpha_ablation(config: Config, alphas: Sequence[float] = (0.0, 0.7, 1.0), split: str = "test") -> AblationResult:
    """Train and evaluate once per alpha; rows plus pairwise paired t-tests."""
    base = Path(config.data.out_dir)
    rows, reports = [], {}
    for alpha in alphas:
        cfg = replace(config, train=replace(config.train, alpha=alpha),
                      data=replace(config.data, out_dir=str(base / f"alpha_{alpha:g}")))
        ckpt = train(cfg)
        report = evaluate(ckpt, cfg.data.manifest, cfg.decode.policy(), split,
                          out_path=Path(cfg.data.out_dir) / "report.json")
        reports[alpha] = report
        rows.append({"alpha": alpha, "label": ABLATION_LABELS.get(alpha, "Hybrid"), "bleu4": report.bleu4,
                     "meteor": report.meteor, "rouge_l": report.rouge_l, "cider": report.cider})
    tests = {f"{a:g} vs {b:g}": compare_reports(reports[a], reports[b]) for a, b in combinations(alphas, 2)}
    return AblationResult(rows, reports, tests)
