"""Desk-scale walk-through: synthetic corpus to scored captions in under a minute.

    python3 demos/desk_run.py

Everything lands in demos/work/. The run mirrors the desk acceptance check:
MLM pretraining of the caption encoder, vision-language training, then a
comparison with a model trained on shuffled captions.
"""

from pathlib import Path
import math
import time

from medcap.checkpoint import load_checkpoint
from medcap.config import load_config
from medcap.data import synth_generate
from medcap.pipeline import evaluate, pretrain_mlm, shuffled_caption_control, train
from medcap.tokenizer import train_wordpiece

HERE = Path(__file__).resolve().parent


def main():
    start = time.perf_counter()
    config = load_config(HERE / "desk.toml")
    work = Path(config.data.manifest).parent.parent

    records = synth_generate(200, config.train.seed, work / "synth")
    print(f"{len(records)} synthetic pairs, e.g. {records[0].caption!r}")

    vocab = train_wordpiece([r.caption for r in records if r.split == "train"], 4096)
    vocab.save(config.data.vocab)
    print(f"vocabulary: {len(vocab)} entries")

    mlm = pretrain_mlm(config)
    print(f"MLM: train CE {mlm.epoch_losses[0]:.2f} -> {mlm.epoch_losses[-1]:.2f}, "
          f"held-out {mlm.heldout_loss:.2f} against ln V = {math.log(len(vocab)):.2f}")

    best = train(config)
    for row in load_checkpoint(Path(config.data.out_dir) / "last").history["epochs"]:
        print(f"  epoch {row['epoch']:2d}  loss {row['loss']:.4f}  val BLEU-4 {row['val_bleu4']:.3f}")

    control = shuffled_caption_control(config)
    val = evaluate(best, config.data.manifest, split="val")
    print(f"val BLEU-4 {val.bleu4:.3f} vs shuffled-caption control {control.report.bleu4:.3f}")

    test = evaluate(best, config.data.manifest, out_path=best.path / "report_test.json")
    print(f"test: BLEU-4 {test.bleu4:.3f}  METEOR {test.meteor:.3f}  ROUGE-L {test.rouge_l:.3f}  "
          f"CIDEr-D {test.cider:.3f}  (report in {best.path / 'report_test.json'})")
    print(f"done in {time.perf_counter() - start:.0f} s")


if __name__ == "__main__":
    main()
