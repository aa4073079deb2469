"""``medcap`` command line: corpus synthesis, training, evaluation and checks."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import MISSING, fields, replace
from pathlib import Path

import numpy as np

from .alignment import DecodePolicy, generate
from .checkpoint import CheckpointFormatError, load_checkpoint
from .config import TrainConfig, load_config
from .data import preprocess_image, read_corpus, read_image, synth_generate
from .metrics import compare_reports, read_report
from .numcore.io import TensorFormatError
from .tokenizer import ConfigurationError, DataError, decode, train_wordpiece

log = logging.getLogger("medcap")


def _parse_schedule(text: str) -> list[tuple[int, int]]:
    """``"0:1,5:0"`` becomes ``[(0, 1), (5, 0)]``."""
    pairs = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        epoch, _, threshold = item.partition(":")
        if not threshold:
            raise argparse.ArgumentTypeError(f"expected epoch:threshold, got {item!r}")
        pairs.append((int(epoch), int(threshold)))
    return pairs


def _add_train_overrides(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("TrainConfig overrides")
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        default = f.default if f.default is not MISSING else None
        if f.name == "unfreeze_schedule":
            group.add_argument(flag, type=_parse_schedule, default=None, metavar="E:T[,E:T...]",
                               help="progressive unfreeze pairs, e.g. 0:1,5:0")
        elif isinstance(default, bool):
            group.add_argument(flag, action=argparse.BooleanOptionalAction, default=None)
        else:
            group.add_argument(flag, type=type(default), default=None, metavar=f.name.upper())


def _train_overrides(args: argparse.Namespace) -> dict:
    return {f.name: getattr(args, f.name) for f in fields(TrainConfig) if getattr(args, f.name, None) is not None}


def _policy(args: argparse.Namespace) -> DecodePolicy:
    return DecodePolicy(args.mode, args.k, args.p, args.temperature, args.max_len)


def _add_policy(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--mode", choices=("greedy", "top_k", "top_p"), default="greedy")
    parser.add_argument("--k", type=int, default=5)
    parser.add_argument("--p", type=float, default=0.9)
    parser.add_argument("--temperature", type=float, default=1.0)
    parser.add_argument("--max-len", type=int, default=64)
    parser.add_argument("--seed", type=int, default=0, help="sampling seed for top_k / top_p")


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2))


# --- subcommands ----------------------------------------------------------

def cmd_synth(args) -> int:
    records = synth_generate(args.n, args.seed, args.out, image_size=args.image_size)
    print(f"wrote {len(records)} records to {Path(args.out) / 'manifest.jsonl'}")
    return 0


def cmd_tokenizer_train(args) -> int:
    captions = read_corpus(args.corpus)
    vocab = train_wordpiece(captions, args.vocab_size, args.min_frequency)
    vocab.save(args.out)
    print(f"vocabulary of {len(vocab)} entries written to {args.out}")
    return 0


def cmd_pretrain_mlm(args) -> int:
    from .pipeline import pretrain_mlm
    config = load_config(args.config)
    result = pretrain_mlm(config)
    _print_json({"checkpoint": str(result.checkpoint.path), "first_epoch_loss": result.epoch_losses[0],
                 "last_epoch_loss": result.epoch_losses[-1], "heldout_loss": result.heldout_loss,
                 "ln_vocab": result.baseline})
    return 0


def cmd_train(args) -> int:
    from .pipeline import train
    config = load_config(args.config)
    config.train = replace(config.train, **_train_overrides(args))
    ckpt = train(config, resume=args.resume, max_steps=args.max_steps,
                 fresh_text_encoder=args.fresh_text_encoder)
    # the best checkpoint's history stops at its epoch; report the full run
    last = Path(config.data.out_dir) / "last"
    epochs = (load_checkpoint(last) if last.exists() else ckpt).history.get("epochs", [])
    _print_json({"checkpoint": str(ckpt.path), "best_epoch": ckpt.counters.get("best_epoch"),
                 "epochs": epochs})
    return 0


def cmd_eval(args) -> int:
    from .pipeline import evaluate
    out = args.out or str(Path(args.checkpoint) / f"report_{args.split}.json")
    report = evaluate(args.checkpoint, args.manifest, _policy(args), args.split, out_path=out, seed=args.seed)
    _print_json({"report": out, "bleu4": report.bleu4, "meteor": report.meteor,
                 "rouge_l": report.rouge_l, "cider": report.cider, "items": len(report.ids)})
    return 0


def cmd_caption(args) -> int:
    from .pipeline import load_model
    model = load_model(args.checkpoint)
    vcfg = model.cfg.vision()
    image = preprocess_image(read_image(args.image), vcfg.image_size, vcfg.channels)
    tokens = generate(image, model, _policy(args), np.random.default_rng(args.seed))
    print(decode(tokens, model.vocab))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite
    result = run_suite(range(args.seeds))
    for name, err in result.max_rel_error.items():
        status = "FAIL" if any(n == name for n, _ in result.failures) else "ok"
        print(f"{name:<28} max rel err {err:.2e}  {status}")
    print(f"{len(result.max_rel_error)} cases x {args.seeds} seeds in {result.seconds:.1f} s")
    return 0 if result.passed else 1


def cmd_ttest(args) -> int:
    a, b = read_report(args.a), read_report(args.b)
    _print_json(compare_reports(a, b))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="medcap", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic image-caption corpus")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", type=int, default=64)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("tokenizer-train", help="learn a WordPiece vocabulary")
    p.add_argument("--corpus", required=True, help="text file (one caption per line) or manifest .jsonl")
    p.add_argument("--vocab-size", type=int, default=4096)
    p.add_argument("--min-frequency", type=int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tokenizer_train)

    p = sub.add_parser("pretrain-mlm", help="masked-language-model pretraining of the text encoder")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_pretrain_mlm)

    p = sub.add_parser("train", help="vision-language training")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None, help="checkpoint directory to continue from")
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--fresh-text-encoder", action="store_true",
                   help="train without an MLM checkpoint (randomly initialized text encoder)")
    _add_train_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="caption a split and score it")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", default=None, help="report JSON path (default: inside the checkpoint)")
    _add_policy(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("caption", help="caption one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    _add_policy(p)
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ttest", help="paired t-tests between two report files")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.set_defaults(func=cmd_ttest)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, DataError, CheckpointFormatError, TensorFormatError, FileNotFoundError) as exc:
        print(f"medcap {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
