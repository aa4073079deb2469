"""Loss-weight ablation on the desk corpus: MSE-only, hybrid (alpha 0.7) and cosine-only.

    python3 demos/desk_run.py      # once, to build the corpus and MLM checkpoint
    python3 demos/ablation.py [--epochs N]

Prints one metric row per alpha and paired t-tests between every pair.
"""

import argparse
from dataclasses import replace
from pathlib import Path

from medcap.config import load_config
from medcap.pipeline import run_alpha_ablation

HERE = Path(__file__).resolve().parent


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--epochs", type=int, default=10)
    args = parser.parse_args()
    config = load_config(HERE / "desk.toml")
    config = replace(config, train=replace(config.train, epochs=args.epochs),
                     data=replace(config.data, out_dir=str(Path(config.data.out_dir).parent / "ablation")))
    result = run_alpha_ablation(config)

    print(f"{'variant':<12} {'alpha':>5} {'BLEU-4':>7} {'METEOR':>7} {'ROUGE-L':>7} {'CIDEr-D':>7}")
    for row in result.rows:
        print(f"{row['label']:<12} {row['alpha']:>5g} {row['bleu4']:>7.3f} {row['meteor']:>7.3f} "
              f"{row['rouge_l']:>7.3f} {row['cider']:>7.3f}")
    print()
    for pair, metrics in result.tests.items():
        cells = "  ".join(f"{m} t={v['t']:+.2f} p={v['p']:.3g}" for m, v in metrics.items())
        print(f"{pair:<10} {cells}")


if __name__ == "__main__":
    main()
