#!/usr/bin/env python3
"""Regenerate the bundled corpus splits and trained reference checkpoint.

Run from the repository root:

    python3 scripts/build_assets.py [--steps N]

Training is deterministic; rerunning reproduces the committed files
byte for byte.
"""

import argparse
import pathlib
import sys
import time

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from gwq import assets
from gwq.container import write_container
from gwq.refmodel import TinyTransformerConfig, perplexity, train_reference
from gwq.textgen import generate_corpus

ASSET_DIR = pathlib.Path(__file__).resolve().parents[1] / "src" / "gwq" / "assets"

MODEL_CONFIG = TinyTransformerConfig(
    vocab_size=256, d_model=64, n_heads=4, n_layers=2, max_seq_len=96)
TRAIN_SEED = 7
TRAIN_STEPS = 1200
BATCH_SIZE = 12


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--steps", type=int, default=TRAIN_STEPS)
    args = parser.parse_args()

    ASSET_DIR.mkdir(parents=True, exist_ok=True)
    text = generate_corpus(assets.CORPUS_SEED, assets.CORPUS_CHARS)
    train = text[: assets.TRAIN_SPLIT]
    val = text[assets.TRAIN_SPLIT :]
    (ASSET_DIR / assets.TRAIN_FILE).write_text(train, encoding="utf-8")
    (ASSET_DIR / assets.VAL_FILE).write_text(val, encoding="utf-8")
    print(f"corpus: train {len(train)} chars, val {len(val)} chars")

    t0 = time.time()
    model = train_reference(MODEL_CONFIG, train, steps=args.steps, seed=TRAIN_SEED,
                            batch_size=BATCH_SIZE)
    print(f"trained {args.steps} steps in {time.time() - t0:.0f}s "
          f"final_loss={model.metadata['final_loss']}")
    write_container(model, ASSET_DIR / assets.MODEL_FILE)
    print(f"val ppl={perplexity(model, val):.4f} (untrained = {MODEL_CONFIG.vocab_size})")


if __name__ == "__main__":
    main()
