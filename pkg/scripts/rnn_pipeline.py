#!/usr/bin/env python3
"""Recurrent-head experiment on top of a trained base checkpoint.

Extracts per-second features for every clip in a manifest, trains the
two-layer LSTM head with truncated backpropagation, and compares per-clip
predictions of the base model and the recurrent model on a split.

    python3 scripts/rnn_pipeline.py --checkpoint run/checkpoint_00299.ckpt \
        --manifest data/manifest.csv --epochs 150
"""

import argparse
import sys

import numpy as np

from avtrait import data as D
from avtrait import rnn_head as R
from avtrait import train as T
from avtrait.model import forward_infer


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--manifest", required=True)
    ap.add_argument("--split", default="validation")
    ap.add_argument("--epochs", type=int, default=150)
    ap.add_argument("--hidden", type=int, default=64, help="512 reproduces the production head")
    ap.add_argument("--trunc", type=int, default=15)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    ckpt = T.load_checkpoint(args.checkpoint)
    manifest = D.load_manifest(args.manifest)

    print("[1/3] extracting per-second features for the training split")
    sequences = []
    for row in manifest.split_rows("train"):
        clip = D.load_clip(manifest.clip_path(row))
        feats = R.extract_features(clip, ckpt.arch, ckpt.params)
        sequences.append((feats, row.traits.astype(np.float32)))
    input_dim = sequences[0][0].shape[1]

    print(f"[2/3] training the recurrent head ({args.hidden} units) for {args.epochs} epochs")
    head = R.build_rnn_head(args.seed, input_dim=input_dim, hidden=args.hidden, out_dim=5)
    config = R.RnnTrainConfig(epochs=args.epochs, seed=args.seed, trunc=args.trunc)
    losses = R.train_rnn(sequences, head, config)
    print(f"      final per-step train MAE {losses[-1]:.4f}")

    print(f"[3/3] comparing base vs recurrent predictions on '{args.split}'")
    base_err = np.zeros(5)
    rnn_err = np.zeros(5)
    rows = manifest.split_rows(args.split)
    for row in rows:
        clip = D.load_clip(manifest.clip_path(row))
        base_pred = forward_infer(ckpt.arch, ckpt.params, clip)
        rnn_pred = R.predict_rnn(clip, ckpt.arch, ckpt.params, head)
        base_err += np.abs(base_pred - row.traits)
        rnn_err += np.abs(rnn_pred - row.traits)
    n = len(rows)
    print(f"      base accuracy {1 - base_err.mean() / n:.4f}   rnn accuracy {1 - rnn_err.mean() / n:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
