"""Command-line surface tying the modules into reproducible runs.

Subcommands: synth, train, eval, predict, finetune, extract-features,
train-rnn, predict-rnn, gradcheck. Every command accepts --seed, --threads
and --config; all stochastic behavior flows from the seed. An optional
config file holds plain ``key = value`` lines; explicit flags override it.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import data as D
from . import rnn_head as R
from . import train as T
from .gradcheck import run_gradcheck
from .model import forward_infer
from .optim import NonFiniteGradientError  # noqa: F401  (subclass of FloatingPointError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_config_value(raw: str):
    raw = raw.strip()
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw


def read_config_file(path: str) -> dict:
    """Plain `key = value` lines; '#' starts a comment."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise D.ManifestError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            out[key.strip()] = _parse_config_value(value)
    return out


class Settings:
    """Flag > config file > default, per key."""

    def __init__(self, args, config: dict):
        self.args = args
        self.config = config

    def get(self, key: str, default=None):
        v = getattr(self.args, key, None)
        if v is None:
            v = self.config.get(key, default)
        return v


def _threads(settings: Settings) -> int:
    v = settings.get("threads")
    if v is None:
        v = os.environ.get("DI_THREADS", "1")
    n = int(v)
    if n < 1:
        raise UsageError("--threads must be >= 1")
    return n


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    p.add_argument("--threads", type=int, default=None, help="worker cap (env DI_THREADS as fallback)")
    p.add_argument("--config", default=None, help="key = value config file; flags override it")


def build_parser() -> _Parser:
    parser = _Parser(prog="avtrait", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--val-n", dest="val_n", type=int, default=None)
    p.add_argument("--test-n", dest="test_n", type=int, default=None)
    p.add_argument("--seconds", type=float, default=None)
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--width", type=int, default=None)

    p = sub.add_parser("train", help="train the challenge model")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--mini", action="store_true", default=None)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=None)
    p.add_argument("--resume", default=None)

    p = sub.add_parser("eval", help="full-clip evaluation of a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default=None, choices=list(D.SPLITS))
    p.add_argument("--frame-stride", dest="frame_stride", type=int, default=None)
    p.add_argument("--out", default=None, help="report CSV (default: next to the checkpoint)")

    p = sub.add_parser("predict", help="one trait line per clip")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default=None, choices=list(D.SPLITS) + ["all"])
    p.add_argument("--frame-stride", dest="frame_stride", type=int, default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("finetune", help="per-trait fine-tuning from a base checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--trait", required=True, help="index 0-4 or trait name")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--mini", action="store_true", default=None)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=None)

    p = sub.add_parser("extract-features", help="per-second pooled features for the recurrent head")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default=None, choices=list(D.SPLITS) + ["all"])
    p.add_argument("--out", required=True, help="feature cache file")

    p = sub.add_parser("train-rnn", help="train the recurrent head on cached features")
    _add_common(p)
    p.add_argument("--features", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="head checkpoint file")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--trunc", type=int, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--hidden", type=int, default=None)

    p = sub.add_parser("predict-rnn", help="recurrent-head predictions, one line per clip")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="base network checkpoint")
    p.add_argument("--rnn-head", dest="rnn_head", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default=None, choices=list(D.SPLITS) + ["all"])
    p.add_argument("--out", default=None)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    _add_common(p)
    p.add_argument("--mini", action="store_true", default=None, help="include the full miniature-network check")

    return parser


# ---------------------------------------------------------------------------
# command bodies

def _rows_for(manifest: D.Manifest, split):
    if split in (None, "all"):
        return manifest.rows
    return manifest.split_rows(split)


def _trait_index(raw: str) -> int:
    if raw in D.TRAITS:
        return D.TRAITS.index(raw)
    try:
        idx = int(raw)
    except ValueError:
        raise UsageError(f"--trait must be an index or one of {D.TRAITS}") from None
    if not 0 <= idx < 5:
        raise ValueError(f"trait index out of range: {idx}")
    return idx


def _train_config(s: Settings, out_dir: str, mini) -> T.TrainConfig:
    return T.TrainConfig(
        epochs=int(s.get("epochs", 900)),
        batch_size=int(s.get("batch_size", 32)),
        seed=int(s.get("seed", 0)),
        checkpoint_every=int(s.get("checkpoint_every", 100)),
        out_dir=out_dir,
        mini=bool(mini),
        audio_crop=s.get("audio_crop"),
        frame_crop=s.get("frame_crop"),
        initial_alpha=float(s.get("initial_alpha", 2e-4)),
        lr_decay_factor=float(s.get("lr_decay_factor", 10.0)),
        lr_period=int(s.get("lr_period", 300)),
        beta1=float(s.get("beta1", 0.5)),
        beta2=float(s.get("beta2", 0.999)),
        epsilon=float(s.get("epsilon", 1e-8)),
    )


def _cmd_synth(s: Settings) -> int:
    manifest = D.synth_dataset(
        n=int(s.get("n")),
        seed=int(s.get("seed", 0)),
        out_dir=s.get("out"),
        val_count=int(s.get("val_n", 0)),
        test_count=int(s.get("test_n", 0)),
        seconds=float(s.get("seconds", 2.0)),
        height=int(s.get("height", 48)),
        width=int(s.get("width", 48)),
    )
    print(f"wrote {len(manifest.rows)} clips and manifest.csv under {s.get('out')}")
    return 0


def _cmd_train(s: Settings) -> int:
    manifest = D.load_manifest(s.get("manifest"))
    config = _train_config(s, s.get("out"), s.get("mini", False))
    result = T.train(config, manifest, resume=s.get("resume"))
    last_epoch, alpha, mae = result.losses[-1]
    print(f"epoch {last_epoch} alpha {alpha:.8g} train_mae {mae:.6f}")
    print(f"checkpoint {result.checkpoint_path}")
    return 0


def _cmd_eval(s: Settings) -> int:
    ckpt = T.load_checkpoint(s.get("checkpoint"))
    manifest = D.load_manifest(s.get("manifest"))
    split = s.get("split", "validation")
    stride = int(s.get("frame_stride", 1))
    if ckpt.arch.out_dim == 1:
        if ckpt.trait is None:
            raise ValueError("single-output checkpoint lacks a trait tag")
        acc, n, excluded = T.evaluate_single_trait(ckpt.arch, ckpt.params, ckpt.trait, manifest, split, stride)
        print(f"trait,{D.TRAITS[ckpt.trait]},accuracy,{acc:.6f},clips,{n},excluded,{excluded}")
        return 0
    report = T.evaluate(ckpt.arch, ckpt.params, manifest, split, stride, threads=_threads(s))
    text = report.csv()
    out = s.get("out") or os.path.join(os.path.dirname(os.path.abspath(s.get("checkpoint"))), f"eval_{split}.csv")
    D.atomic_write_text(out, text)
    sys.stdout.write(text)
    return 0


def _format_pred_line(clip_id: str, pred) -> str:
    return clip_id + "," + ",".join(f"{float(v):.6f}" for v in pred)


def _cmd_predict(s: Settings) -> int:
    ckpt = T.load_checkpoint(s.get("checkpoint"))
    if ckpt.arch.out_dim != 5:
        raise ValueError("predict needs a 5-trait checkpoint")
    manifest = D.load_manifest(s.get("manifest"))
    rows = _rows_for(manifest, s.get("split"))
    stride = int(s.get("frame_stride", 1))
    lines = []
    for row, pred in T.predict_rows(ckpt.arch, ckpt.params, manifest, rows, stride, threads=_threads(s)):
        if pred is None:
            raise D.ClipFormatError(f"clip {row.clip_id} unreadable")
        lines.append(_format_pred_line(row.clip_id, pred))
    text = "\n".join(lines) + "\n"
    if s.get("out"):
        D.atomic_write_text(s.get("out"), text)
    sys.stdout.write(text)
    return 0


def _cmd_finetune(s: Settings) -> int:
    base = T.load_checkpoint(s.get("checkpoint"))
    trait = _trait_index(str(s.get("trait")))
    manifest = D.load_manifest(s.get("manifest"))
    mini = s.get("mini", False) or base.mini
    config = _train_config(s, s.get("out"), mini)
    result = T.finetune_per_trait(base, trait, config, manifest)
    last_epoch, alpha, mae = result.losses[-1]
    print(f"trait {D.TRAITS[trait]} epoch {last_epoch} train_mae {mae:.6f}")
    print(f"checkpoint {result.checkpoint_path}")
    return 0


def _cmd_extract_features(s: Settings) -> int:
    ckpt = T.load_checkpoint(s.get("checkpoint"))
    if ckpt.arch.out_dim != 5:
        raise ValueError("feature extraction uses the 5-trait base network")
    manifest = D.load_manifest(s.get("manifest"))
    rows = _rows_for(manifest, s.get("split"))
    named = {}
    for row in rows:
        clip = D.load_clip(manifest.clip_path(row))
        named[f"feat.{row.clip_id}"] = R.extract_features(clip, ckpt.arch, ckpt.params)
    T.write_tensor_container(s.get("out"), named)
    print(f"wrote {len(named)} feature sequences to {s.get('out')}")
    return 0


def load_feature_cache(path: str) -> dict:
    _, named, _ = T.read_tensor_container(path)
    out = {}
    for name, arr in named.items():
        if not name.startswith("feat.") or arr.ndim != 2:
            raise T.CheckpointManifestError(f"{path}: unexpected tensor {name!r} in feature cache")
        out[name[len("feat.") :]] = arr
    return out


def _cmd_train_rnn(s: Settings) -> int:
    feats = load_feature_cache(s.get("features"))
    manifest = D.load_manifest(s.get("manifest"))
    labels = {row.clip_id: row.traits.astype(np.float32) for row in manifest.rows}
    sequences = []
    for clip_id in sorted(feats):
        if clip_id not in labels:
            raise D.ManifestError(f"feature cache clip {clip_id!r} missing from manifest")
        sequences.append((feats[clip_id], labels[clip_id]))
    if not sequences:
        raise D.ManifestError("feature cache is empty")
    input_dim = sequences[0][0].shape[1]
    hidden = int(s.get("hidden", R.RNN_HIDDEN))
    config = R.RnnTrainConfig(
        epochs=int(s.get("epochs", 100)),
        seed=int(s.get("seed", 0)),
        trunc=int(s.get("trunc", R.TRUNCATION)),
        dropout=float(s.get("dropout", R.DROPOUT_RATE)),
        alpha=float(s.get("alpha", 2e-4)),
    )
    params = R.build_rnn_head(config.seed, input_dim=input_dim, hidden=hidden, out_dim=5)
    losses = R.train_rnn(sequences, params, config)
    T.write_tensor_container(s.get("out"), params)
    print(f"epoch {len(losses) - 1} train_mae {losses[-1]:.6f}")
    print(f"rnn head {s.get('out')}")
    return 0


def _cmd_predict_rnn(s: Settings) -> int:
    ckpt = T.load_checkpoint(s.get("checkpoint"))
    if ckpt.arch.out_dim != 5:
        raise ValueError("predict-rnn uses the 5-trait base network")
    _, head, _ = T.read_tensor_container(s.get("rnn_head"))
    R.head_dims(head)
    manifest = D.load_manifest(s.get("manifest"))
    rows = _rows_for(manifest, s.get("split"))
    lines = []
    for row in rows:
        clip = D.load_clip(manifest.clip_path(row))
        pred = R.predict_rnn(clip, ckpt.arch, ckpt.params, head)
        lines.append(_format_pred_line(row.clip_id, pred))
    text = "\n".join(lines) + "\n"
    if s.get("out"):
        D.atomic_write_text(s.get("out"), text)
    sys.stdout.write(text)
    return 0


def _cmd_gradcheck(s: Settings) -> int:
    rows, ok = run_gradcheck(include_network=bool(s.get("mini", False)), seed=int(s.get("seed", 0)))
    print(f"{'layer':30s} {'max_rel_err':>12s} {'tolerance':>10s} result")
    for r in rows:
        print(f"{r.name:30s} {r.max_rel_err:12.3e} {r.tolerance:10.0e} {'pass' if r.passed else 'FAIL'}")
    if not ok:
        print("gradient check FAILED", file=sys.stderr)
        return 3
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "finetune": _cmd_finetune,
    "extract-features": _cmd_extract_features,
    "train-rnn": _cmd_train_rnn,
    "predict-rnn": _cmd_predict_rnn,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = read_config_file(args.config) if getattr(args, "config", None) else {}
        settings = Settings(args, config)
        return _COMMANDS[args.command](settings)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
