"""Training loop, evaluation protocol, per-trait fine-tuning, checkpoints.

Checkpoint container (little-endian):

    magic    8 bytes  b"DIChkpt1"
    version  u32
    epoch    u32      index of the last completed epoch
    count    u32      number of tensor records
    records  per tensor: u16 name length, name utf-8, u8 rank,
             rank * u32 extents, f32 row-major payload
    trailer  u32 length + bytes (json-encoded rng state; empty if none)

Network tensors use their manifest names; optimizer moments ride along
under "adam.m."/"adam.v." prefixes plus a scalar "adam.t"; a fine-tuned
single-trait head records its trait index as "meta.trait". Feature caches
reuse the same container with one "feat.<clip_id>" tensor per clip.

Round trips are bitwise lossless, and resuming from a checkpoint written
after epoch e reproduces the uninterrupted run's epoch e+1 exactly (the
data-order generator state is part of the checkpoint).
"""

from __future__ import annotations

import io
import json
import logging
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import (
    Clip,
    ClipFormatError,
    Manifest,
    ManifestRow,
    TRAITS,
    atomic_write_bytes,
    atomic_write_text,
    crop_audio,
    crop_frame,
    load_clip,
)
from .model import (
    Architecture,
    backward,
    build_network,
    forward_infer,
    forward_train,
    full_architecture,
    mini_architecture,
    param_manifest,
    trainable_names,
    with_out_dim,
)
from .optim import AdamState, LrSchedule, adam_step, init_adam, mae_loss

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DIChkpt1"
CHECKPOINT_VERSION = 1
_HEAD = struct.Struct("<8sIII")

FULL_AUDIO_CROP = 50176
FULL_FRAME_CROP = 224
MINI_AUDIO_CROP = 1024
MINI_FRAME_CROP = 32


class CheckpointError(ValueError):
    """Base for malformed checkpoint containers."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointManifestError(CheckpointError):
    pass


# ---------------------------------------------------------------------------
# tensor container

def write_tensor_container(path: str, named: dict, epoch: int = 0, trailer: bytes = b"") -> None:
    buf = io.BytesIO()
    buf.write(_HEAD.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, epoch, len(named)))
    for name in sorted(named):
        arr = np.ascontiguousarray(named[name], dtype="<f4")
        raw = name.encode("utf-8")
        if len(raw) >= 1 << 16 or arr.ndim >= 1 << 8 or arr.ndim < 1:
            raise CheckpointError(f"unserializable tensor {name!r} rank {arr.ndim}")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    buf.write(struct.pack("<I", len(trailer)))
    buf.write(trailer)
    atomic_write_bytes(path, buf.getvalue())


def read_tensor_container(path: str):
    """Returns (epoch, {name: float32 tensor}, trailer bytes)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEAD.size:
        raise CheckpointTruncatedError(f"{path}: shorter than the header")
    magic, version, epoch, count = _HEAD.unpack_from(blob, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointMagicError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: version {version}, expected {CHECKPOINT_VERSION}")
    named = {}
    off = _HEAD.size
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off : off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            n = 1
            for s in shape:
                if s < 1:
                    raise CheckpointError(f"{path}: zero extent in {name!r}")
                n *= s
            end = off + 4 * n
            if end > len(blob):
                raise CheckpointTruncatedError(f"{path}: tensor {name!r} runs past end of file")
            named[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape).copy()
            off = end
        (trailer_len,) = struct.unpack_from("<I", blob, off)
        off += 4
    except struct.error:
        raise CheckpointTruncatedError(f"{path}: header fields run past end of file") from None
    if off + trailer_len != len(blob):
        raise CheckpointTruncatedError(f"{path}: length {len(blob)} != implied {off + trailer_len}")
    return epoch, named, blob[off : off + trailer_len]


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    epoch: int
    params: dict
    adam: Optional[AdamState]
    rng_state: Optional[dict]
    arch: Architecture
    mini: bool
    trait: Optional[int] = None


def save_checkpoint(
    path: str,
    epoch: int,
    params: dict,
    adam: Optional[AdamState] = None,
    rng: Optional[np.random.Generator] = None,
    trait: Optional[int] = None,
) -> None:
    named = dict(params)
    if adam is not None:
        for name, m in adam.m.items():
            named[f"adam.m.{name}"] = m
            named[f"adam.v.{name}"] = adam.v[name]
        named["adam.t"] = np.array([adam.t], dtype=np.float32)
    if trait is not None:
        named["meta.trait"] = np.array([trait], dtype=np.float32)
    trailer = b""
    if rng is not None:
        trailer = json.dumps(rng.bit_generator.state).encode("utf-8")
    write_tensor_container(path, named, epoch=epoch, trailer=trailer)


def _infer_architecture(params: dict):
    for mini in (False, True):
        for out_dim in (5, 1):
            arch = (mini_architecture if mini else full_architecture)(out_dim=out_dim)
            manifest = param_manifest(arch)
            if set(manifest) == set(params) and all(params[n].shape == s for n, s in manifest.items()):
                return arch, mini
    raise CheckpointManifestError("tensor names/shapes match no known architecture")


def load_checkpoint(path: str) -> Checkpoint:
    epoch, named, trailer = read_tensor_container(path)
    params = {}
    moments_m = {}
    moments_v = {}
    t = 0
    trait = None
    for name, arr in named.items():
        if name.startswith("adam.m."):
            moments_m[name[len("adam.m.") :]] = arr
        elif name.startswith("adam.v."):
            moments_v[name[len("adam.v.") :]] = arr
        elif name == "adam.t":
            t = int(arr[0])
        elif name == "meta.trait":
            trait = int(arr[0])
        else:
            params[name] = arr
    arch, mini = _infer_architecture(params)
    adam = None
    if moments_m:
        trainable = set(trainable_names(arch))
        if set(moments_m) != trainable or set(moments_v) != trainable:
            raise CheckpointManifestError(f"{path}: optimizer moments do not cover the trainable set")
        adam = AdamState(m=moments_m, v=moments_v, t=t)
    rng_state = json.loads(trailer.decode("utf-8")) if trailer else None
    return Checkpoint(epoch=epoch, params=params, adam=adam, rng_state=rng_state, arch=arch, mini=mini, trait=trait)


# ---------------------------------------------------------------------------
# configuration

@dataclass
class TrainConfig:
    epochs: int = 900
    batch_size: int = 32
    seed: int = 0
    checkpoint_every: int = 100
    out_dir: str = "run"
    mini: bool = False
    audio_crop: Optional[int] = None
    frame_crop: Optional[int] = None
    initial_alpha: float = 2e-4
    lr_decay_factor: float = 10.0
    lr_period: int = 300
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm needs real statistics)")

    @property
    def crops(self):
        audio = self.audio_crop if self.audio_crop is not None else (MINI_AUDIO_CROP if self.mini else FULL_AUDIO_CROP)
        frame = self.frame_crop if self.frame_crop is not None else (MINI_FRAME_CROP if self.mini else FULL_FRAME_CROP)
        return audio, frame

    @property
    def schedule(self) -> LrSchedule:
        return LrSchedule(self.initial_alpha, self.lr_decay_factor, self.lr_period)


@dataclass
class TrainResult:
    arch: Architecture
    params: dict
    adam: AdamState
    epoch: int
    losses: list  # (epoch, alpha, train_mae)
    checkpoint_path: str
    out_dir: str


# ---------------------------------------------------------------------------
# training

def _load_row_clip(manifest: Manifest, row: ManifestRow, cache: dict) -> Clip:
    clip = cache.get(row.clip_id)
    if clip is None:
        clip = load_clip(manifest.clip_path(row))
        cache[row.clip_id] = clip
    return clip


def _loss_log_text(losses) -> str:
    lines = ["epoch,alpha,train_mae"]
    lines += [f"{e},{a:.8g},{m:.6f}" for e, a, m in losses]
    return "\n".join(lines) + "\n"


def _read_loss_log(path: str, up_to_epoch: int) -> list:
    if not os.path.exists(path):
        return []
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        next(fh, None)
        for line in fh:
            e, a, m = line.strip().split(",")
            if int(e) <= up_to_epoch:
                out.append((int(e), float(a), float(m)))
    return out


def _run_epochs(
    arch: Architecture,
    params: dict,
    adam: AdamState,
    rng: np.random.Generator,
    config: TrainConfig,
    manifest: Manifest,
    rows: list,
    start_epoch: int,
    losses: list,
    trait: Optional[int],
) -> str:
    audio_crop, frame_crop = config.crops
    schedule = config.schedule
    cache: dict = {}
    out_dir = config.out_dir
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "loss_log.csv")
    ckpt_path = ""

    def checkpoint(epoch: int) -> str:
        path = os.path.join(out_dir, f"checkpoint_{epoch:05d}.ckpt")
        save_checkpoint(path, epoch, params, adam, rng, trait=trait)
        atomic_write_text(log_path, _loss_log_text(losses))
        return path

    for epoch in range(start_epoch, config.epochs):
        adam.alpha = schedule.alpha_for_epoch(epoch)
        order = rng.permutation(len(rows))
        abs_sum = 0.0
        n_seen = 0
        for lo in range(0, len(rows), config.batch_size):
            ids = order[lo : lo + config.batch_size]
            if len(ids) < 2:
                break  # a 1-sample tail has no batch statistics
            audios, frames, labels = [], [], []
            for j in ids:
                row = rows[int(j)]
                clip = _load_row_clip(manifest, row, cache)
                audios.append(crop_audio(clip, rng, audio_crop))
                frames.append(crop_frame(clip, rng, frame_crop))
                labels.append(row.traits if trait is None else row.traits[[trait]])
            batch_audio = np.stack(audios)
            batch_frames = np.stack(frames)
            target = np.stack(labels).astype(np.float32)
            pred, tape = forward_train(arch, params, batch_audio, batch_frames, audio_crop, frame_crop)
            loss, dpred = mae_loss(pred, target)
            grads = backward(tape, dpred)
            adam_step(params, grads, adam)
            abs_sum += loss * pred.size
            n_seen += pred.size
        losses.append((epoch, adam.alpha, abs_sum / n_seen))
        if (epoch + 1) % config.checkpoint_every == 0 or epoch == config.epochs - 1:
            ckpt_path = checkpoint(epoch)
    if not ckpt_path:
        ckpt_path = checkpoint(config.epochs - 1)
    return ckpt_path


def train(config: TrainConfig, manifest: Manifest, resume: Optional[str] = None) -> TrainResult:
    """Train the challenge model; fully determined by (seed, config, dataset)."""
    arch = mini_architecture() if config.mini else full_architecture()
    rows = manifest.split_rows("train")
    if len(rows) < config.batch_size:
        raise ValueError(f"need >= batch_size ({config.batch_size}) training clips, have {len(rows)}")

    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.mini != config.mini or ckpt.arch.out_dim != 5:
            raise CheckpointManifestError(f"{resume}: checkpoint architecture does not match the run config")
        if ckpt.adam is None or ckpt.rng_state is None:
            raise CheckpointError(f"{resume}: checkpoint lacks optimizer/rng state, cannot resume")
        params = ckpt.params
        adam = ckpt.adam
        adam.beta1, adam.beta2, adam.epsilon = config.beta1, config.beta2, config.epsilon
        rng = np.random.Generator(np.random.PCG64())
        rng.bit_generator.state = ckpt.rng_state
        start_epoch = ckpt.epoch + 1
        losses = _read_loss_log(os.path.join(config.out_dir, "loss_log.csv"), ckpt.epoch)
    else:
        init_ss, data_ss = np.random.SeedSequence(config.seed).spawn(2)
        params = build_network(arch, init_ss)
        adam = init_adam(params, trainable_names(arch), config.initial_alpha, config.beta1, config.beta2, config.epsilon)
        rng = np.random.Generator(np.random.PCG64(data_ss))
        start_epoch = 0
        losses = []

    ckpt_path = _run_epochs(arch, params, adam, rng, config, manifest, rows, start_epoch, losses, trait=None)
    return TrainResult(arch, params, adam, config.epochs - 1, losses, ckpt_path, config.out_dir)


def finetune_per_trait(base: Checkpoint, trait: int, config: TrainConfig, manifest: Manifest) -> TrainResult:
    """Warm-start from a trained challenge model, swap in a fresh 1-output head."""
    if not 0 <= trait < len(TRAITS):
        raise ValueError(f"trait index must be in [0, {len(TRAITS)}), got {trait}")
    if base.arch.out_dim != 5:
        raise ValueError("fine-tuning starts from a 5-trait challenge checkpoint")
    if base.mini != config.mini:
        raise CheckpointManifestError("checkpoint and config disagree about the miniature flag")
    arch = with_out_dim(base.arch, 1)
    rows = manifest.split_rows("train")
    if len(rows) < config.batch_size:
        raise ValueError(f"need >= batch_size ({config.batch_size}) training clips, have {len(rows)}")

    init_ss, data_ss = np.random.SeedSequence(config.seed).spawn(2)
    head = build_network(arch, init_ss)  # only its fusion tensors are used
    params = {n: v.copy() for n, v in base.params.items() if not n.startswith("fusion.")}
    params["fusion.w"] = head["fusion.w"]
    params["fusion.b"] = head["fusion.b"]
    adam = init_adam(params, trainable_names(arch), config.initial_alpha, config.beta1, config.beta2, config.epsilon)
    rng = np.random.Generator(np.random.PCG64(data_ss))

    losses: list = []
    ckpt_path = _run_epochs(arch, params, adam, rng, config, manifest, rows, 0, losses, trait=trait)
    return TrainResult(arch, params, adam, config.epochs - 1, losses, ckpt_path, config.out_dir)


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalReport:
    per_trait: np.ndarray  # (5,) accuracies, trait order as in the manifest header
    average: float
    clips: int
    excluded: int

    def csv(self) -> str:
        header = "average," + ",".join(TRAITS) + ",clips,excluded"
        vals = [f"{self.average:.6f}"] + [f"{v:.6f}" for v in self.per_trait]
        return header + "\n" + ",".join(vals + [str(self.clips), str(self.excluded)]) + "\n"


def aggregate_accuracies(per_trait) -> float:
    """Challenge aggregation rule: the average of the five per-trait accuracies."""
    per_trait = np.asarray(per_trait, dtype=np.float64)
    return float(per_trait.mean())


def predict_rows(arch, params, manifest: Manifest, rows, frame_stride: int = 1, threads: int = 1):
    """Whole-clip predictions in manifest order; None marks unreadable clips."""

    def one(row):
        try:
            clip = load_clip(manifest.clip_path(row))
        except (OSError, ClipFormatError) as exc:
            log.warning("skipping clip %s: %s", row.clip_id, exc)
            return row, None
        return row, forward_infer(arch, params, clip, frame_stride=frame_stride)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, rows))
    return [one(row) for row in rows]


def evaluate(arch, params, manifest: Manifest, split: str = "validation", frame_stride: int = 1, threads: int = 1) -> EvalReport:
    """Full-clip protocol: accuracy_k = 1 - mean |pred_k - target_k|."""
    rows = manifest.split_rows(split)
    if not rows:
        raise ValueError(f"split {split!r} is empty")
    if arch.out_dim != 5:
        raise ValueError("evaluate needs a 5-trait head; use evaluate_single_trait for fine-tuned models")
    err = np.zeros(5, dtype=np.float64)
    n = 0
    excluded = 0
    for row, pred in predict_rows(arch, params, manifest, rows, frame_stride, threads):
        if pred is None:
            excluded += 1
            continue
        err += np.abs(pred.astype(np.float64) - row.traits)
        n += 1
    if n == 0:
        raise ValueError(f"no readable clips in split {split!r}")
    per_trait = 1.0 - err / n
    return EvalReport(per_trait=per_trait, average=aggregate_accuracies(per_trait), clips=n, excluded=excluded)


def evaluate_single_trait(arch, params, trait: int, manifest: Manifest, split: str = "train", frame_stride: int = 1):
    """Accuracy of a 1-output head on one trait; returns (accuracy, clips, excluded)."""
    if arch.out_dim != 1:
        raise ValueError("single-trait evaluation expects a 1-output head")
    rows = manifest.split_rows(split)
    if not rows:
        raise ValueError(f"split {split!r} is empty")
    err = 0.0
    n = 0
    excluded = 0
    for row, pred in predict_rows(arch, params, manifest, rows, frame_stride):
        if pred is None:
            excluded += 1
            continue
        err += abs(float(pred[0]) - float(row.traits[trait]))
        n += 1
    if n == 0:
        raise ValueError(f"no readable clips in split {split!r}")
    return 1.0 - err / n, n, excluded
