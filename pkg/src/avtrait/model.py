"""Two-stream residual network: assembly, training forward/backward, inference.

Each stream is a 17-conv-layer residual stack (one stem convolution plus
eight two-conv residual blocks in the full configuration) with the halved
channel plan 32; 32,32; 64,64; 128,128; 256,256. The auditory stream uses
1-d geometry, the visual stream 2-d; kernels and strides correspond as
k^2 <-> k x k and s^2 <-> s x s:

    stage        visual k/s/p     auditory k/s/p   channels
    stem conv    7x7 / 2 / 3      49 / 4 / 24      32
    stem pool    3x3 / 2 / 1       9 / 4 / 4       --
    stage 1      3x3 / 1 / 1       9 / 1 / 4       32
    stage 2..4   3x3 / {2,1} / 1   9 / {4,1} / 4   64,128,256

The first block of stages 2-4 downsamples and projects its shortcut with a
1-extent-kernel convolution at the stage stride; every other block uses an
identity shortcut. Stream outputs are globally average-pooled, concatenated
(256 + 256 = 512 in the full model) and fed through one fully-connected
layer whose outputs are squashed to (0, 1) by a scaled tanh.

The miniature configuration divides all channel counts by 8 and keeps one
block per stage; it exists for desk-scale runs and shares every code path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .data import Clip
from .layers import (
    BatchNormState,
    ConvSpec,
    ResidualBlockParams,
    batchnorm_backward,
    batchnorm_forward,
    conv_backward,
    conv_forward,
    global_average_pool,
    global_average_pool_backward,
    linear_backward,
    linear_forward,
    maxpool_backward,
    maxpool_forward,
    relu_backward,
    relu_forward,
    residual_block_backward,
    residual_block_forward,
    scaled_tanh,
    scaled_tanh_backward,
)
from .tensor import ShapeMismatchError

BN_MOMENTUM = 0.9
BN_EPSILON = 1e-5
MIN_AUDIO_SAMPLES = 1024  # one valid output after the streams' total stride


@dataclass(frozen=True)
class StreamSpec:
    ndim: int
    in_channels: int
    stem_channels: int
    stem_kernel: tuple
    stem_stride: tuple
    stem_padding: tuple
    pool_kernel: tuple
    pool_stride: tuple
    pool_padding: tuple
    stage_channels: tuple
    stage_strides: tuple
    blocks_per_stage: int
    block_kernel: tuple
    block_padding: tuple


@dataclass(frozen=True)
class Architecture:
    auditory: StreamSpec
    visual: StreamSpec
    out_dim: int = 5

    @property
    def fusion_in(self) -> int:
        return self.auditory.stage_channels[-1] + self.visual.stage_channels[-1]


def full_architecture(out_dim: int = 5, visual_in_channels: int = 3) -> Architecture:
    auditory = StreamSpec(
        ndim=1,
        in_channels=1,
        stem_channels=32,
        stem_kernel=(49,),
        stem_stride=(4,),
        stem_padding=(24,),
        pool_kernel=(9,),
        pool_stride=(4,),
        pool_padding=(4,),
        stage_channels=(32, 64, 128, 256),
        stage_strides=((1,), (4,), (4,), (4,)),
        blocks_per_stage=2,
        block_kernel=(9,),
        block_padding=(4,),
    )
    visual = StreamSpec(
        ndim=2,
        in_channels=visual_in_channels,
        stem_channels=32,
        stem_kernel=(7, 7),
        stem_stride=(2, 2),
        stem_padding=(3, 3),
        pool_kernel=(3, 3),
        pool_stride=(2, 2),
        pool_padding=(1, 1),
        stage_channels=(32, 64, 128, 256),
        stage_strides=((1, 1), (2, 2), (2, 2), (2, 2)),
        blocks_per_stage=2,
        block_kernel=(3, 3),
        block_padding=(1, 1),
    )
    return Architecture(auditory=auditory, visual=visual, out_dim=out_dim)


def mini_architecture(out_dim: int = 5, visual_in_channels: int = 3) -> Architecture:
    """Channel plan / 8, one block per stage; strides and kernels unchanged."""
    full = full_architecture(out_dim=out_dim, visual_in_channels=visual_in_channels)

    def shrink(stream: StreamSpec) -> StreamSpec:
        return replace(
            stream,
            stem_channels=stream.stem_channels // 8,
            stage_channels=tuple(c // 8 for c in stream.stage_channels),
            blocks_per_stage=1,
        )

    return Architecture(auditory=shrink(full.auditory), visual=shrink(full.visual), out_dim=out_dim)


def with_out_dim(arch: Architecture, out_dim: int) -> Architecture:
    return replace(arch, out_dim=out_dim)


# ---------------------------------------------------------------------------
# parameter naming and construction

def _unit_stride(ndim: int) -> tuple:
    return (1,) * ndim


def _block_layout(stream: StreamSpec):
    """Yield (name, in_channels, out_channels, stride, kind) per residual block."""
    in_ch = stream.stem_channels
    for si, (ch, first_stride) in enumerate(zip(stream.stage_channels, stream.stage_strides), start=1):
        for bi in range(1, stream.blocks_per_stage + 1):
            stride = tuple(first_stride) if bi == 1 else _unit_stride(stream.ndim)
            kind = "identity" if (stride == _unit_stride(stream.ndim) and in_ch == ch) else "projection"
            yield f"stage{si}.block{bi}", in_ch, ch, stride, kind
            in_ch = ch


def _stream_manifest(stream: StreamSpec, prefix: str):
    entries = []
    c = stream.stem_channels
    entries.append((f"{prefix}.stem.conv.w", (c, stream.in_channels) + stream.stem_kernel))
    entries.append((f"{prefix}.stem.conv.b", (c,)))
    for suffix in ("gamma", "beta", "running_mean", "running_var"):
        entries.append((f"{prefix}.stem.bn.{suffix}", (c,)))
    for name, in_ch, out_ch, stride, kind in _block_layout(stream):
        base = f"{prefix}.{name}"
        entries.append((f"{base}.conv1.w", (out_ch, in_ch) + stream.block_kernel))
        entries.append((f"{base}.conv1.b", (out_ch,)))
        for suffix in ("gamma", "beta", "running_mean", "running_var"):
            entries.append((f"{base}.bn1.{suffix}", (out_ch,)))
        entries.append((f"{base}.conv2.w", (out_ch, out_ch) + stream.block_kernel))
        entries.append((f"{base}.conv2.b", (out_ch,)))
        for suffix in ("gamma", "beta", "running_mean", "running_var"):
            entries.append((f"{base}.bn2.{suffix}", (out_ch,)))
        if kind == "projection":
            entries.append((f"{base}.shortcut.w", (out_ch, in_ch) + (1,) * stream.ndim))
            entries.append((f"{base}.shortcut.b", (out_ch,)))
    return entries


def param_manifest(arch: Architecture) -> dict:
    """Ordered name -> shape map for every tensor the network owns."""
    entries = []
    entries.extend(_stream_manifest(arch.auditory, "auditory"))
    entries.extend(_stream_manifest(arch.visual, "visual"))
    entries.append(("fusion.w", (arch.fusion_in, arch.out_dim)))
    entries.append(("fusion.b", (arch.out_dim,)))
    return dict(entries)


def trainable_names(arch: Architecture) -> list:
    return [n for n in param_manifest(arch) if not n.endswith(("running_mean", "running_var"))]


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


def build_network(arch: Architecture, seed, dtype=np.float32) -> dict:
    """Fresh parameters: He-normal weights, zero biases, unit batch norm."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params = {}
    for name, shape in param_manifest(arch).items():
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:])) if name != "fusion.w" else shape[0]
            params[name] = he_normal(rng, shape, fan_in, dtype)
        elif name.endswith((".gamma", ".running_var")):
            params[name] = np.ones(shape, dtype=dtype)
        else:  # biases, beta, running_mean
            params[name] = np.zeros(shape, dtype=dtype)
    return params


def validate_params(arch: Architecture, params: dict) -> None:
    manifest = param_manifest(arch)
    missing = sorted(set(manifest) - set(params))
    extra = sorted(set(params) - set(manifest))
    if missing or extra:
        raise ValueError(f"parameter manifest mismatch: missing={missing[:4]} extra={extra[:4]}")
    for name, shape in manifest.items():
        if params[name].shape != shape:
            raise ShapeMismatchError(f"parameter {name}", params[name].shape, shape)


# ---------------------------------------------------------------------------
# stream execution

def _bn_state(params: dict, prefix: str) -> BatchNormState:
    return BatchNormState(
        gamma=params[f"{prefix}.gamma"],
        beta=params[f"{prefix}.beta"],
        running_mean=params[f"{prefix}.running_mean"],
        running_var=params[f"{prefix}.running_var"],
        momentum=BN_MOMENTUM,
        epsilon=BN_EPSILON,
    )


def _stem_spec(stream: StreamSpec) -> ConvSpec:
    return ConvSpec(
        kernel=stream.stem_kernel,
        stride=stream.stem_stride,
        padding=stream.stem_padding,
        in_channels=stream.in_channels,
        out_channels=stream.stem_channels,
    )


def _pool_spec(stream: StreamSpec) -> ConvSpec:
    return ConvSpec(kernel=stream.pool_kernel, stride=stream.pool_stride, padding=stream.pool_padding)


def _block_params(stream: StreamSpec, prefix: str, name: str, in_ch, out_ch, stride, kind, params) -> ResidualBlockParams:
    base = f"{prefix}.{name}"
    spec1 = ConvSpec(stream.block_kernel, stride, stream.block_padding, in_ch, out_ch)
    spec2 = ConvSpec(stream.block_kernel, _unit_stride(stream.ndim), stream.block_padding, out_ch, out_ch)
    blk = ResidualBlockParams(
        kind=kind,
        conv1_w=params[f"{base}.conv1.w"],
        conv1_b=params[f"{base}.conv1.b"],
        bn1=_bn_state(params, f"{base}.bn1"),
        spec1=spec1,
        conv2_w=params[f"{base}.conv2.w"],
        conv2_b=params[f"{base}.conv2.b"],
        bn2=_bn_state(params, f"{base}.bn2"),
        spec2=spec2,
        shortcut_w=params.get(f"{base}.shortcut.w"),
        shortcut_b=params.get(f"{base}.shortcut.b"),
        shortcut_spec=(
            ConvSpec((1,) * stream.ndim, stride, (0,) * stream.ndim, in_ch, out_ch)
            if kind == "projection"
            else None
        ),
    )
    return blk


def forward_stream(x: np.ndarray, stream: StreamSpec, prefix: str, params: dict, mode: str):
    """Run one stream to its pooled feature vector; returns ((B, C), tape)."""
    tape = []
    y, cache = conv_forward(x, params[f"{prefix}.stem.conv.w"], params[f"{prefix}.stem.conv.b"], _stem_spec(stream))
    tape.append(("conv", f"{prefix}.stem.conv", cache))
    y, cache = batchnorm_forward(y, _bn_state(params, f"{prefix}.stem.bn"), mode)
    tape.append(("bn", f"{prefix}.stem.bn", cache))
    y, cache = relu_forward(y)
    tape.append(("relu", None, cache))
    y, cache = maxpool_forward(y, _pool_spec(stream))
    tape.append(("maxpool", None, cache))
    for name, in_ch, out_ch, stride, kind in _block_layout(stream):
        blk = _block_params(stream, prefix, name, in_ch, out_ch, stride, kind, params)
        y, cache = residual_block_forward(y, blk, mode)
        tape.append(("block", f"{prefix}.{name}", cache))
    y, cache = global_average_pool(y)
    tape.append(("gap", None, cache))
    return y, tape


def backward_stream(tape, grad_feat: np.ndarray):
    """Walk a stream tape in reverse; returns (param grads, input grad)."""
    grads = {}
    g = grad_feat
    for kind, name, cache in reversed(tape):
        if kind == "gap":
            g = global_average_pool_backward(cache, g)
        elif kind == "block":
            bgrads, g = residual_block_backward(cache, g)
            for key, val in bgrads.items():
                grads[f"{name}.{key}"] = val
        elif kind == "maxpool":
            g = maxpool_backward(cache, g)
        elif kind == "relu":
            g = relu_backward(cache, g)
        elif kind == "bn":
            dgamma, dbeta, g = batchnorm_backward(cache, g)
            grads[f"{name}.gamma"] = dgamma
            grads[f"{name}.beta"] = dbeta
        elif kind == "conv":
            dw, db, g = conv_backward(cache, g)
            grads[f"{name}.w"] = dw
            grads[f"{name}.b"] = db
        else:
            raise ValueError(f"unknown tape entry {kind!r}")
    return grads, g


@dataclass
class ModelTape:
    auditory: list
    visual: list
    fusion_cache: tuple
    tanh_cache: np.ndarray
    split: int
    pred_shape: tuple


def forward_train(
    arch: Architecture,
    params: dict,
    audio: np.ndarray,
    frames: np.ndarray,
    audio_len: Optional[int] = None,
    frame_size: Optional[int] = None,
):
    """Training forward pass on cropped batches; returns (pred, tape).

    audio (B, 1, L) and frames (B, 3, H, W) with matching batch of at
    least 2 (batch-norm needs real statistics). Predictions are (B,
    out_dim), every value in (0, 1).
    """
    if audio.ndim != 3 or frames.ndim != 4:
        raise ShapeMismatchError("forward_train inputs", audio.shape, frames.shape)
    if audio.shape[0] != frames.shape[0]:
        raise ShapeMismatchError("forward_train batch", audio.shape, frames.shape)
    if audio.shape[0] < 2:
        raise ValueError("training batch must have >= 2 samples")
    if audio_len is not None and audio.shape[2] != audio_len:
        raise ShapeMismatchError("audio crop", audio.shape, (audio.shape[0], 1, audio_len))
    if frame_size is not None and frames.shape[2:] != (frame_size, frame_size):
        raise ShapeMismatchError("frame crop", frames.shape, (frames.shape[0], 3, frame_size, frame_size))

    fa, tape_a = forward_stream(audio, arch.auditory, "auditory", params, "train")
    fv, tape_v = forward_stream(frames, arch.visual, "visual", params, "train")
    feats = np.concatenate([fa, fv], axis=1)
    z, c_lin = linear_forward(feats, params["fusion.w"], params["fusion.b"])
    pred, c_tanh = scaled_tanh(z)
    tape = ModelTape(
        auditory=tape_a,
        visual=tape_v,
        fusion_cache=c_lin,
        tanh_cache=c_tanh,
        split=fa.shape[1],
        pred_shape=pred.shape,
    )
    return pred, tape


def backward(tape: ModelTape, grad_out: np.ndarray) -> dict:
    """Gradients for every trainable tensor given dL/dpred."""
    if grad_out.shape != tape.pred_shape:
        raise ShapeMismatchError("backward grad_out", grad_out.shape, tape.pred_shape)
    dz = scaled_tanh_backward(tape.tanh_cache, grad_out)
    dw, db, dfeats = linear_backward(tape.fusion_cache, dz)
    grads = {"fusion.w": dw, "fusion.b": db}
    ga, _ = backward_stream(tape.auditory, np.ascontiguousarray(dfeats[:, : tape.split]))
    gv, _ = backward_stream(tape.visual, np.ascontiguousarray(dfeats[:, tape.split :]))
    grads.update(ga)
    grads.update(gv)
    return grads


# ---------------------------------------------------------------------------
# whole-clip inference

def _pad_audio(audio: np.ndarray, minimum: int) -> np.ndarray:
    S = audio.shape[1]
    if S >= minimum:
        return audio
    left = (minimum - S) // 2
    out = np.zeros((1, minimum), dtype=audio.dtype)
    out[:, left : left + S] = audio
    return out


def _fsum_mean(rows: list) -> np.ndarray:
    """Exactly rounded per-channel mean, invariant to row order."""
    stack = np.stack(rows).astype(np.float64)
    return np.array([math.fsum(stack[:, c]) for c in range(stack.shape[1])]) / stack.shape[0]


def forward_infer(arch: Architecture, params: dict, clip: Clip, frame_stride: int = 1) -> np.ndarray:
    """Whole-clip prediction per the evaluation protocol.

    The full waveform runs through the auditory stream in one pass (pooled
    over its whole temporal extent); every frame_stride-th frame runs
    through the visual stream at native resolution and the per-frame
    pooled vectors are averaged. Batch norm reads running statistics and
    nothing is mutated, so calls are deterministic and thread-safe.
    """
    if frame_stride < 1:
        raise ValueError("frame_stride must be >= 1")
    dtype = params["fusion.w"].dtype
    audio = _pad_audio(clip.audio.astype(dtype, copy=False), MIN_AUDIO_SAMPLES)
    fa, _ = forward_stream(audio[None, :, :], arch.auditory, "auditory", params, "eval")

    frame_feats = []
    for t in range(0, clip.frame_count, frame_stride):
        frame = clip.frames[t].astype(dtype, copy=False)
        fv, _ = forward_stream(frame[None, :, :, :], arch.visual, "visual", params, "eval")
        frame_feats.append(fv[0])
    fv_mean = _fsum_mean(frame_feats).astype(dtype)

    feats = np.concatenate([fa[0], fv_mean])[None, :]
    z, _ = linear_forward(feats, params["fusion.w"], params["fusion.b"])
    pred, _ = scaled_tanh(z)
    return pred[0]
