"""Recurrent head over frozen per-second audiovisual features.

The head is two LSTM layers with inverted dropout between them and a
linear readout squashed by the scaled tanh; the production size is
512/512/5 on the 512-d concatenated pooled stream features. Sequences are
one feature row per whole second of the clip: second t pools the auditory
stream over samples [16000t, 16000(t+1)) and the visual stream over that
second's frames, both in eval mode against the frozen base network.

Training minimizes the per-step MAE (averaged over steps, so the learning
rate is sequence-length independent) with backpropagation truncated every
`trunc` steps; hidden state crosses truncation boundaries numerically but
carries no gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import FPS, SAMPLE_RATE, Clip
from .layers import (
    dropout_backward,
    dropout_forward,
    linear_backward,
    linear_forward,
    lstm_step,
    lstm_step_backward,
    scaled_tanh,
    scaled_tanh_backward,
)
from .model import Architecture, _fsum_mean, forward_stream, he_normal
from .optim import adam_step, init_adam, mae_loss

RNN_HIDDEN = 512
RNN_LAYERS = 2
TRUNCATION = 15
DROPOUT_RATE = 0.5


@dataclass
class RnnTrainConfig:
    epochs: int = 100
    seed: int = 0
    trunc: int = TRUNCATION
    dropout: float = DROPOUT_RATE
    alpha: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8


def head_manifest(input_dim: int = 512, hidden: int = RNN_HIDDEN, out_dim: int = 5) -> dict:
    return {
        "rnn.l1.wx": (input_dim, 4 * hidden),
        "rnn.l1.wh": (hidden, 4 * hidden),
        "rnn.l1.b": (4 * hidden,),
        "rnn.l2.wx": (hidden, 4 * hidden),
        "rnn.l2.wh": (hidden, 4 * hidden),
        "rnn.l2.b": (4 * hidden,),
        "rnn.out.w": (hidden, out_dim),
        "rnn.out.b": (out_dim,),
    }


def build_rnn_head(seed, input_dim: int = 512, hidden: int = RNN_HIDDEN, out_dim: int = 5, dtype=np.float32) -> dict:
    """He-normal weights, zero biases except the forget gate's, set to 1."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params = {}
    for name, shape in head_manifest(input_dim, hidden, out_dim).items():
        if name.endswith((".wx", ".wh", ".w")):
            params[name] = he_normal(rng, shape, shape[0], dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    for layer in ("l1", "l2"):
        params[f"rnn.{layer}.b"][hidden : 2 * hidden] = 1.0  # forget-gate bias
    return params


def head_dims(params: dict):
    """(input_dim, hidden, out_dim) recovered from tensor shapes."""
    input_dim, four_h = params["rnn.l1.wx"].shape
    hidden = four_h // 4
    out_dim = params["rnn.out.w"].shape[1]
    expect = head_manifest(input_dim, hidden, out_dim)
    for name, shape in expect.items():
        if name not in params or params[name].shape != shape:
            raise ValueError(f"rnn head tensor {name!r} missing or mis-shaped")
    return input_dim, hidden, out_dim


# ---------------------------------------------------------------------------
# feature extraction

def extract_features(clip: Clip, arch: Architecture, base_params: dict) -> np.ndarray:
    """One 512-d pooled feature row per whole second; base net stays frozen."""
    seconds = min(clip.sample_count // SAMPLE_RATE, clip.frame_count // FPS)
    if seconds < 1:
        raise ValueError("clip must span at least one whole second of audio and video")
    dtype = base_params["fusion.w"].dtype
    rows = []
    for t in range(seconds):
        audio = clip.audio[:, t * SAMPLE_RATE : (t + 1) * SAMPLE_RATE].astype(dtype, copy=False)
        fa, _ = forward_stream(audio[None, :, :], arch.auditory, "auditory", base_params, "eval")
        frame_feats = []
        for f in range(t * FPS, (t + 1) * FPS):
            frame = clip.frames[f].astype(dtype, copy=False)
            fv, _ = forward_stream(frame[None, :, :, :], arch.visual, "visual", base_params, "eval")
            frame_feats.append(fv[0])
        fv_mean = _fsum_mean(frame_feats).astype(dtype)
        rows.append(np.concatenate([fa[0], fv_mean]))
    return np.stack(rows)


# ---------------------------------------------------------------------------
# forward / backward

def zero_state(hidden: int, dtype=np.float32):
    z = lambda: np.zeros((1, hidden), dtype=dtype)  # noqa: E731
    return (z(), z(), z(), z())


def rnn_forward(seq: np.ndarray, params: dict, mode: str, rng=None, dropout: float = DROPOUT_RATE, state=None):
    """Run the head over (T, D) features; returns (outputs (T, K), tape, state).

    `state` is (h1, c1, h2, c2); zeros when omitted. Train mode draws one
    dropout mask per step and layer from rng; eval mode is deterministic.
    """
    if seq.ndim != 2 or seq.shape[0] < 1:
        raise ValueError(f"feature sequence must be (T>=1, D), got {seq.shape}")
    if mode == "train" and dropout > 0.0 and rng is None:
        raise ValueError("train-mode dropout needs a generator")
    _, hidden, _ = head_dims(params)
    h1, c1, h2, c2 = state if state is not None else zero_state(hidden, seq.dtype)
    tape = []
    outs = []
    for t in range(seq.shape[0]):
        x = seq[t : t + 1]
        h1, c1, cache1 = lstm_step(x, h1, c1, params["rnn.l1.wx"], params["rnn.l1.wh"], params["rnn.l1.b"])
        d1, mask1 = dropout_forward(h1, dropout, mode, rng)
        h2, c2, cache2 = lstm_step(d1, h2, c2, params["rnn.l2.wx"], params["rnn.l2.wh"], params["rnn.l2.b"])
        d2, mask2 = dropout_forward(h2, dropout, mode, rng)
        z, c_lin = linear_forward(d2, params["rnn.out.w"], params["rnn.out.b"])
        y, c_tanh = scaled_tanh(z)
        outs.append(y[0])
        tape.append((cache1, mask1, cache2, mask2, c_lin, c_tanh))
    return np.stack(outs), tape, (h1, c1, h2, c2)


_GRAD_KEYS = ("rnn.l1.wx", "rnn.l1.wh", "rnn.l1.b", "rnn.l2.wx", "rnn.l2.wh", "rnn.l2.b", "rnn.out.w", "rnn.out.b")


def rnn_backward(tape, grad_out: np.ndarray, params: dict) -> dict:
    """Full backpropagation through the steps covered by `tape`.

    Gradients do not flow out of the segment's initial state, which is what
    truncation means.
    """
    _, hidden, _ = head_dims(params)
    dtype = grad_out.dtype
    grads = {k: np.zeros_like(params[k]) for k in _GRAD_KEYS}
    dh1 = np.zeros((1, hidden), dtype=dtype)
    dc1 = np.zeros((1, hidden), dtype=dtype)
    dh2 = np.zeros((1, hidden), dtype=dtype)
    dc2 = np.zeros((1, hidden), dtype=dtype)
    for t in range(len(tape) - 1, -1, -1):
        cache1, mask1, cache2, mask2, c_lin, c_tanh = tape[t]
        dz = scaled_tanh_backward(c_tanh, grad_out[t : t + 1])
        dw, db, dd2 = linear_backward(c_lin, dz)
        grads["rnn.out.w"] += dw
        grads["rnn.out.b"] += db
        dh2 = dh2 + dropout_backward(mask2, dd2)
        dd1, dh2, dc2, dwx2, dwh2, db2 = lstm_step_backward(cache2, dh2, dc2)
        grads["rnn.l2.wx"] += dwx2
        grads["rnn.l2.wh"] += dwh2
        grads["rnn.l2.b"] += db2
        dh1 = dh1 + dropout_backward(mask1, dd1)
        _, dh1, dc1, dwx1, dwh1, db1 = lstm_step_backward(cache1, dh1, dc1)
        grads["rnn.l1.wx"] += dwx1
        grads["rnn.l1.wh"] += dwh1
        grads["rnn.l1.b"] += db1
    return grads


def sequence_gradients(params: dict, seq: np.ndarray, target, trunc: int, mode: str = "eval", rng=None, dropout: float = 0.0):
    """Loss and truncated-BPTT gradients for one sequence.

    target may be (K,) (one label for every step) or (T, K). Per-step
    losses are averaged over all T*K entries; each length-`trunc` segment
    contributes its full-BPTT gradient with state carried in numerically.
    Returns (loss, grads, outputs).
    """
    if trunc < 1:
        raise ValueError("truncation length must be >= 1")
    _, hidden, out_dim = head_dims(params)
    T = seq.shape[0]
    target = np.asarray(target, dtype=seq.dtype)
    if target.ndim == 1:
        target = np.broadcast_to(target, (T, target.shape[0]))
    state = zero_state(hidden, seq.dtype)
    segments = []
    outs = []
    for lo in range(0, T, trunc):
        seg = slice(lo, min(lo + trunc, T))
        out, tape, state = rnn_forward(seq[seg], params, mode, rng, dropout, state=state)
        segments.append((tape, seg))
        outs.append(out)
    outputs = np.concatenate(outs, axis=0)
    loss, dout = mae_loss(outputs, np.ascontiguousarray(target))
    grads = {k: np.zeros_like(params[k]) for k in _GRAD_KEYS}
    for tape, seg in segments:
        seg_grads = rnn_backward(tape, dout[seg], params)
        for k in _GRAD_KEYS:
            grads[k] += seg_grads[k]
    return loss, grads, outputs


def train_rnn(sequences, params: dict, config: RnnTrainConfig):
    """Adam over per-sequence truncated-BPTT gradients.

    sequences: list of (features (T, D), target). Returns the per-epoch
    mean losses; params are updated in place.
    """
    if not sequences:
        raise ValueError("no training sequences")
    adam = init_adam(params, _GRAD_KEYS, config.alpha, config.beta1, config.beta2, config.epsilon)
    rng = np.random.Generator(np.random.PCG64(config.seed))
    losses = []
    for _ in range(config.epochs):
        order = rng.permutation(len(sequences))
        total = 0.0
        for j in order:
            seq, target = sequences[int(j)]
            loss, grads, _ = sequence_gradients(
                params, seq, target, config.trunc, mode="train", rng=rng, dropout=config.dropout
            )
            adam_step(params, grads, adam)
            total += loss
        losses.append(total / len(sequences))
    return losses


def predict_sequence(seq: np.ndarray, params: dict) -> np.ndarray:
    """Eval-mode per-step predictions averaged over the whole sequence."""
    outputs, _, _ = rnn_forward(seq, params, "eval")
    return outputs.astype(np.float64).mean(axis=0).astype(seq.dtype)


def predict_rnn(clip: Clip, arch: Architecture, base_params: dict, head_params: dict) -> np.ndarray:
    feats = extract_features(clip, arch, base_params)
    return predict_sequence(feats, head_params)
