"""Clip container format, manifests, training augmentations, synthetic data.

Clip container (little-endian), one preprocessed video sample per file:

    magic   8 bytes  b"DIClip1\\0"
    S       u32      audio sample count
    T       u32      frame count
    H       u16      frame height
    W       u16      frame width
    audio   S * f32  mono samples in [-1, 1] at 16000 Hz
    frames  T*3*H*W * u8, planar: frame-major, channels R,G,B, rows
            row-major; pixel values map to [0, 1] by /255

Manifest: UTF-8 CSV with header
    clip_id,path,openness,agreeableness,conscientiousness,neuroticism,extraversion,split
Trait values must parse into [0, 1]; split is train/validation/test; paths
are resolved relative to the manifest's directory.

Codec decoding is out of scope: a user-supplied converter produces clip
files from source video (stereo audio averaged to mono, audio resampled to
16 kHz, frames at 25 fps).
"""

from __future__ import annotations

import csv
import io
import math
import os
import struct
import tempfile
from dataclasses import dataclass
from typing import Optional

import numpy as np

SAMPLE_RATE = 16000
FPS = 25
CANONICAL_HEIGHT = 256
CANONICAL_WIDTH = 456

TRAITS = ("openness", "agreeableness", "conscientiousness", "neuroticism", "extraversion")
SPLITS = ("train", "validation", "test")

CLIP_MAGIC = b"DIClip1\x00"
_HEADER = struct.Struct("<8sIIHH")
_MAX_PAYLOAD = 1 << 40


class ClipFormatError(ValueError):
    """Base for malformed clip container files."""


class BadMagicError(ClipFormatError):
    pass


class TruncatedPayloadError(ClipFormatError):
    pass


class ExtentOverflowError(ClipFormatError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class TraitVector:
    """The five apparent-personality scores, each in [0, 1], in fixed order."""

    openness: float
    agreeableness: float
    conscientiousness: float
    neuroticism: float
    extraversion: float

    def as_array(self, dtype=np.float32) -> np.ndarray:
        return np.array(
            [self.openness, self.agreeableness, self.conscientiousness, self.neuroticism, self.extraversion],
            dtype=dtype,
        )

    @classmethod
    def from_array(cls, a) -> "TraitVector":
        a = np.asarray(a, dtype=np.float64).reshape(-1)
        if a.shape != (5,):
            raise ValueError(f"trait vector needs 5 components, got shape {a.shape}")
        return cls(*(float(v) for v in a))


@dataclass
class Clip:
    """One preprocessed sample: waveform, frame stack, optional label.

    audio:  (1, S) float32 in [-1, 1]
    frames: (T, 3, H, W) float32 in [0, 1]
    """

    audio: np.ndarray
    frames: np.ndarray
    label: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.audio.ndim != 2 or self.audio.shape[0] != 1 or self.audio.shape[1] < 1:
            raise ValueError(f"audio must be (1, S>=1), got {self.audio.shape}")
        if self.frames.ndim != 4 or self.frames.shape[1] != 3 or self.frames.shape[0] < 1:
            raise ValueError(f"frames must be (T>=1, 3, H, W), got {self.frames.shape}")

    @property
    def sample_count(self) -> int:
        return self.audio.shape[1]

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]


@dataclass
class ManifestRow:
    clip_id: str
    path: str
    traits: np.ndarray  # (5,) float64 in [0,1]
    split: str


@dataclass
class Manifest:
    rows: list
    directory: str = "."

    def split_rows(self, split: str) -> list:
        if split not in SPLITS:
            raise ManifestError(f"unknown split {split!r}")
        return [r for r in self.rows if r.split == split]

    def clip_path(self, row: ManifestRow) -> str:
        return os.path.join(self.directory, row.path)


# ---------------------------------------------------------------------------
# atomic file output

def atomic_write_bytes(path: str, payload: bytes) -> None:
    """Write via temp file + rename so a killed run never leaves a torn file."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# clip container I/O

def save_clip(clip: Clip, path: str) -> None:
    """Serialize a clip; lossless against load_clip for u8-grid frames."""
    audio = np.ascontiguousarray(clip.audio, dtype="<f4")
    if float(np.max(np.abs(audio))) > 1.0:
        raise ValueError("audio samples must lie in [-1, 1]")
    frames = clip.frames
    if float(frames.min()) < 0.0 or float(frames.max()) > 1.0:
        raise ValueError("frame values must lie in [0, 1]")
    T, _, H, W = frames.shape
    S = clip.sample_count
    if S >= 1 << 32 or T >= 1 << 32 or H >= 1 << 16 or W >= 1 << 16:
        raise ExtentOverflowError(f"extents out of header range: S={S} T={T} H={H} W={W}")
    frames_u8 = np.clip(np.round(frames.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    buf.write(_HEADER.pack(CLIP_MAGIC, S, T, H, W))
    buf.write(audio.tobytes(order="C"))
    buf.write(np.ascontiguousarray(frames_u8).tobytes(order="C"))
    atomic_write_bytes(path, buf.getvalue())


def load_clip(path: str) -> Clip:
    """Parse a clip container; raises distinct errors per defect."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: {len(blob)} bytes is shorter than the header")
    magic, S, T, H, W = _HEADER.unpack_from(blob, 0)
    if magic != CLIP_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if S < 1 or T < 1 or H < 1 or W < 1:
        raise ExtentOverflowError(f"{path}: zero extent in header (S={S} T={T} H={H} W={W})")
    n_pixels = T * 3 * H * W
    expected = _HEADER.size + 4 * S + n_pixels
    if expected > _MAX_PAYLOAD:
        raise ExtentOverflowError(f"{path}: header implies {expected} bytes")
    if len(blob) != expected:
        raise TruncatedPayloadError(f"{path}: file length {len(blob)} != header-implied {expected}")
    audio = np.frombuffer(blob, dtype="<f4", count=S, offset=_HEADER.size).reshape(1, S)
    frames_u8 = np.frombuffer(blob, dtype=np.uint8, count=n_pixels, offset=_HEADER.size + 4 * S)
    frames = (frames_u8.astype(np.float32) / np.float32(255.0)).reshape(T, 3, H, W)
    return Clip(audio=np.ascontiguousarray(audio, dtype=np.float32), frames=frames)


# ---------------------------------------------------------------------------
# manifest I/O

_MANIFEST_HEADER = ["clip_id", "path"] + list(TRAITS) + ["split"]


def save_manifest(manifest: Manifest, path: str) -> None:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(_MANIFEST_HEADER)
    for row in manifest.rows:
        writer.writerow([row.clip_id, row.path] + [f"{v:.6f}" for v in row.traits] + [row.split])
    atomic_write_text(path, out.getvalue())


def load_manifest(path: str) -> Manifest:
    rows = []
    seen = set()
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty manifest") from None
        if header != _MANIFEST_HEADER:
            raise ManifestError(f"{path}: bad header {header!r}")
        for lineno, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) != len(_MANIFEST_HEADER):
                raise ManifestError(f"{path}:{lineno}: expected {len(_MANIFEST_HEADER)} fields")
            clip_id, clip_path = record[0], record[1]
            if clip_id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate clip_id {clip_id!r}")
            seen.add(clip_id)
            try:
                traits = np.array([float(v) for v in record[2:7]], dtype=np.float64)
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: unparseable trait value") from None
            if np.any(traits < 0.0) or np.any(traits > 1.0):
                raise ManifestError(f"{path}:{lineno}: trait outside [0, 1]")
            split = record[7]
            if split not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: unknown split {split!r}")
            rows.append(ManifestRow(clip_id=clip_id, path=clip_path, traits=traits, split=split))
    return Manifest(rows=rows, directory=os.path.dirname(os.path.abspath(path)))


# ---------------------------------------------------------------------------
# training augmentations
#
# Draw order is pinned (audio start; then frame index, crop row, crop col,
# flip) so a fixed generator state fixes the whole sample stream.

def crop_audio(clip: Clip, rng: np.random.Generator, crop: int = 50176) -> np.ndarray:
    """Contiguous random temporal window; short audio is zero-padded at the end."""
    S = clip.sample_count
    if S < crop:
        out = np.zeros((1, crop), dtype=clip.audio.dtype)
        out[:, :S] = clip.audio
        return out
    start = int(rng.integers(0, S - crop + 1))
    return clip.audio[:, start : start + crop].copy()


def crop_frame(clip: Clip, rng: np.random.Generator, crop: int = 224) -> np.ndarray:
    """Random square crop of a random frame, mirrored left/right half the time."""
    T, _, H, W = clip.frames.shape
    if H < crop or W < crop:
        raise ValueError(f"frame {H}x{W} smaller than crop {crop}")
    t = int(rng.integers(0, T))
    top = int(rng.integers(0, H - crop + 1))
    left = int(rng.integers(0, W - crop + 1))
    flip = bool(rng.random() < 0.5)
    out = clip.frames[t, :, top : top + crop, left : left + crop]
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# synthetic dataset
#
# Audio is a three-component sine mixture whose fundamental is the dominant
# frequency; frames are oriented color gradients with a small temporal
# brightness wobble. Labels are smooth functions of the dominant frequency,
# the realized mean R/G/B and the gradient orientation, so every trait is
# recoverable from the media, and all sit inside [0.05, 0.95].

_FREQ_LO = 400.0
_FREQ_HI = 3000.0
_BASE_LO = 0.2
_BASE_HI = 0.8
# kept small so random crops/frames barely perturb the label-bearing means
_GRADIENT_AMPLITUDE = 0.08
_WOBBLE_AMPLITUDE = 0.005


def _synth_labels(freq, means, theta):
    u_f = (freq - _FREQ_LO) / (_FREQ_HI - _FREQ_LO)
    m = np.clip((np.asarray(means) - _BASE_LO) / (_BASE_HI - _BASE_LO), 0.0, 1.0)
    u_theta = 0.5 * (1.0 + math.cos(theta))
    gray = float(m.mean())
    raw = np.array(
        [u_f, m[0], m[1], m[2], 0.55 * gray + 0.45 * u_theta],
        dtype=np.float64,
    )
    return np.round(0.05 + 0.9 * raw, 6)


def synth_clip(rng: np.random.Generator, seconds: float = 2.0, height: int = 48, width: int = 48) -> Clip:
    """One synthetic clip; consumes a fixed number of draws from rng."""
    freq = float(rng.uniform(_FREQ_LO, _FREQ_HI))
    phase2 = float(rng.uniform(0.0, 2.0 * math.pi))
    phase3 = float(rng.uniform(0.0, 2.0 * math.pi))
    theta = float(rng.uniform(0.0, 2.0 * math.pi))
    base = rng.uniform(_BASE_LO, _BASE_HI, size=3)
    wobble_phase = float(rng.uniform(0.0, 2.0 * math.pi))

    S = int(round(seconds * SAMPLE_RATE))
    t = np.arange(S, dtype=np.float64) / SAMPLE_RATE
    wave = (
        0.55 * np.sin(2.0 * math.pi * freq * t)
        + 0.30 * np.sin(2.0 * math.pi * 1.5 * freq * t + phase2)
        + 0.10 * np.sin(2.0 * math.pi * 2.3 * freq * t + phase3)
    )
    audio = wave.astype(np.float32).reshape(1, S)

    T = int(round(seconds * FPS))
    gy = (np.arange(height, dtype=np.float64) + 0.5) / height - 0.5
    gx = (np.arange(width, dtype=np.float64) + 0.5) / width - 0.5
    proj = math.cos(theta) * gx[None, :] + math.sin(theta) * gy[:, None]
    ts = np.arange(T, dtype=np.float64)
    wobble = _WOBBLE_AMPLITUDE * np.sin(2.0 * math.pi * ts / max(T, 1) + wobble_phase)
    pix = base[None, :, None, None] + _GRADIENT_AMPLITUDE * proj[None, None, :, :] + wobble[:, None, None, None]
    frames_u8 = np.clip(np.round(pix * 255.0), 0, 255).astype(np.uint8)
    frames = frames_u8.astype(np.float32) / np.float32(255.0)

    means = [float(frames[:, c].mean(dtype=np.float64)) for c in range(3)]
    label = _synth_labels(freq, means, theta)
    return Clip(audio=audio, frames=frames, label=label)


def synth_dataset(
    n: int,
    seed: int,
    out_dir: str,
    val_count: int = 0,
    test_count: int = 0,
    seconds: float = 2.0,
    height: int = 48,
    width: int = 48,
) -> Manifest:
    """Write n clips plus manifest.csv under out_dir; fully seed-determined.

    The first n - val_count - test_count clips are tagged train, then
    validation, then test.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if val_count + test_count > n:
        raise ValueError("val_count + test_count exceeds n")
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(seed))
    rows = []
    n_train = n - val_count - test_count
    for idx in range(n):
        clip = synth_clip(rng, seconds=seconds, height=height, width=width)
        clip_id = f"clip{idx:04d}"
        rel = f"{clip_id}.clip"
        save_clip(clip, os.path.join(out_dir, rel))
        split = "train" if idx < n_train else ("validation" if idx < n_train + val_count else "test")
        rows.append(ManifestRow(clip_id=clip_id, path=rel, traits=clip.label, split=split))
    manifest = Manifest(rows=rows, directory=os.path.abspath(out_dir))
    save_manifest(manifest, os.path.join(out_dir, "manifest.csv"))
    return manifest
