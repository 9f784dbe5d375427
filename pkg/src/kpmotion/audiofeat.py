"""Deterministic audio frontend.

A fixed filterbank hierarchy stands in for a pretrained speech encoder:
layer 0 is a log mel-style filterbank at 50 Hz (hop 320, window 640 at
16 kHz), layers 1..L-1 are causal moving averages of layer 0 over 3, 9 and
27 frames. A learnable softmax-weighted sum collapses the layers, and
pair-averaging brings the 50 Hz stream down to the 25 Hz video clock.

Batch extraction runs through :class:`StreamingExtractor`, so streaming and
offline use produce bit-identical frames.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from kpmotion.autograd import Tensor, as_tensor

SAMPLE_RATE = 16000
HOP = 320
WINDOW = 640
NFFT = 1024
FEATURE_RATE = 50
VIDEO_RATE = 25
SAMPLES_PER_VIDEO_FRAME = SAMPLE_RATE // VIDEO_RATE
N_LAYERS = 4
N_FILTERS = 32
LOG_FLOOR = 1e-10
MA_WIDTHS = (3, 9, 27)
AF_MAGIC = "#takin-af"


class AudioError(ValueError):
    """Unusable audio input."""


@dataclass(frozen=True)
class AudioFeatureStack:
    layers: np.ndarray  # (L, T50, D)

    def __post_init__(self):
        a = np.asarray(self.layers, dtype=np.float64)
        if a.ndim != 3:
            raise AudioError(f"feature stack must be (L, T, D), got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise AudioError("feature stack is not finite")
        object.__setattr__(self, "layers", a)

    @property
    def L(self) -> int:
        return self.layers.shape[0]

    @property
    def T(self) -> int:
        return self.layers.shape[1]

    @property
    def D(self) -> int:
        return self.layers.shape[2]


@dataclass
class LayerWeights:
    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64).reshape(-1)

    @classmethod
    def uniform(cls, L: int = N_LAYERS) -> "LayerWeights":
        return cls(np.zeros(L))

    @property
    def weights(self) -> np.ndarray:
        e = np.exp(self.logits - self.logits.max())
        return e / e.sum()


# -- pcm io ---------------------------------------------------------------------

def to_float(pcm) -> np.ndarray:
    """int16 samples (or floats already in [-1, 1]) as float64."""
    a = np.asarray(pcm)
    if a.dtype == np.int16:
        return a.astype(np.float64) / 32768.0
    a = a.astype(np.float64)
    if not np.all(np.isfinite(a)):
        raise AudioError("audio contains non-finite samples")
    return a


def to_int16(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(x) * 32767.0), -32768, 32767).astype(np.int16)


def read_wav(path: str | Path) -> np.ndarray:
    """Read a PCM16 mono 16 kHz WAV file into int16 samples."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2 or w.getframerate() != SAMPLE_RATE:
            raise AudioError(
                f"{path}: need mono 16-bit {SAMPLE_RATE} Hz, got {w.getnchannels()} ch, "
                f"{8 * w.getsampwidth()} bit, {w.getframerate()} Hz")
        raw = w.readframes(w.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.int16)


def write_wav(path: str | Path, pcm) -> None:
    pcm = np.asarray(pcm)
    if pcm.dtype != np.int16:
        pcm = to_int16(pcm)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(SAMPLE_RATE)
        w.writeframes(pcm.astype("<i2").tobytes())


# -- filterbank -----------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def filter_edges(n_filters: int = N_FILTERS, fmin: float = 0.0,
                 fmax: float = SAMPLE_RATE / 2) -> np.ndarray:
    """Corner frequencies in Hz; filter m spans edges[m]..edges[m+2], peak at edges[m+1]."""
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_filters + 2))
    edges.setflags(write=False)
    return edges


def filter_centers(n_filters: int = N_FILTERS) -> np.ndarray:
    return filter_edges(n_filters)[1:-1]


@lru_cache(maxsize=8)
def mel_filterbank(n_filters: int = N_FILTERS, nfft: int = NFFT,
                   sr: int = SAMPLE_RATE) -> np.ndarray:
    """(nfft//2 + 1, n_filters) triangular filters with unit peak, linear in Hz."""
    edges = filter_edges(n_filters)
    freqs = np.fft.rfftfreq(nfft, 1.0 / sr)
    fb = np.zeros((freqs.size, n_filters))
    for m in range(n_filters):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        rise = (freqs - lo) / (mid - lo)
        fall = (hi - freqs) / (hi - mid)
        fb[:, m] = np.clip(np.minimum(rise, fall), 0.0, None)
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=1)
def _hann() -> np.ndarray:
    w = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(WINDOW) / WINDOW)
    w.setflags(write=False)
    return w


def _logmel_block(frames: np.ndarray, n_filters: int) -> np.ndarray:
    spec = np.fft.rfft(frames * _hann(), n=NFFT, axis=-1)
    power = spec.real ** 2 + spec.imag ** 2
    return np.log(np.maximum(power @ mel_filterbank(n_filters), LOG_FLOOR))


def causal_moving_average(x: np.ndarray, width: int, offset: int = 0) -> np.ndarray:
    """Mean of the last ``width`` frames (fewer at the start) for each row of ``x``.

    ``offset`` is the absolute index of ``x[0]``; rows with fewer than
    ``width - 1`` predecessors inside ``x`` are only valid when ``offset`` is 0.
    """
    acc = x.copy()
    for k in range(1, min(width, x.shape[0])):
        acc[k:] += x[:-k]
    counts = np.minimum(np.arange(offset, offset + x.shape[0]) + 1, width)
    return acc / counts[:, None]


class StreamingExtractor:
    """Incremental 50 Hz feature extraction in frame pairs (one video frame each)."""

    def __init__(self, n_filters: int = N_FILTERS, widths: tuple[int, ...] = MA_WIDTHS):
        self.n_filters = n_filters
        self.widths = widths
        self._buf = np.zeros(WINDOW // 2 - HOP // 2)  # center padding
        self._buf_start = -(WINDOW // 2 - HOP // 2)  # absolute sample index of _buf[0]
        self._received = 0
        self._next_frame = 0
        self._history = np.zeros((0, n_filters))
        self._done = False

    @property
    def frames_emitted(self) -> int:
        return self._next_frame

    def _frames_available(self, final: bool) -> int:
        if final:
            return -(-self._received // HOP)
        # frame i needs samples through i*HOP + WINDOW - HOP/2 (exclusive)
        need = WINDOW - HOP // 2
        if self._received < need:
            return 0
        return (self._received - need) // HOP + 1

    def _emit(self, upto: int, final: bool) -> np.ndarray:
        layer0 = []
        while self._next_frame < upto:
            n = 2 if self._next_frame + 1 < upto else 1
            if n == 1 and not final:
                break
            blocks = []
            for i in range(self._next_frame, self._next_frame + n):
                start = i * HOP - (WINDOW // 2 - HOP // 2) - self._buf_start
                seg = self._buf[start:start + WINDOW]
                if seg.size < WINDOW:
                    seg = np.concatenate([seg, np.zeros(WINDOW - seg.size)])
                blocks.append(seg)
            layer0.append(_logmel_block(np.stack(blocks), self.n_filters))
            self._next_frame += n
        if not layer0:
            return np.zeros((1 + len(self.widths), 0, self.n_filters))
        new = np.concatenate(layer0)
        offset = self._next_frame - new.shape[0] - self._history.shape[0]
        full = np.concatenate([self._history, new])
        layers = [new]
        for w in self.widths:
            layers.append(causal_moving_average(full, w, offset)[-new.shape[0]:])
        keep = max(self.widths) - 1
        self._history = full[-keep:] if keep else full[:0]
        # drop samples no future frame needs
        first_needed = self._next_frame * HOP - (WINDOW // 2 - HOP // 2)
        drop = first_needed - self._buf_start
        if drop > 0:
            self._buf = self._buf[drop:]
            self._buf_start += drop
        return np.stack(layers)

    def push(self, pcm) -> np.ndarray:
        """Feed samples; returns newly complete frames as (L, n, D) (n even)."""
        if self._done:
            raise AudioError("extractor already flushed")
        x = to_float(pcm).reshape(-1)
        self._buf = np.concatenate([self._buf, x])
        self._received += x.size
        return self._emit(self._frames_available(final=False), final=False)

    def flush(self) -> np.ndarray:
        """Zero-pad the tail and return the remaining frames."""
        self._done = True
        return self._emit(self._frames_available(final=True), final=True)


def extract(pcm, n_filters: int = N_FILTERS) -> AudioFeatureStack:
    """Multi-layer features at 50 Hz; ``ceil(len/320)`` frames."""
    x = to_float(pcm).reshape(-1)
    if x.size < WINDOW:
        raise AudioError(f"need at least {WINDOW} samples, got {x.size}")
    ex = StreamingExtractor(n_filters)
    parts = [ex.push(x), ex.flush()]
    return AudioFeatureStack(np.concatenate(parts, axis=1))


def weighted_sum(stack, weights):
    """Softmax-weighted sum of layers.

    ``stack`` is an :class:`AudioFeatureStack` or (L, ..., D) array/tensor;
    ``weights`` is a :class:`LayerWeights`, a logits array, or a logits tensor
    (in which case the result is a differentiable tensor).
    """
    layers = stack.layers if isinstance(stack, AudioFeatureStack) else stack
    logits = weights.logits if isinstance(weights, LayerWeights) else weights
    differentiable = isinstance(logits, Tensor) or isinstance(layers, Tensor)
    L = layers.shape[0]
    if as_tensor(logits).shape != (L,):
        raise AudioError(f"{as_tensor(logits).shape[0]} layer weights for {L} layers")
    if differentiable:
        w = as_tensor(logits).softmax(-1)
        layers = as_tensor(layers)
        acc = layers[0] * w[0]
        for l in range(1, L):
            acc = acc + layers[l] * w[l]
        return acc
    w = LayerWeights(logits).weights
    acc = layers[0] * w[0]
    for l in range(1, L):
        acc = acc + layers[l] * w[l]
    return acc


def downsample_to_video(features: np.ndarray) -> np.ndarray:
    """50 Hz -> 25 Hz by averaging non-overlapping frame pairs along axis -2."""
    f = np.asarray(features, dtype=np.float64)
    T = f.shape[-2]
    if T == 0:
        raise AudioError("cannot downsample an empty feature stream")
    if T % 2:
        f = np.concatenate([f, f[..., -1:, :]], axis=-2)
    return (f[..., 0::2, :] + f[..., 1::2, :]) * 0.5


def upsample_repeat(features: np.ndarray) -> np.ndarray:
    return np.repeat(np.asarray(features), 2, axis=-2)


def envelope(pcm) -> np.ndarray:
    """Per-video-frame RMS loudness, divided by the clip maximum (zeros for silence)."""
    x = to_float(pcm).reshape(-1)
    if x.size == 0:
        raise AudioError("empty audio")
    n = -(-x.size // SAMPLES_PER_VIDEO_FRAME)
    padded = np.concatenate([x, np.zeros(n * SAMPLES_PER_VIDEO_FRAME - x.size)])
    counts = np.full(n, SAMPLES_PER_VIDEO_FRAME, dtype=np.float64)
    counts[-1] = x.size - (n - 1) * SAMPLES_PER_VIDEO_FRAME
    energy = (padded.reshape(n, SAMPLES_PER_VIDEO_FRAME) ** 2).sum(axis=1)
    rms = np.sqrt(energy / counts)
    peak = rms.max()
    return rms / peak if peak > 0 else np.zeros(n)


def video_frames(n_samples: int) -> int:
    return -(-n_samples // SAMPLES_PER_VIDEO_FRAME)


def write_features(path: str | Path, stack: AudioFeatureStack, **meta) -> None:
    """Dump layers as text: header then one line per (layer, frame)."""
    extra = "".join(f" {k}={v}" for k, v in meta.items())
    lines = [f"{AF_MAGIC} v1 L={stack.L} D={stack.D} T={stack.T}{extra}"]
    for layer in stack.layers:
        lines.extend(" ".join(f"{v:.9g}" for v in row) for row in layer)
    Path(path).write_text("\n".join(lines) + "\n")


def read_features(path: str | Path) -> AudioFeatureStack:
    lines = Path(path).read_text().splitlines()
    head = lines[0].split()
    if head[:2] != [AF_MAGIC, "v1"]:
        raise AudioError(f"{path}: not a feature dump")
    meta = dict(tok.split("=", 1) for tok in head[2:])
    L, D, T = int(meta["L"]), int(meta["D"]), int(meta["T"])
    data = np.array([ln.split() for ln in lines[1:] if ln.strip()], dtype=np.float64)
    return AudioFeatureStack(data.reshape(L, T, D))
