"""Streaming pipeline at the 25 Hz frame clock, plus throughput benchmarking.

Four threads joined by bounded queues:

    ingest (PCM blocks) -> features (25 Hz frames) -> chunked DDIM -> paced sink

The generator stage reuses the offline chunk plan, sampler and cross-fade, so
a finished stream over a file reproduces :func:`motiongen.generate` exactly.
The sink holds a jitter buffer: emission starts ``prebuffer_s`` after the
first frame arrives and then follows the frame clock.
"""

from __future__ import annotations

import logging
import queue
import sys
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from kpmotion import audiofeat, motiongen
from kpmotion.motiongen import (OVERLAP, STRIDE, WINDOW, ChunkStitcher, DenoiserModel,
                                EmotionDescriptor, chunk_plan, sample_chunk)
from kpmotion.runtime.config import UNDERRUN_POLICIES
from kpmotion.synthrig import synth_speech

log = logging.getLogger(__name__)

FPS = audiofeat.VIDEO_RATE
BLOCK = audiofeat.SAMPLES_PER_VIDEO_FRAME
_END = object()


class StreamError(RuntimeError):
    pass


# -- sources -----------------------------------------------------------------------

class PcmSource:
    """Finite PCM clip delivered in video-frame sized blocks."""

    def __init__(self, pcm):
        self.pcm = audiofeat.to_float(pcm).reshape(-1)
        if self.pcm.size == 0:
            raise audiofeat.AudioError("empty audio")

    def blocks(self) -> Iterator[np.ndarray]:
        for i in range(0, self.pcm.size, BLOCK):
            yield self.pcm[i:i + BLOCK]


class SyntheticSource:
    """Speech-like audio generated block by block; ``seconds=None`` never ends."""

    def __init__(self, seconds: float | None = 60.0, seed: int = 0, segment_s: float = 10.0):
        self.seconds = seconds
        self.seed = seed
        self.segment_s = segment_s

    def blocks(self) -> Iterator[np.ndarray]:
        total = None if self.seconds is None else int(round(self.seconds * audiofeat.SAMPLE_RATE))
        sent, seg = 0, 0
        while total is None or sent < total:
            x = audiofeat.to_float(synth_speech(self.seed + seg, self.segment_s))
            seg += 1
            for i in range(0, x.size, BLOCK):
                b = x[i:i + BLOCK]
                if total is not None:
                    b = b[:total - sent]
                if b.size == 0:
                    return
                sent += b.size
                yield b


# -- reports ---------------------------------------------------------------------

def _percentiles(values: np.ndarray) -> tuple[float, float, float]:
    if values.size == 0:
        return 0.0, 0.0, 0.0
    p50, p95, p99 = np.percentile(values, [50, 95, 99])
    return float(p50), float(p95), float(p99)


@dataclass(frozen=True)
class BenchReport:
    """Throughput and per-frame latency of the motion pipeline."""

    frames: int
    wall_s: float
    p50_ms: float
    p95_ms: float
    p99_ms: float
    underruns: int = 0
    jitter_p95_ms: float = 0.0
    algorithmic_latency_s: float = WINDOW / FPS

    def __post_init__(self):
        if self.frames < 0 or self.wall_s < 0:
            raise ValueError("negative frame count or wall time")
        if not self.p50_ms <= self.p95_ms <= self.p99_ms:
            raise ValueError("latency percentiles must be monotone")

    @property
    def fps(self) -> float:
        return self.frames / self.wall_s if self.wall_s > 0 else float("inf")

    @property
    def rtf(self) -> float:
        return self.fps / FPS

    @classmethod
    def from_latencies(cls, frames: int, wall_s: float, latencies_ms, **extra) -> "BenchReport":
        p50, p95, p99 = _percentiles(np.asarray(latencies_ms, dtype=np.float64))
        return cls(frames, wall_s, p50, p95, p99, **extra)

    def to_text(self, **meta) -> str:
        rows = {"frames": self.frames, "wall_s": f"{self.wall_s:.6f}", "fps": f"{self.fps:.3f}",
                "rtf": f"{self.rtf:.4f}", "p50_ms": f"{self.p50_ms:.3f}",
                "p95_ms": f"{self.p95_ms:.3f}", "p99_ms": f"{self.p99_ms:.3f}",
                "underruns": self.underruns, "jitter_p95_ms": f"{self.jitter_p95_ms:.3f}",
                "algorithmic_latency_s": f"{self.algorithmic_latency_s:.3f}"}
        rows.update(meta)
        return "".join(f"bench.{k}={v}\n" for k, v in rows.items())


@dataclass
class StreamResult:
    frames: np.ndarray                 # (n_emitted, Dl)
    indices: np.ndarray                # source frame index of each emitted row
    emit_times: np.ndarray             # seconds since stream start
    jitter_ms: np.ndarray              # emission minus deadline, for on-time frames
    latency_ms: np.ndarray             # feature arrival to release, per produced frame
    wall_s: float
    underruns: int = 0
    dropped: int = 0
    frozen: int = 0
    produced: int = 0
    algorithmic_latency_s: float = 0.0
    events: list[str] = field(default_factory=list)

    def report(self) -> BenchReport:
        p95 = float(np.percentile(self.jitter_ms, 95)) if self.jitter_ms.size else 0.0
        return BenchReport.from_latencies(self.produced, self.wall_s, self.latency_ms,
                                          underruns=self.underruns, jitter_p95_ms=p95,
                                          algorithmic_latency_s=self.algorithmic_latency_s)


# -- pipeline ----------------------------------------------------------------------

class _Pipe:
    """Bounded queue whose blocking puts give up once the stream is stopped."""

    def __init__(self, maxsize: int, stop: threading.Event):
        self.q: queue.Queue = queue.Queue(maxsize=maxsize)
        self.stop = stop

    def put(self, item) -> bool:
        while not self.stop.is_set():
            try:
                self.q.put(item, timeout=0.05)
                return True
            except queue.Full:
                continue
        return False

    def get(self, timeout: float | None = None):
        """Blocking get; with no timeout it returns the end marker once stopped."""
        if timeout is not None:
            return self.q.get(timeout=timeout)
        while True:
            try:
                return self.q.get(timeout=0.05)
            except queue.Empty:
                if self.stop.is_set():
                    return _END


def stream(model: DenoiserModel, source, *, emotion: EmotionDescriptor | None = None,
           seed: int = 0, n_steps: int = 10, eta: float = 0.0, policy: str = "block",
           prebuffer_s: float = 1.0, queue_frames: int = 8, paced_input: bool = False,
           paced_output: bool = True, max_frames: int | None = None,
           pose: np.ndarray | None = None,
           on_frame: Callable[[int, np.ndarray], None] | None = None) -> StreamResult:
    """Run the threaded pipeline over ``source`` and collect the emitted frames.

    ``paced_input`` feeds audio at real time (a live source); ``paced_output``
    emits frames on the 25 Hz clock. ``max_frames`` stops an endless source.
    """
    if policy not in UNDERRUN_POLICIES:
        raise StreamError(f"unknown underrun policy {policy!r}")
    K = model.config.K
    emotion = emotion or EmotionDescriptor.zeros(K)
    emo_norm = model.norm_emotion(emotion.vector)
    stop = threading.Event()
    q_audio, q_feat, q_out = (_Pipe(queue_frames, stop) for _ in range(3))
    errors: list[BaseException] = []
    t0 = time.perf_counter()

    def guarded(fn, downstream: _Pipe | None):
        def run():
            try:
                fn()
            except BaseException as exc:  # forwarded to the caller
                errors.append(exc)
                stop.set()
            finally:
                if downstream is not None:
                    downstream.put(_END)
        return run

    def ingest():
        sent = 0
        for block in source.blocks():
            if stop.is_set():
                return
            if paced_input:
                due = t0 + (sent + block.size) / audiofeat.SAMPLE_RATE
                delay = due - time.perf_counter()
                if delay > 0:
                    time.sleep(delay)
            sent += block.size
            if not q_audio.put(block):
                return

    def features():
        ex = audiofeat.StreamingExtractor()
        index = 0

        def emit(f50: np.ndarray) -> bool:
            nonlocal index
            f50 = f50.reshape(f50.shape[0], -1, f50.shape[-1])
            for j in range(0, f50.shape[1] - 1, 2):
                frame = (f50[:, j] + f50[:, j + 1]) * 0.5
                if not q_feat.put((index, frame, time.perf_counter())):
                    return False
                index += 1
            if f50.shape[1] % 2:
                frame = (f50[:, -1] + f50[:, -1]) * 0.5
                if not q_feat.put((index, frame, time.perf_counter())):
                    return False
                index += 1
            return True

        while True:
            block = q_audio.get()
            if block is _END:
                break
            if not emit(ex.push(block)):
                return
        emit(ex.flush())

    def generator():
        frames: list[np.ndarray] = []
        arrivals: list[float] = []
        stitch = ChunkStitcher()
        k, start = 0, 0

        def release(out: np.ndarray) -> bool:
            now = time.perf_counter()
            for row in out:
                i = stitch_pos[0]
                row = row.copy()
                if pose is not None:
                    if i >= len(pose):
                        raise StreamError("pose track shorter than the audio")
                    row[:3] = pose[i]
                latencies.append((now - arrivals[i]) * 1e3)
                if not q_out.put((i, row)):
                    return False
                stitch_pos[0] += 1
            return True

        def run_chunk(i: int, s: int, e: int, final: bool) -> bool:
            audio = model.norm_audio(np.stack(frames[s:e], axis=1))
            chunk = sample_chunk(model, audio, emo_norm, seed, i, n_steps, eta)
            return release(stitch.push(chunk, s, final=final))

        while True:
            item = q_feat.get()
            if item is _END:
                break
            _, frame, arrived = item
            frames.append(frame)
            arrivals.append(arrived)
            while len(frames) >= start + WINDOW:
                if not run_chunk(k, start, start + WINDOW, final=False):
                    return
                k, start = k + 1, start + STRIDE
        if frames and not stop.is_set():
            plan = chunk_plan(len(frames))
            for i in range(k, len(plan)):
                s, e = plan[i]
                if not run_chunk(i, s, e, final=i == len(plan) - 1):
                    return
            release(stitch.flush())

    stitch_pos = [0]
    latencies: list[float] = []
    threads = [threading.Thread(target=guarded(ingest, q_audio), name="ingest", daemon=True),
               threading.Thread(target=guarded(features, q_feat), name="features", daemon=True),
               threading.Thread(target=guarded(generator, q_out), name="generator", daemon=True)]
    old_switch = sys.getswitchinterval()
    sys.setswitchinterval(0.001)
    for th in threads:
        th.start()
    try:
        result = _sink(q_out, stop, policy, prebuffer_s, paced_output, max_frames, t0,
                       on_frame, model.config.latent_dim)
    finally:
        stop.set()
        for th in threads:
            th.join(timeout=30)
        sys.setswitchinterval(old_switch)
    if errors:
        raise errors[0]
    result.latency_ms = np.asarray(latencies, dtype=np.float64)
    result.produced = len(latencies)
    result.algorithmic_latency_s = WINDOW / FPS + (prebuffer_s if paced_output else 0.0)
    return result


def _sink(q_out: _Pipe, stop: threading.Event, policy: str, prebuffer_s: float, paced: bool,
          max_frames: int | None, t0: float, on_frame, latent_dim: int) -> StreamResult:
    rows, indices, emit_t, jitter = [], [], [], []
    events: list[str] = []
    buf: deque = deque()
    ended = False
    underruns = dropped = frozen = 0
    last = np.zeros(latent_dim)

    def pull(timeout: float | None) -> None:
        nonlocal ended
        if ended:
            if timeout:
                time.sleep(timeout)
            return
        try:
            item = q_out.get(timeout=timeout) if timeout is None or timeout > 0 else \
                q_out.q.get_nowait()
        except queue.Empty:
            return
        if item is _END:
            ended = True
        else:
            buf.append(item)

    def emit(i: int, row: np.ndarray, deadline: float | None) -> None:
        nonlocal last
        now = time.perf_counter()
        rows.append(row)
        indices.append(i)
        emit_t.append(now - t0)
        if deadline is not None:
            jitter.append((now - deadline) * 1e3)
        last = row
        if on_frame is not None:
            on_frame(i, row)

    def done(i: int) -> bool:
        return max_frames is not None and i >= max_frames

    i = 0
    if not paced:
        while not done(i):
            while not buf and not ended:
                pull(None)
            if not buf:
                break
            idx, row = buf.popleft()
            emit(idx, row, None)
            i += 1
        return StreamResult(np.array(rows).reshape(-1, latent_dim), np.array(indices, dtype=int),
                            np.array(emit_t), np.array(jitter), np.zeros(0),
                            time.perf_counter() - t0, events=events)

    # wait for the first frame, then hold the jitter buffer
    while not buf and not ended:
        pull(None)
    start = time.perf_counter() + prebuffer_s
    shift = 0.0
    discard_below = 0
    while not done(i):
        deadline = start + shift + i / FPS
        while True:
            remaining = deadline - time.perf_counter()
            if remaining <= 0:
                break
            pull(min(remaining, 0.005))
        while buf and buf[0][0] < max(i, discard_below):
            buf.popleft()
        if not buf:
            pull(0)
        while buf and buf[0][0] < max(i, discard_below):
            buf.popleft()
        if buf and buf[0][0] == i:
            _, row = buf.popleft()
            emit(i, row, deadline)
            i += 1
            continue
        if ended and not buf:
            break
        underruns += 1
        events.append(f"underrun frame={i} policy={policy}")
        if policy == "block":
            while not (buf and buf[0][0] == i) and not ended:
                pull(None)
            if not buf:
                break
            _, row = buf.popleft()
            shift += time.perf_counter() - deadline
            emit(i, row, None)
        elif policy == "drop-late":
            dropped += 1
            discard_below = i + 1
        else:
            frozen += 1
            discard_below = i + 1
            emit(i, last.copy(), None)
        i += 1
    stop.set()
    return StreamResult(np.array(rows).reshape(-1, latent_dim), np.array(indices, dtype=int),
                        np.array(emit_t), np.array(jitter), np.zeros(0),
                        time.perf_counter() - t0, underruns, dropped, frozen, events=events)


def bench(model: DenoiserModel, frames: int = 2500, seed: int = 0, n_steps: int = 10,
          queue_frames: int = 8) -> BenchReport:
    """Unpaced throughput over ``frames`` video frames of synthetic speech."""
    source = SyntheticSource(frames / FPS, seed=seed)
    res = stream(model, source, seed=seed, n_steps=n_steps, paced_input=False,
                 paced_output=False, queue_frames=queue_frames)
    if res.produced != frames:
        raise StreamError(f"produced {res.produced} frames, expected {frames}")
    return res.report()
