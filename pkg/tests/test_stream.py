import threading
import time

import numpy as np
import pytest
from hypothesis import given, strategies as st

from kpmotion import motiongen as mg
from kpmotion.audiofeat import AudioError
from kpmotion.runtime import stream as st_
from kpmotion.synthrig import synth_speech

TINY = mg.DenoiserConfig(d_model=16, n_blocks=1, heads=2, kernel=3, radius=3, audio_hidden=8)


@pytest.fixture(scope="module")
def model():
    m = mg.DenoiserModel(TINY, seed=1)
    rng = np.random.default_rng(1)
    m.params = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in m.params.items()}
    return m


# -- equivalence ----------------------------------------------------------------------

@pytest.mark.parametrize("seconds", [0.5, 5.0, 12.3])
def test_stream_over_file_equals_generate(model, seconds):
    pcm = synth_speech(3, seconds)
    offline = mg.generate(model, pcm, seed=4, n_steps=2)
    res = st_.stream(model, st_.PcmSource(pcm), seed=4, n_steps=2, paced_output=False)
    assert np.array_equal(res.frames, offline.latents)
    assert list(res.indices) == list(range(offline.T))
    assert res.produced == offline.T


def test_stream_with_emotion_and_pose_equals_generate(model):
    pcm = synth_speech(5, 6.0)
    emo = mg.EmotionDescriptor(np.full(63, 0.05))
    pose = np.tile([0.1, 0.0, -0.1], (150, 1))
    offline = mg.generate(model, pcm, emotion=emo, seed=1, n_steps=2, pose=pose)
    res = st_.stream(model, st_.PcmSource(pcm), emotion=emo, seed=1, n_steps=2,
                     paced_output=False, pose=pose)
    assert np.array_equal(res.frames, offline.latents)


def test_empty_source_and_bad_policy(model):
    with pytest.raises(AudioError):
        st_.PcmSource(np.zeros(0))
    with pytest.raises(st_.StreamError):
        st_.stream(model, st_.PcmSource(np.zeros(4000)), policy="skip")


def test_generator_errors_reach_the_caller(model):
    with pytest.raises(st_.StreamError, match="pose"):
        st_.stream(model, st_.PcmSource(synth_speech(0, 2.0)), n_steps=1,
                   paced_output=False, pose=np.zeros((10, 3)))


# -- sources ------------------------------------------------------------------------------

def test_synthetic_source_length_and_determinism():
    a = np.concatenate(list(st_.SyntheticSource(2.5, seed=3, segment_s=1.0).blocks()))
    b = np.concatenate(list(st_.SyntheticSource(2.5, seed=3, segment_s=1.0).blocks()))
    assert a.size == 40000 and np.array_equal(a, b)


def test_endless_source_stops_at_max_frames(model):
    res = st_.stream(model, st_.SyntheticSource(None, seed=1), n_steps=1,
                     paced_output=False, max_frames=130)
    assert len(res.frames) == 130


# -- pacing and underrun policies ---------------------------------------------------------

def test_paced_output_jitter(model):
    res = st_.stream(model, st_.PcmSource(synth_speech(2, 3.0)), n_steps=1, prebuffer_s=0.3)
    assert res.underruns == 0 and len(res.frames) == 75
    assert res.report().jitter_p95_ms <= 10.0
    gaps = np.diff(res.emit_times)
    assert np.median(gaps) == pytest.approx(1 / 25, abs=2e-3)


def run_sink(policy, n=12, gap_after=4, delay=0.3):
    """Feed the sink frames 0..gap_after at once, the rest after ``delay`` seconds."""
    stop = threading.Event()
    q = st_._Pipe(64, stop)
    rows = [np.full(2, float(i)) for i in range(n)]
    for i in range(gap_after + 1):
        q.put((i, rows[i]))

    def late():
        time.sleep(delay)
        for i in range(gap_after + 1, n):
            q.put((i, rows[i]))
        q.put(st_._END)

    th = threading.Thread(target=late, daemon=True)
    t0 = time.perf_counter()
    th.start()
    res = st_._sink(q, stop, policy, 0.0, True, None, t0, None, 2)
    th.join()
    return res


def test_block_policy_waits_and_keeps_every_frame():
    res = run_sink("block")
    assert res.underruns >= 1 and res.dropped == 0 and res.frozen == 0
    assert list(res.indices) == list(range(12))
    assert np.array_equal(res.frames[:, 0], np.arange(12.0))


def test_drop_late_policy_skips_frames():
    res = run_sink("drop-late")
    assert res.underruns >= 1 and res.dropped == res.underruns
    assert len(res.frames) == 12 - res.dropped
    assert np.all(np.diff(res.indices) >= 1)
    assert np.array_equal(res.frames[:, 0], res.indices.astype(float))


def test_emit_freeze_policy_repeats_last_frame():
    res = run_sink("emit-freeze")
    assert res.underruns >= 1 and res.frozen == res.underruns
    assert list(res.indices) == list(range(len(res.indices)))
    frozen = res.frames[5:5 + res.frozen, 0]
    assert np.all(frozen == 4.0)
    assert any("underrun" in e for e in res.events)


# -- reports --------------------------------------------------------------------------------

@given(st.lists(st.floats(0, 1e4, allow_nan=False), max_size=200),
       st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_bench_report_invariants(lat, frames, wall):
    r = st_.BenchReport.from_latencies(frames, wall, lat)
    assert r.p50_ms <= r.p95_ms <= r.p99_ms
    assert r.fps == pytest.approx(frames / wall)
    assert r.rtf == pytest.approx(r.fps / 25)


def test_bench_report_rejects_bad_values():
    with pytest.raises(ValueError):
        st_.BenchReport(10, 1.0, 5.0, 4.0, 6.0)
    with pytest.raises(ValueError):
        st_.BenchReport(-1, 1.0, 1.0, 1.0, 1.0)


def test_bench_report_text():
    text = st_.BenchReport(50, 2.0, 1.0, 2.0, 3.0).to_text(seed=3)
    lines = dict(line.split("=", 1) for line in text.splitlines())
    assert lines["bench.frames"] == "50" and lines["bench.fps"] == "25.000"
    assert lines["bench.rtf"] == "1.0000" and lines["bench.seed"] == "3"
    assert lines["bench.algorithmic_latency_s"] == "5.000"


def test_bench_counts_frames(model):
    r = st_.bench(model, frames=300, n_steps=1)
    assert r.frames == 300 and r.fps > 0
