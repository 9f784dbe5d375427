import logging

import numpy as np
import pytest

from kpmotion import stage1
from kpmotion.motiongen import DiffusionError, MotionSequence
from kpmotion.runtime import evaluate
from kpmotion.synthrig import Rig, RigOracle


@pytest.fixture(scope="module")
def speech_rig():
    return Rig.build(3, 1, 125, 11, speech=True)


# -- pearson --------------------------------------------------------------------------

def test_pearson_examples():
    x = np.arange(10.0)
    assert evaluate.pearson(x, 2 * x + 1) == (1.0, False)
    assert evaluate.pearson(x, -x).r == -1.0
    with pytest.raises(DiffusionError):
        evaluate.pearson(x, x[:-1])


def test_constant_track_is_zero_with_flag(caplog):
    with caplog.at_level(logging.WARNING):
        assert evaluate.pearson(np.ones(5), np.arange(5.0)) == (0.0, True)
    assert "constant" in caplog.text


# -- lip-sync surrogate ---------------------------------------------------------------

def test_ground_truth_sync_is_high(speech_rig):
    for ep in speech_rig.all_episodes():
        score = evaluate.eval_sync(ep.latents(), ep.pcm, ep.identity.canonical.points)
        assert score.r >= 0.99 and not score.constant


def test_lip_aperture_matches_rig(speech_rig):
    ep = speech_rig.episodes[0][0]
    ap = evaluate.lip_aperture(MotionSequence(ep.latents()), ep.identity.canonical.points)
    assert np.allclose(ap, ep.lip_aperture(), atol=1e-9)


def test_shuffled_sync_is_near_chance(speech_rig):
    ep = speech_rig.episodes[1][0]
    canon = ep.identity.canonical.points
    rs = [evaluate.shuffled_sync(ep.latents(), ep.pcm, canon, s).r for s in range(100)]
    assert abs(np.median(rs)) <= 0.2


def test_silence_gives_zero_with_flag(speech_rig):
    ep = speech_rig.episodes[0][0]
    score = evaluate.eval_sync(ep.latents(), np.zeros(ep.pcm.size), ep.identity.canonical.points)
    assert score == (0.0, True)


def test_sync_length_mismatch(speech_rig):
    ep = speech_rig.episodes[0][0]
    with pytest.raises(DiffusionError):
        evaluate.eval_sync(ep.latents()[:-1], ep.pcm, ep.identity.canonical.points)


# -- reenactment table ----------------------------------------------------------------

@pytest.fixture(scope="module")
def reenact_rig():
    return Rig.build(6, 2, 20, 3)


def test_oracle_reenactment_is_zero(reenact_rig):
    subtle = stage1.subtle_rig(4, n_identities=4, T=20)
    oracle = RigOracle(reenact_rig.all_episodes() + subtle.all_episodes())
    table = evaluate.eval_reenactment(oracle, reenact_rig, 40, subtle)
    assert set(table) == {"self_mse", "cross_mse", "leakage", "subtle_err"}
    assert all(v <= 1e-9 for v in table.values())


def test_untrained_reenactment_is_positive(reenact_rig):
    subtle = stage1.subtle_rig(4, n_identities=4, T=20)
    table = evaluate.eval_reenactment(stage1.EncoderModel(hidden=16, seed=2), reenact_rig, 40,
                                      subtle)
    assert all(v > 0 for v in table.values())


def test_reenactment_is_deterministic(reenact_rig):
    m = stage1.EncoderModel(hidden=16, seed=2)
    assert (evaluate.eval_reenactment(m, reenact_rig, 30, seed=5)
            == evaluate.eval_reenactment(m, reenact_rig, 30, seed=5))


def test_format_table():
    text = evaluate.format_table({"a": 0.5, "b": 1e-12}, seed=3)
    assert text == "eval.a=0.5\neval.b=1e-12\neval.seed=3\n"
