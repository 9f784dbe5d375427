from dataclasses import replace

import numpy as np
import pytest

from kpmotion import stage1
from kpmotion.autograd import no_grad
from kpmotion.kpspace import KeypointError, Rotation
from kpmotion.losses import LossError
from kpmotion.rng import derive_seed, make_rng
from kpmotion.synthrig import Rig, RigError, RigOracle

SMALL = stage1.TrainConfig(steps=100, batch_size=16, hidden=32, n_identities=24,
                           episode_frames=30)


@pytest.fixture(scope="module")
def small_rig():
    return stage1.training_rig(SMALL)


@pytest.fixture(scope="module")
def eval_rig():
    return Rig.build(10, 2, 30, 3)


def fixed_loss(model, rig, config, seed=123):
    batch = stage1.sample_batch(rig, 64, make_rng(seed, "eval"))
    with no_grad():
        total, _ = stage1.objective(model, model.tensors(), batch, config)
    return float(total.data)


# -- model ------------------------------------------------------------------------

def test_zero_model_gives_zero_factors():
    m = stage1.EncoderModel.zeros()
    f = m.encode(np.random.default_rng(0).normal(size=63))
    assert np.array_equal(f.canonical.points, np.zeros((21, 3)))
    assert f.rotation == Rotation.identity()
    assert np.array_equal(f.expression, np.zeros((21, 3)))
    assert np.array_equal(f.translation, np.zeros(3))


def test_output_shapes_k21():
    fb = stage1.EncoderModel(hidden=16).encode_batch(np.zeros((5, 63)))
    assert fb.canonical.shape == (5, 21, 3) and fb.euler.shape == (5, 3)
    assert fb.expression.shape == (5, 21, 3) and fb.translation.shape == (5, 3)


def test_dimension_mismatch_rejected():
    with pytest.raises(KeypointError):
        stage1.EncoderModel(hidden=8).encode(np.zeros(60))


def test_parameter_count():
    m = stage1.EncoderModel(K=21, hidden=16)
    # per head: 63*16 + 16 + 16*out + out, outputs 63, 3, 63, 3
    expected = sum(63 * 16 + 16 + 16 * o + o for o in (63, 3, 63, 3))
    assert m.n_params == expected


def test_expression_head_bounded():
    m = stage1.EncoderModel(hidden=8)
    m.params["expression.b2"][:] = 100.0
    fb = m.encode_batch(np.zeros((1, 63)))
    assert np.abs(fb.expression).max() <= m.expression_limit


def test_train_config_validation():
    with pytest.raises(ValueError):
        stage1.TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        stage1.TrainConfig(steps=0)


# -- training --------------------------------------------------------------------------

def test_train_step_deterministic(small_rig):
    outs = []
    for _ in range(2):
        m = stage1.EncoderModel(hidden=32, seed=5)
        batch = stage1.sample_batch(small_rig, 8, make_rng(1, "b"))
        outs.append((stage1.train_step(m, batch, SMALL), m.params))
    assert outs[0][0] == outs[1][0]
    for k in outs[0][1]:
        assert np.array_equal(outs[0][1][k], outs[1][1][k])


@pytest.mark.parametrize("variant,term", [("no_canonical", "canonical"),
                                          ("no_landmark", "landmark")])
def test_ablation_term_reported_zero_and_excluded(small_rig, variant, term):
    cfg = stage1.ablation(SMALL, variant)
    batch = stage1.sample_batch(small_rig, 8, make_rng(2, "b"))
    out = stage1.train_step(stage1.EncoderModel(hidden=32, seed=1), batch, cfg)
    assert out[term] == 0.0
    # gradient check: the ablated objective equals the full one minus the weighted term
    m = stage1.EncoderModel(hidden=32, seed=1)
    with no_grad():
        full, parts = stage1.objective(m, m.tensors(), batch, SMALL)
        abl, _ = stage1.objective(m, m.tensors(), batch, cfg)
    w = getattr(SMALL.weights, term)
    assert float(abl.data) == pytest.approx(float(full.data) - w * float(parts[term].data),
                                            rel=1e-12)


def test_unknown_ablation_rejected():
    with pytest.raises(ValueError):
        stage1.ablation(SMALL, "no_recon")


def test_nan_aborts_with_term_name(small_rig):
    batch = stage1.sample_batch(small_rig, 4, make_rng(3, "b"))
    batch["lm_t"] = batch["lm_t"].copy()
    batch["lm_t"][0, 0, 0] = np.nan
    with pytest.raises(LossError, match="landmark"):
        stage1.train_step(stage1.EncoderModel(hidden=32), batch, SMALL)


def test_loss_decreases_over_first_100_steps(small_rig):
    ratios = []
    for seed in range(5):
        cfg = replace(SMALL, seed=seed)
        m0 = stage1.EncoderModel(cfg.K, cfg.hidden, seed=derive_seed(seed, "init"))
        before = fixed_loss(m0, small_rig, cfg)
        m, _ = stage1.train(cfg, small_rig)
        ratios.append(fixed_loss(m, small_rig, cfg) / before)
    assert np.median(ratios) < 1.0
    # frozen on first run with the default lr and clip
    assert np.median(ratios) == pytest.approx(0.29729096083750783, rel=1e-9)


def test_training_run_is_pure(small_rig):
    cfg = replace(SMALL, steps=5)
    a, ha = stage1.train(cfg, small_rig)
    b, hb = stage1.train(cfg, small_rig)
    assert ha == hb
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])


# -- metrics -------------------------------------------------------------------------------

def test_oracle_leakage_is_zero(eval_rig):
    assert stage1.leakage_metric(RigOracle(eval_rig.all_episodes()), eval_rig, 30) == 0.0


def test_passthrough_leakage_pinned(eval_rig):
    leak = stage1.leakage_metric(stage1.PassthroughEncoder(), eval_rig, 30)
    assert leak >= 0.5
    # frozen on first run
    assert leak == pytest.approx(0.8014179112666494, rel=1e-12)


def test_leakage_preconditions(eval_rig):
    with pytest.raises(ValueError):
        stage1.leakage_metric(stage1.PassthroughEncoder(), eval_rig, 29)
    single = Rig.build(1, 2, 10, 0)
    with pytest.raises(RigError):
        stage1.leakage_metric(stage1.PassthroughEncoder(), single, 30)


def test_leakage_pairs_have_maximal_expression_gap(eval_rig):
    pairs = stage1.leakage_pairs(eval_rig, 10)
    assert sorted(p[2] for p in pairs) == list(range(10))


def test_subtle_oracle_is_zero():
    rig = stage1.subtle_rig(4, n_identities=6, T=20)
    assert stage1.subtle_expression_error(RigOracle(rig.all_episodes()), rig, 50) == 0.0


def test_subtle_rig_respects_amplitude():
    rig = stage1.subtle_rig(5, n_identities=4, T=20)
    assert max(np.abs(ep.expression).max() for ep in rig.all_episodes()) <= 0.05 + 1e-12
    with pytest.raises(RigError):
        stage1.subtle_expression_error(stage1.PassthroughEncoder(), Rig.build(3, 1, 20, 0))


def test_untrained_metrics_positive(eval_rig):
    m = stage1.EncoderModel(hidden=16, seed=1)
    assert stage1.leakage_metric(m, eval_rig, 30) > 0
    rig = stage1.subtle_rig(4, n_identities=6, T=20)
    assert stage1.subtle_expression_error(m, rig, 50) > 0


# -- persistence --------------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    m = stage1.EncoderModel(hidden=16, seed=9)
    p = tmp_path / "model.tkn"
    stage1.save_model(m, p, seed=9)
    assert p.read_bytes()[:5] == b"TKNv1"
    back = stage1.load_model(p)
    assert back.K == 21 and back.hidden == 16
    for k in m.params:
        assert np.array_equal(back.params[k], m.params[k])
    obs = np.random.default_rng(0).normal(size=(3, 63))
    assert np.array_equal(back.encode_batch(obs).canonical, m.encode_batch(obs).canonical)
