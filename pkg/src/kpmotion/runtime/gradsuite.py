"""Finite-difference checks over every trainable operation.

Each target draws seeded random points; points that land within the kink
tolerance of a non-smooth op (Huber corner, hinge, abs) are skipped and the
next seed is drawn, so every reported point is a smooth one.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from kpmotion import audiofeat, losses, stage1
from kpmotion.autograd import Tensor
from kpmotion.motiongen import Conditions, DenoiserConfig, DenoiserModel, diffusion_loss
from kpmotion.rng import make_rng
from kpmotion.synthrig import layout

TOLERANCE = 1e-4
MAX_ATTEMPTS_FACTOR = 20

# (loss_fn, params) for one seeded point
PointFn = Callable[[int], tuple[Callable[..., Tensor], list[np.ndarray]]]


@dataclass(frozen=True)
class GradResult:
    target: str
    points: int
    skipped: int
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.points > 0 and self.max_rel_error <= TOLERANCE

    def to_text(self) -> str:
        return (f"grad.{self.target}.points={self.points}\n"
                f"grad.{self.target}.skipped={self.skipped}\n"
                f"grad.{self.target}.max_rel_error={self.max_rel_error:.3e}\n"
                f"grad.{self.target}.seconds={self.seconds:.2f}\n")


def _total_loss_point(seed: int):
    rng = make_rng(seed, "grad", "total_loss")
    K, B = 21, 2
    lay = layout(K)
    target = rng.normal(0, 0.3, (B, K, 3))
    lm_s = rng.normal(0, 0.3, (B, lay.landmark_index.size, 2))
    lm_d = rng.normal(0, 0.3, (B, lay.landmark_index.size, 2))
    params = [rng.normal(0, 0.3, (B, K, 3)), rng.normal(0, 0.3, (B, K, 3)),
              rng.normal(0, 0.3, (B, K, 3)), rng.normal(0, 0.3, (B, K, 3)),
              rng.choice([-1.0, 1.0], (B, K, 3)) * rng.uniform(0.01, 0.1, (B, K, 3))]

    def fn(x_d, c_i, c_j, x_s, delta):
        parts = {
            "recon": losses.recon_loss(x_d, Tensor(target)),
            "percep": losses.percep_loss(x_d, Tensor(target), batch_axes=1),
            "canonical": losses.canonical_loss(c_i, c_j),
            "landmark": losses.landmark_loss(Tensor(lm_s), x_s, Tensor(lm_d), x_d,
                                             lay.landmark_index),
            "keypoint_prior": losses.keypoint_prior(x_s),
            "deformation_prior": losses.deformation_prior(delta),
        }
        return losses.total_loss(parts)

    return fn, params


def _weighted_sum_point(seed: int):
    rng = make_rng(seed, "grad", "weighted_sum")
    L, T, D = audiofeat.N_LAYERS, 6, 8
    proj = rng.standard_normal((T, D))

    def fn(layers, logits):
        return (audiofeat.weighted_sum(layers, logits) * Tensor(proj)).sum()

    return fn, [rng.standard_normal((L, T, D)), rng.standard_normal(L)]


def _small_denoiser(seed: int) -> DenoiserModel:
    cfg = DenoiserConfig(K=2, d_model=16, n_blocks=2, heads=2, kernel=3, radius=3,
                         audio_dim=4, audio_layers=3, temb_dim=8, audio_hidden=8)
    model = DenoiserModel(cfg, seed=seed)
    # move the zero-initialised params off zero so every path carries gradient
    rng = make_rng(seed, "grad", "denoiser-params")
    for k, v in model.params.items():
        model.params[k] = v + 0.1 * rng.standard_normal(v.shape)
    return model


def _denoiser_point(seed: int, with_loss: bool):
    model = _small_denoiser(seed)
    c = model.config
    rng = make_rng(seed, "grad", "denoiser", int(with_loss))
    B, T = 2, 8
    t = rng.integers(1, model.schedule.T_steps + 1, B)
    cond = Conditions(rng.standard_normal((c.audio_layers, B, T, c.audio_dim)),
                      rng.standard_normal((B, c.emotion_dim)))
    names = sorted(model.params)
    proj = rng.standard_normal((B, T, c.latent_dim))
    x = rng.standard_normal((B, T, c.latent_dim))
    eps = rng.standard_normal((B, T, c.latent_dim))

    if with_loss:
        def loss_fn(*values):
            return diffusion_loss(model, x, t, eps, cond, params=dict(zip(names, values)))

        return loss_fn, [model.params[k] for k in names]

    def fn(x_in, *values):
        return (model.forward(dict(zip(names, values)), x_in, t, cond) * Tensor(proj)).sum()

    return fn, [x] + [model.params[k] for k in names]


def _stage1_point(seed: int):
    model = stage1.EncoderModel(K=21, hidden=16, seed=seed)
    rng = make_rng(seed, "grad", "stage1")
    obs = rng.normal(0, 0.5, (3, model.obs_dim))
    names = sorted(model.params)
    out_dims = {h: model.forward(model.tensors(), obs[:1], heads=(h,))[h].shape[1:]
                for h in stage1.HEADS}
    proj = {h: rng.standard_normal((3,) + tuple(d)) for h, d in out_dims.items()}

    def fn(*values):
        P = dict(zip(names, values))
        out = model.forward(P, obs)
        total = Tensor(0.0)
        for h in stage1.HEADS:
            total = total + (out[h] * Tensor(proj[h])).sum()
        return total

    return fn, [model.params[k] for k in names]


TARGETS: dict[str, tuple[PointFn, float, int | None]] = {
    # name: (point factory, eps, coordinates checked per array)
    "total_loss": (_total_loss_point, 1e-6, 24),
    "weighted_sum": (_weighted_sum_point, 1e-6, None),
    "denoiser": (lambda s: _denoiser_point(s, False), 1e-4, 6),
    "diffusion_loss": (lambda s: _denoiser_point(s, True), 1e-5, 6),
    "stage1_heads": (_stage1_point, 1e-6, 8),
}


def check_target(name: str, points: int = 20, seed: int = 0) -> GradResult:
    if name not in TARGETS:
        raise KeyError(f"unknown grad-check target {name!r}")
    factory, eps, coords = TARGETS[name]
    t0 = time.perf_counter()
    done = skipped = 0
    worst = 0.0
    attempt = 0
    while done < points and attempt < points * MAX_ATTEMPTS_FACTOR:
        fn, params = factory(seed * 100_003 + attempt)
        attempt += 1
        try:
            err = losses.grad_check(fn, params, eps, max_coords=coords, seed=attempt)
        except losses.KinkAdjacentError:
            skipped += 1
            continue
        worst = max(worst, err)
        done += 1
    return GradResult(name, done, skipped, worst, time.perf_counter() - t0)


def run(targets=None, points: int = 20, seed: int = 0) -> list[GradResult]:
    return [check_target(t, points, seed) for t in (targets or TARGETS)]
