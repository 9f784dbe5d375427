"""Evaluation metrics: lip-sync surrogate and reenactment table."""

from __future__ import annotations

import logging
from typing import NamedTuple

import numpy as np

from kpmotion import audiofeat, stage1
from kpmotion.kpspace import compose_sequence
from kpmotion.motiongen import DiffusionError, MotionSequence
from kpmotion.rng import derive_seed, make_rng
from kpmotion.synthrig import Rig, layout

log = logging.getLogger(__name__)


class SyncScore(NamedTuple):
    r: float
    constant: bool


def pearson(a: np.ndarray, b: np.ndarray) -> SyncScore:
    """Pearson correlation; a constant track gives 0 with ``constant`` set."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DiffusionError(f"track lengths differ: {a.shape} vs {b.shape}")
    da, db = a - a.mean(), b - b.mean()
    na, nb = np.sqrt((da * da).sum()), np.sqrt((db * db).sum())
    if na <= 1e-12 * max(1.0, np.abs(a).max()) or nb <= 1e-12 * max(1.0, np.abs(b).max()):
        log.warning("constant track in sync evaluation; correlation defined as 0")
        return SyncScore(0.0, True)
    return SyncScore(float(np.clip((da * db).sum() / (na * nb), -1.0, 1.0)), False)


def lip_aperture(sequence: MotionSequence | np.ndarray, canonical: np.ndarray,
                 lip_pair: tuple[int, int] | None = None) -> np.ndarray:
    latents = sequence.latents if isinstance(sequence, MotionSequence) else np.asarray(sequence)
    canonical = np.asarray(canonical)
    u, l = lip_pair or layout(canonical.shape[0]).lip_pair
    kp = compose_sequence(canonical, latents)
    return np.linalg.norm(kp[:, u] - kp[:, l], axis=-1)


def eval_sync(sequence: MotionSequence | np.ndarray, pcm, canonical: np.ndarray,
              lip_pair: tuple[int, int] | None = None) -> SyncScore:
    """Correlation between the audio loudness envelope and lip aperture."""
    env = audiofeat.envelope(pcm)
    ap = lip_aperture(sequence, canonical, lip_pair)
    if env.size != ap.size:
        raise DiffusionError(f"audio has {env.size} frames, motion {ap.size}")
    return pearson(env, ap)


def shuffled_sync(sequence, pcm, canonical, seed: int) -> SyncScore:
    """Sync against a seeded permutation of the envelope frames (chance baseline)."""
    env = audiofeat.envelope(pcm)
    ap = lip_aperture(sequence, canonical)
    return pearson(make_rng(seed, "shuffle").permutation(env), ap)


def eval_reenactment(model: stage1.Decomposer, rig: Rig, n: int = 200,
                     subtle: Rig | None = None, seed: int = 0) -> dict[str, float]:
    """Self/cross reenactment keypoint MSE plus the stage-1 disentanglement metrics."""
    rng = make_rng(seed, "reenact")
    eps = rig.all_episodes()
    src_obs, tgt_obs, tgt_true = [], [], []
    for _ in range(n):
        ep = eps[int(rng.integers(len(eps)))]
        s, t = (int(v) for v in rng.integers(0, ep.T, 2))
        src_obs.append(ep.observations[s])
        tgt_obs.append(ep.observations[t])
        tgt_true.append(ep.keypoints[t])
    src = model.encode_batch(np.stack(src_obs))
    tgt = model.encode_batch(np.stack(tgt_obs))
    self_mse = float(((tgt.retarget_onto(src.canonical) - np.stack(tgt_true)) ** 2).mean())
    pairs = rig.cross_pairs(n, derive_seed(seed, "cross"))
    a = model.encode_batch(np.stack([p.source_obs for p in pairs]))
    b = model.encode_batch(np.stack([p.driving_obs for p in pairs]))
    truth = np.stack([p.truth.points for p in pairs])
    cross_mse = float(((b.retarget_onto(a.canonical) - truth) ** 2).mean())
    out = {"self_mse": self_mse, "cross_mse": cross_mse,
           "leakage": stage1.leakage_metric(model, rig, max(30, min(n, 60)))}
    if subtle is not None:
        out["subtle_err"] = stage1.subtle_expression_error(model, subtle, n)
    return out


def format_table(table: dict[str, float], prefix: str = "eval", **meta) -> str:
    rows = [f"{prefix}.{k}={v:.9g}" for k, v in table.items()]
    rows += [f"{prefix}.{k}={v}" for k, v in meta.items()]
    return "\n".join(rows) + "\n"
