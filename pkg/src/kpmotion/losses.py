"""Stage-1 objectives and gradient verification.

All losses accept numpy arrays or :class:`~kpmotion.autograd.Tensor` inputs.
With plain arrays they return a float; with tensors they return a scalar
tensor that can be backpropagated.

Per-point Huber terms (canonical and landmark losses) sum the elementwise
Huber penalty over the point's coordinates and then average over points,
so a uniform 0.1 offset on every canonical coordinate costs
``3 * 0.5 * 0.01 = 0.015``. The standalone :func:`huber` averages over all
components.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from functools import lru_cache
from typing import Callable, Mapping, Sequence

import numpy as np

from kpmotion.autograd import (Tensor, as_tensor, huber_elementwise, no_grad,
                               track_kinks)
from kpmotion.rng import make_rng

HUBER_DELTA = 1.0
KEYPOINT_FLOOR = 0.05
PERCEP_DIM = 16


class LossError(ValueError):
    """Shape mismatch or non-finite loss term."""


class GradCheckError(RuntimeError):
    """Finite differences could not be evaluated."""


class KinkAdjacentError(GradCheckError):
    """The check point lies too close to a non-differentiable kink."""


@dataclass(frozen=True)
class LossWeights:
    recon: float = 0.1
    percep: float = 1.0
    canonical: float = 0.2
    landmark: float = 0.2
    equivariance: float = 0.01
    keypoint_prior: float = 0.01
    deformation_prior: float = 0.01

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (np.isfinite(v) and v >= 0):
                raise LossError(f"loss weight {f.name}={v} must be finite and >= 0")

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class LandmarkSet:
    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 1:
            raise LossError(f"landmarks must be (N>=1, 2), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise LossError("landmarks contain NaN or Inf")
        object.__setattr__(self, "points", pts)

    @property
    def N(self) -> int:
        return self.points.shape[0]


def _lift(*xs):
    plain = not any(isinstance(x, Tensor) for x in xs)
    return plain, [as_tensor(getattr(x, "points", x)) for x in xs]


def _out(plain: bool, t: Tensor):
    return float(t.data) if plain else t


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise LossError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def huber(a, b, delta: float = HUBER_DELTA):
    """Mean elementwise Huber penalty of ``a - b``."""
    if delta <= 0:
        raise LossError("huber delta must be positive")
    plain, (a, b) = _lift(a, b)
    _same_shape(a, b, "huber")
    return _out(plain, huber_elementwise(a - b, delta).mean())


def canonical_loss(canon_i, canon_j, delta: float = HUBER_DELTA):
    """Huber distance between two canonical estimates of the same person.

    Inputs are (..., K, 3); the per-keypoint penalty sums over coordinates and
    the result averages over keypoints (and any batch axes).
    """
    plain, (a, b) = _lift(canon_i, canon_j)
    _same_shape(a, b, "canonical_loss")
    return _out(plain, huber_elementwise(a - b, delta).sum(axis=-1).mean())


def landmark_loss(landmarks_s, x_s, landmarks_d, x_d, index: Sequence[int],
                  delta: float = HUBER_DELTA, pairing: str = "own"):
    """Huber fit of keypoint xy to 2D landmarks for a source and a driving frame.

    ``x_s``/``x_d`` are (..., K, 3) keypoints; ``landmarks_*`` are (..., N, 2)
    and ``index`` selects the N keypoints matched to landmarks. With
    ``pairing="own"`` each frame is compared with its own landmarks; with
    ``pairing="shared"`` both frames are compared with ``landmarks_s``.
    """
    if pairing not in ("own", "shared"):
        raise LossError(f"unknown landmark pairing {pairing!r}")
    plain, (ls, xs, ld, xd) = _lift(landmarks_s, x_s, landmarks_d, x_d)
    index = np.asarray(index, dtype=int)
    K = xs.shape[-2]
    if index.size == 0 or index.min() < -K or index.max() >= K:
        raise LossError(f"landmark index out of range for K={K}")
    N = index.size
    if ls.shape[-2:] != (N, 2) or ld.shape[-2:] != (N, 2):
        raise LossError(f"landmarks {ls.shape}/{ld.shape} do not match N={N}")
    if pairing == "shared":
        ld = ls
    hs = huber_elementwise(ls - xs[..., index, :2], delta).sum(axis=-1)
    hd = huber_elementwise(ld - xd[..., index, :2], delta).sum(axis=-1)
    return _out(plain, (hs + hd).mean() * 0.5)


def recon_loss(pred, target):
    """Mean squared error over all entries."""
    plain, (p, t) = _lift(pred, target)
    _same_shape(p, t, "recon_loss")
    d = p - t
    return _out(plain, (d * d).mean())


@lru_cache(maxsize=32)
def percep_projection(in_dim: int, seed: int = 0, out_dim: int = PERCEP_DIM) -> np.ndarray:
    """Frozen random feature map standing in for a pretrained perceptual network."""
    P = make_rng(seed, "percep", in_dim, out_dim).standard_normal((in_dim, out_dim))
    P /= np.sqrt(in_dim)
    P.setflags(write=False)
    return P


def percep_loss(pred, target, seed: int = 0, batch_axes: int = 0):
    """MSE between fixed random 16-d projections of each sample.

    The leading ``batch_axes`` axes index samples; everything after them is
    flattened into one feature vector per sample.
    """
    plain, (p, t) = _lift(pred, target)
    _same_shape(p, t, "percep_loss")
    lead = p.shape[:batch_axes]
    n = int(np.prod(lead)) if lead else 1
    d = (p - t).reshape(n, -1)
    P = percep_projection(d.shape[1], seed)
    f = d @ P
    return _out(plain, (f * f).mean())


@dataclass(frozen=True)
class Similarity2D:
    """Rotation about the z axis, isotropic scale and xy shift applied to xy only."""

    angle: float = 0.0
    scale: float = 1.0
    shift: tuple[float, float] = (0.0, 0.0)
    max_angle: float = np.deg2rad(30.0)

    def __post_init__(self):
        if abs(self.angle) > self.max_angle + 1e-12:
            raise LossError(f"rotation {np.rad2deg(self.angle):.1f} deg exceeds 30 deg")
        if not 0.8 <= self.scale <= 1.25:
            raise LossError(f"scale {self.scale} outside [0.8, 1.25]")

    @classmethod
    def random(cls, rng: np.random.Generator, max_shift: float = 0.1) -> "Similarity2D":
        return cls(float(rng.uniform(-np.deg2rad(30), np.deg2rad(30))),
                   float(np.exp(rng.uniform(np.log(0.8), np.log(1.25)))),
                   tuple(rng.uniform(-max_shift, max_shift, 2)))

    @property
    def linear(self) -> np.ndarray:
        c, s = np.cos(self.angle), np.sin(self.angle)
        # row-vector form: xy @ A
        return self.scale * np.array([[c, s], [-s, c]])

    def apply_xy(self, xy):
        return as_tensor(xy) @ self.linear + np.asarray(self.shift)

    def apply_keypoints(self, pts: np.ndarray) -> np.ndarray:
        out = np.array(pts, dtype=np.float64)
        out[..., :2] = out[..., :2] @ self.linear + np.asarray(self.shift)
        return out


def equivariance_loss(encoder: Callable, frame: np.ndarray, transform: Similarity2D,
                      delta: float = HUBER_DELTA):
    """Huber gap between transforming the encoder's keypoints and encoding the
    transformed frame.

    ``encoder`` maps flattened observations (..., 3K) to keypoints (..., K, 3),
    as arrays or tensors. ``frame`` is (..., 3K).
    """
    frame = np.asarray(frame, dtype=np.float64)
    K = frame.shape[-1] // 3
    moved = transform.apply_keypoints(frame.reshape(*frame.shape[:-1], K, 3))
    kp = as_tensor(encoder(frame))
    kp_moved = as_tensor(encoder(moved.reshape(frame.shape)))
    lhs = transform.apply_xy(kp[..., :2])
    out = huber_elementwise(lhs - kp_moved[..., :2], delta).mean()
    return out if out.requires_grad else float(out.data)


def keypoint_prior(x, floor: float = KEYPOINT_FLOOR):
    """Mean hinge penalty on keypoint pairs closer than ``floor``."""
    plain, (x,) = _lift(x)
    K = x.shape[-2]
    iu, ju = np.triu_indices(K, k=1)
    d = x[..., iu, :] - x[..., ju, :]
    dist = ((d * d).sum(axis=-1) + 1e-12).sqrt()
    return _out(plain, (floor - dist).relu().mean())


def deformation_prior(delta):
    """Mean absolute expression deformation."""
    plain, (d,) = _lift(delta)
    return _out(plain, d.abs().mean())


LOSS_TERMS = tuple(f.name for f in fields(LossWeights))


def total_loss(parts: Mapping[str, object], weights: LossWeights = LossWeights()):
    """Weighted sum of whichever loss terms are present in ``parts``."""
    unknown = set(parts) - set(LOSS_TERMS)
    if unknown:
        raise LossError(f"unknown loss terms {sorted(unknown)}")
    w = weights.as_dict()
    plain = not any(isinstance(v, Tensor) for v in parts.values())
    total = Tensor(0.0)
    for name in LOSS_TERMS:
        if name not in parts:
            continue
        term = as_tensor(parts[name])
        if not np.all(np.isfinite(term.data)):
            raise LossError(f"loss term {name!r} is not finite ({term.data})")
        total = total + term * w[name]
    return _out(plain, total)


def format_breakdown(breakdown: Mapping[str, float], prefix: str = "loss") -> str:
    """``loss.total=...`` style key=value lines."""
    return "\n".join(f"{prefix}.{k}={float(v):.9g}" for k, v in breakdown.items())


def grad_check(loss_fn: Callable[..., Tensor], params: Sequence[np.ndarray],
               eps: float = 1e-6, *, max_coords: int | None = None, seed: int = 0,
               floor: float = 1e-6, kink_tol: float | None = None) -> float:
    """Max relative error between backprop gradients and central differences.

    ``loss_fn`` takes one tensor per entry of ``params`` and returns a scalar
    tensor. Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    When ``max_coords`` is set, that many seeded coordinates are checked per
    parameter array. Points where any non-smooth op argument lies within
    ``kink_tol`` (default ``1000 * eps``) of its kink raise
    :class:`KinkAdjacentError`.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise GradCheckError(f"eps={eps} outside [1e-7, 1e-3]")
    if kink_tol is None:
        kink_tol = 1e3 * eps
    base = [np.array(p, dtype=np.float64) for p in params]
    tensors = [Tensor(p.copy(), requires_grad=True) for p in base]
    with track_kinks() as kinks:
        loss = loss_fn(*tensors)
    if kinks.margin < kink_tol:
        raise KinkAdjacentError(f"kink margin {kinks.margin:.3g} below {kink_tol:.3g}")
    if not np.isfinite(loss.data):
        raise GradCheckError("loss is not finite at the check point")
    loss.backward()
    rng = make_rng(seed, "grad_check")
    worst = 0.0
    for k, (p, t) in enumerate(zip(base, tensors)):
        analytic = np.zeros_like(p) if t.grad is None else t.grad
        coords = np.arange(p.size)
        if max_coords is not None and p.size > max_coords:
            coords = rng.choice(p.size, size=max_coords, replace=False)
        for c in coords:
            vals = []
            for sign in (1.0, -1.0):
                trial = [q.copy() for q in base]
                trial[k].reshape(-1)[c] += sign * eps
                with no_grad():
                    v = float(loss_fn(*[Tensor(q) for q in trial]).data)
                if not np.isfinite(v):
                    raise GradCheckError(f"non-finite loss at perturbed point (param {k})")
                vals.append(v)
            numeric = (vals[0] - vals[1]) / (2 * eps)
            a = analytic.reshape(-1)[c]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, rel)
    return worst
