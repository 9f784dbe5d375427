"""3D implicit keypoints and their composition algebra.

Conventions
-----------
* Keypoints are stored as rows, shape ``(K, 3)``, in a canonical unit cube
  ``[-1, 1]^3``.
* Rotations act on row vectors from the right: ``x = x_c @ R + delta + t``.
  ``R`` is the transpose of the familiar column-vector head rotation
  ``M = Ry(yaw) @ Rx(pitch) @ Rz(roll)``, so ``x_c @ R == (M @ x_c.T).T``.
* Euler angles are radians. Pitch is the middle angle and the principal
  branch is ``|pitch| < pi/2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import IO, Iterable, NamedTuple

import numpy as np

DEFAULT_K = 21
MIN_K, MAX_K = 4, 64
EXPRESSION_LIMIT = 0.5
GIMBAL_MARGIN = 1e-6
KP_MAGIC = "#takin-kp"
KP_VERSION = "v1"


class KeypointError(ValueError):
    """Invalid keypoint data or incompatible keypoint counts."""


class GimbalError(KeypointError):
    """Rotation too close to the pitch singularity to be packed as Euler angles."""


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([o, z, z], -1), np.stack([z, c, -s], -1),
                     np.stack([z, s, c], -1)], -2)


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([c, z, s], -1), np.stack([z, o, z], -1),
                     np.stack([-s, z, c], -1)], -2)


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([c, -s, z], -1), np.stack([s, c, z], -1),
                     np.stack([z, z, o], -1)], -2)


def _drx(a):
    c, s = np.cos(a), np.sin(a)
    z = np.zeros_like(a)
    return np.stack([np.stack([z, z, z], -1), np.stack([z, -s, -c], -1),
                     np.stack([z, c, -s], -1)], -2)


def _dry(a):
    c, s = np.cos(a), np.sin(a)
    z = np.zeros_like(a)
    return np.stack([np.stack([-s, z, c], -1), np.stack([z, z, z], -1),
                     np.stack([-c, z, -s], -1)], -2)


def _drz(a):
    c, s = np.cos(a), np.sin(a)
    z = np.zeros_like(a)
    return np.stack([np.stack([-s, -c, z], -1), np.stack([c, -s, z], -1),
                     np.stack([z, z, z], -1)], -2)


def euler_to_matrix(yaw, pitch, roll) -> np.ndarray:
    """Row-vector rotation matrix (..., 3, 3) from yaw/pitch/roll arrays."""
    yaw, pitch, roll = (np.asarray(v, dtype=np.float64) for v in (yaw, pitch, roll))
    M = _ry(yaw) @ _rx(pitch) @ _rz(roll)
    return np.swapaxes(M, -1, -2)


def euler_matrix_derivatives(yaw, pitch, roll) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Partial derivatives of :func:`euler_to_matrix` w.r.t. yaw, pitch and roll."""
    Ry, Rx, Rz = _ry(yaw), _rx(pitch), _rz(roll)
    dyaw = _dry(yaw) @ Rx @ Rz
    dpitch = Ry @ _drx(pitch) @ Rz
    droll = Ry @ Rx @ _drz(roll)
    return tuple(np.swapaxes(d, -1, -2) for d in (dyaw, dpitch, droll))


def matrix_to_euler(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`euler_to_matrix` on the principal branch; returns (..., 3)."""
    M = np.swapaxes(np.asarray(R, dtype=np.float64), -1, -2)
    pitch = np.arcsin(np.clip(-M[..., 1, 2], -1.0, 1.0))
    yaw = np.arctan2(M[..., 0, 2], M[..., 2, 2])
    roll = np.arctan2(M[..., 1, 0], M[..., 1, 1])
    return np.stack([yaw, pitch, roll], axis=-1)


def _check_k(K: int) -> None:
    if not MIN_K <= K <= MAX_K:
        raise KeypointError(f"keypoint count K={K} outside [{MIN_K}, {MAX_K}]")


@dataclass(frozen=True)
class KeypointSet:
    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise KeypointError(f"keypoints must be (K, 3), got {pts.shape}")
        if pts.shape[0] < MIN_K:
            raise KeypointError(f"need at least {MIN_K} keypoints, got {pts.shape[0]}")
        if not np.all(np.isfinite(pts)):
            raise KeypointError("keypoints contain NaN or Inf")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def K(self) -> int:
        return self.points.shape[0]

    @property
    def xy(self) -> np.ndarray:
        return self.points[:, :2]

    def __eq__(self, other):
        return isinstance(other, KeypointSet) and np.array_equal(self.points, other.points)

    __hash__ = None


@dataclass(frozen=True)
class Rotation:
    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0

    @cached_property
    def matrix(self) -> np.ndarray:
        R = euler_to_matrix(self.yaw, self.pitch, self.roll)
        R.setflags(write=False)
        return R

    @property
    def angles(self) -> np.ndarray:
        return np.array([self.yaw, self.pitch, self.roll])

    @classmethod
    def identity(cls) -> "Rotation":
        return cls()

    @classmethod
    def from_matrix(cls, R: np.ndarray) -> "Rotation":
        yaw, pitch, roll = matrix_to_euler(R)
        return cls(float(yaw), float(pitch), float(roll))

    def in_principal_branch(self) -> bool:
        return abs(self.pitch) < np.pi / 2 - GIMBAL_MARGIN


@dataclass(frozen=True)
class MotionFactors:
    """One frame decomposed into canonical geometry, pose, expression and translation."""

    canonical: KeypointSet
    rotation: Rotation = field(default_factory=Rotation)
    expression: np.ndarray | None = None
    translation: np.ndarray | None = None
    expression_limit: float = EXPRESSION_LIMIT

    def __post_init__(self):
        K = self.canonical.K
        delta = np.zeros((K, 3)) if self.expression is None else np.array(
            self.expression, dtype=np.float64)
        t = np.zeros(3) if self.translation is None else np.array(
            self.translation, dtype=np.float64).reshape(-1)
        if delta.shape != (K, 3):
            raise KeypointError(
                f"expression shape {delta.shape} does not match canonical K={K}")
        if t.shape != (3,):
            raise KeypointError(f"translation must be a 3-vector, got {t.shape}")
        if not (np.all(np.isfinite(delta)) and np.all(np.isfinite(t))):
            raise KeypointError("expression or translation not finite")
        if np.max(np.abs(delta), initial=0.0) > self.expression_limit:
            raise KeypointError(
                f"expression magnitude {np.max(np.abs(delta)):.3g} exceeds "
                f"limit {self.expression_limit}")
        delta.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "expression", delta)
        object.__setattr__(self, "translation", t)

    @property
    def K(self) -> int:
        return self.canonical.K

    def replace(self, **changes) -> "MotionFactors":
        kw = dict(canonical=self.canonical, rotation=self.rotation,
                  expression=self.expression, translation=self.translation,
                  expression_limit=self.expression_limit)
        kw.update(changes)
        return MotionFactors(**kw)

    def __eq__(self, other):
        return (isinstance(other, MotionFactors)
                and self.canonical == other.canonical
                and self.rotation == other.rotation
                and np.array_equal(self.expression, other.expression)
                and np.array_equal(self.translation, other.translation))

    __hash__ = None


@dataclass(frozen=True)
class MotionLatent:
    vector: np.ndarray

    def __post_init__(self):
        v = np.array(self.vector, dtype=np.float64).reshape(-1)
        if (v.size - 6) % 3 or v.size < 3 * MIN_K + 6:
            raise KeypointError(f"latent length {v.size} is not 3K+6")
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)

    @property
    def K(self) -> int:
        return (self.vector.size - 6) // 3


def latent_dim(K: int) -> int:
    return 3 * K + 6


def compose_arrays(canonical, R, expression, translation) -> np.ndarray:
    """Batched ``x_c @ R + delta + t`` over leading axes."""
    canonical = np.asarray(canonical, dtype=np.float64)
    return canonical @ R + expression + np.asarray(translation)[..., None, :]


def compose(factors: MotionFactors) -> KeypointSet:
    """Keypoints of one frame: each canonical row times R, then offset by delta and t."""
    x = factors.canonical.points @ factors.rotation.matrix
    return KeypointSet(x + factors.expression + factors.translation)


def retarget(source: MotionFactors, driving: MotionFactors) -> KeypointSet:
    """Driving pose, expression and translation applied to the source canonical."""
    if source.K != driving.K:
        raise KeypointError(f"K mismatch: source {source.K}, driving {driving.K}")
    return compose(driving.replace(canonical=source.canonical))


def latent_pack(factors: MotionFactors) -> MotionLatent:
    rot = factors.rotation
    if not rot.in_principal_branch():
        raise GimbalError(
            f"pitch {rot.pitch:.9f} is within {GIMBAL_MARGIN} of +-pi/2; Euler packing "
            "is ambiguous there (a quaternion parameterization would be needed)")
    return MotionLatent(np.concatenate([rot.angles, factors.expression.reshape(-1),
                                        factors.translation]))


def latent_unpack(latent: MotionLatent | np.ndarray,
                  canonical: KeypointSet | None = None) -> MotionFactors:
    """Rebuild factors from a latent; canonical defaults to all-zero geometry."""
    if not isinstance(latent, MotionLatent):
        latent = MotionLatent(latent)
    K = latent.K
    if canonical is None:
        canonical = KeypointSet(np.zeros((K, 3)))
    elif canonical.K != K:
        raise KeypointError(f"latent K={K} does not match canonical K={canonical.K}")
    v = latent.vector
    return MotionFactors(canonical, Rotation(float(v[0]), float(v[1]), float(v[2])),
                         v[3:3 + 3 * K].reshape(K, 3), v[3 + 3 * K:])


def unpack_sequence(latents: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(T, 3K+6) latents -> Euler (T, 3), expression (T, K, 3), translation (T, 3)."""
    latents = np.asarray(latents, dtype=np.float64)
    K = (latents.shape[-1] - 6) // 3
    return (latents[..., :3], latents[..., 3:3 + 3 * K].reshape(*latents.shape[:-1], K, 3),
            latents[..., 3 + 3 * K:])


def pack_sequence(euler, expression, translation) -> np.ndarray:
    expression = np.asarray(expression)
    flat = expression.reshape(*expression.shape[:-2], -1)
    return np.concatenate([euler, flat, translation], axis=-1)


def compose_sequence(canonical: np.ndarray, latents: np.ndarray) -> np.ndarray:
    """Keypoints (T, K, 3) for a latent sequence on a fixed canonical."""
    euler, delta, t = unpack_sequence(latents)
    R = euler_to_matrix(euler[..., 0], euler[..., 1], euler[..., 2])
    return compose_arrays(canonical, R, delta, t)


# -- text trajectory format ---------------------------------------------------

def format_header(K: int, **meta) -> str:
    extra = "".join(f" {k}={v}" for k, v in meta.items())
    return f"{KP_MAGIC} {KP_VERSION} K={K}{extra}"


def write_kp(dest: str | Path | IO[str], frames: np.ndarray | Iterable, K: int,
             **meta) -> None:
    """Write frames one per line, space-separated, 9 significant digits."""
    rows = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    lines = [format_header(K, **meta)]
    lines.extend(" ".join(f"{v:.9g}" for v in row) for row in rows)
    text = "\n".join(lines) + "\n"
    if hasattr(dest, "write"):
        dest.write(text)
    else:
        Path(dest).write_text(text)


def parse_header(line: str, magic: str = KP_MAGIC) -> dict[str, str]:
    parts = line.split()
    if len(parts) < 2 or parts[0] != magic:
        raise KeypointError(f"not a {magic} file: {line[:40]!r}")
    if parts[1] != KP_VERSION:
        raise KeypointError(f"unsupported version {parts[1]}")
    meta = {}
    for tok in parts[2:]:
        key, _, val = tok.partition("=")
        meta[key] = val
    return meta


def read_kp(src: str | Path | IO[str]) -> tuple[np.ndarray, dict[str, str]]:
    text = src.read() if hasattr(src, "read") else Path(src).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise KeypointError("empty keypoint file")
    meta = parse_header(lines[0])
    if "K" not in meta:
        raise KeypointError("header lacks K=")
    rows = [np.array(ln.split(), dtype=np.float64) for ln in lines[1:]]
    if rows and len({r.size for r in rows}) != 1:
        raise KeypointError("ragged rows in keypoint file")
    data = np.vstack(rows) if rows else np.zeros((0, 3 * int(meta["K"])))
    return data, meta


class FactorBatch(NamedTuple):
    """Batched factors: canonical (B, K, 3), euler (B, 3), expression (B, K, 3), translation (B, 3)."""

    canonical: np.ndarray
    euler: np.ndarray
    expression: np.ndarray
    translation: np.ndarray

    def rotation(self) -> np.ndarray:
        e = self.euler
        return euler_to_matrix(e[..., 0], e[..., 1], e[..., 2])

    def keypoints(self) -> np.ndarray:
        return compose_arrays(self.canonical, self.rotation(), self.expression, self.translation)

    def retarget_onto(self, canonical: np.ndarray) -> np.ndarray:
        """This batch's motion applied to another canonical (B, K, 3)."""
        return compose_arrays(canonical, self.rotation(), self.expression, self.translation)

    def factors(self, i: int) -> MotionFactors:
        e = self.euler[i]
        return MotionFactors(KeypointSet(self.canonical[i]), Rotation(*map(float, e)),
                             self.expression[i], self.translation[i])
