"""Procedural ground-truth face rig.

The rig replaces rendered video with known factors: each identity is a
canonical keypoint set (a face-like template plus bounded per-identity
offsets), each episode a 25 fps trajectory of head pose, expression and
translation. Observations are the composed keypoints plus Gaussian noise,
flattened; landmarks are the exact xy of designated keypoints.

Expression is built from a few blendshape-like bases. Their coefficients are
a per-episode bias (the episode's "emotion") plus a slow fluctuation
band-limited to 1 Hz, while pose moves up to 4 Hz. A separate mouth-open
basis follows the audio loudness envelope frame by frame; no other basis
changes the gap between the two lip keypoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from kpmotion import audiofeat
from kpmotion.kpspace import (DEFAULT_K, EXPRESSION_LIMIT, KeypointError, KeypointSet,
                              MotionFactors, Rotation, compose_arrays, euler_to_matrix,
                              pack_sequence, read_kp, write_kp)
from kpmotion.rng import derive_seed, make_rng

FPS = 25

# name, template xyz
_NAMED_POINTS = (
    ("jaw_l", (-0.80, 0.10, -0.20)),
    ("jaw_bl", (-0.60, -0.50, -0.05)),
    ("chin", (0.00, -0.85, 0.15)),
    ("jaw_br", (0.60, -0.50, -0.05)),
    ("jaw_r", (0.80, 0.10, -0.20)),
    ("brow_lo", (-0.55, 0.55, 0.25)),
    ("brow_li", (-0.20, 0.60, 0.35)),
    ("brow_ri", (0.20, 0.60, 0.35)),
    ("brow_ro", (0.55, 0.55, 0.25)),
    ("eye_lo", (-0.50, 0.30, 0.25)),
    ("eye_li", (-0.20, 0.30, 0.30)),
    ("eye_ri", (0.20, 0.30, 0.30)),
    ("eye_ro", (0.50, 0.30, 0.25)),
    ("nose_bridge", (0.00, 0.25, 0.45)),
    ("nose_tip", (0.00, -0.05, 0.65)),
    ("lip_up", (0.00, -0.30, 0.50)),
    ("lip_lo", (0.00, -0.42, 0.48)),
    ("mouth_l", (-0.25, -0.36, 0.40)),
    ("mouth_r", (0.25, -0.36, 0.40)),
    ("cheek_l", (-0.55, -0.10, 0.30)),
    ("cheek_r", (0.55, -0.10, 0.30)),
)
# subset order when K < 21
_PRIORITY = ("lip_up", "lip_lo", "mouth_l", "mouth_r", "eye_lo", "eye_ro", "nose_tip",
             "brow_li", "brow_ri", "chin", "eye_li", "eye_ri", "brow_lo", "brow_ro",
             "jaw_bl", "jaw_br", "cheek_l", "cheek_r", "nose_bridge", "jaw_l", "jaw_r")
_LANDMARK_NAMES = ("brow_lo", "brow_li", "brow_ri", "brow_ro", "eye_lo", "eye_li", "eye_ri",
                   "eye_ro", "nose_tip", "lip_up", "lip_lo", "mouth_l", "mouth_r")

# expression bases: name -> {point: displacement}; none changes the lip gap
_BASES = {
    "smile": {"mouth_l": (-0.3, 0.5, 0.0), "mouth_r": (0.3, 0.5, 0.0),
              "cheek_l": (0.0, 0.4, 0.1), "cheek_r": (0.0, 0.4, 0.1),
              "lip_up": (0.0, 0.15, 0.0), "lip_lo": (0.0, 0.15, 0.0),
              "eye_lo": (0.0, -0.15, 0.0), "eye_ro": (0.0, -0.15, 0.0)},
    "brow_raise": {"brow_lo": (0.0, 1.0, 0.0), "brow_li": (0.0, 1.0, 0.0),
                   "brow_ri": (0.0, 1.0, 0.0), "brow_ro": (0.0, 1.0, 0.0),
                   "eye_lo": (0.0, 0.2, 0.0), "eye_li": (0.0, 0.2, 0.0),
                   "eye_ri": (0.0, 0.2, 0.0), "eye_ro": (0.0, 0.2, 0.0)},
    "frown": {"brow_li": (0.3, -0.6, 0.0), "brow_ri": (-0.3, -0.6, 0.0),
              "mouth_l": (0.0, -0.6, 0.0), "mouth_r": (0.0, -0.6, 0.0),
              "lip_up": (0.0, -0.1, 0.0), "lip_lo": (0.0, -0.1, 0.0)},
    "pucker": {"mouth_l": (0.5, 0.0, 0.3), "mouth_r": (-0.5, 0.0, 0.3),
               "lip_up": (0.0, 0.0, 0.4), "lip_lo": (0.0, 0.0, 0.4)},
}
_MOUTH_OPEN = {"lip_up": (0.0, 0.3, 0.0), "lip_lo": (0.0, -0.7, 0.0),
               "chin": (0.0, -0.5, 0.0), "jaw_bl": (0.0, -0.25, 0.0),
               "jaw_br": (0.0, -0.25, 0.0), "mouth_l": (0.0, -0.2, 0.0),
               "mouth_r": (0.0, -0.2, 0.0)}


class RigError(ValueError):
    """Invalid rig request."""


@dataclass(frozen=True)
class RigLayout:
    names: tuple[str, ...]
    template: np.ndarray
    lip_pair: tuple[int, int]
    landmark_index: np.ndarray
    bases: np.ndarray        # (n_bases, K, 3)
    mouth_basis: np.ndarray  # (K, 3)

    @property
    def K(self) -> int:
        return self.template.shape[0]


_LAYOUTS: dict[int, RigLayout] = {}


def layout(K: int = DEFAULT_K) -> RigLayout:
    """Keypoint layout for ``K`` points (cached)."""
    if K in _LAYOUTS:
        return _LAYOUTS[K]
    if not 4 <= K <= 64:
        raise KeypointError(f"K={K} outside [4, 64]")
    named = dict(_NAMED_POINTS)
    if K <= len(_NAMED_POINTS):
        names = tuple(n for n, _ in _NAMED_POINTS) if K == len(_NAMED_POINTS) \
            else _PRIORITY[:K]
        pts = np.array([named[n] for n in names])
    else:
        extra = K - len(_NAMED_POINTS)
        rng = make_rng(0, "template-extra", K)
        v = rng.standard_normal((extra, 3))
        v[:, 2] = np.abs(v[:, 2])
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        v *= np.array([0.8, 0.9, 0.6])
        names = tuple(n for n, _ in _NAMED_POINTS) + tuple(f"extra_{i}" for i in range(extra))
        pts = np.vstack([np.array([p for _, p in _NAMED_POINTS]), v])
    index = {n: i for i, n in enumerate(names)}

    def basis(spec):
        b = np.zeros((K, 3))
        for n, d in spec.items():
            if n in index:
                b[index[n]] = d
        return b

    lay = RigLayout(
        names=names,
        template=pts.astype(np.float64),
        lip_pair=(index["lip_up"], index["lip_lo"]),
        landmark_index=np.array([index[n] for n in _LANDMARK_NAMES if n in index]),
        bases=np.stack([basis(s) for s in _BASES.values()]),
        mouth_basis=basis(_MOUTH_OPEN),
    )
    _LAYOUTS[K] = lay
    return lay


@dataclass(frozen=True)
class RigConfig:
    K: int = DEFAULT_K
    noise: float = 0.005
    identity_offset: float = 0.1
    identity_scale: float = 0.1
    pose_amp: tuple[float, float, float] = (0.35, 0.20, 0.15)
    translation_amp: tuple[float, float, float] = (0.05, 0.05, 0.02)
    pose_cutoff: float = 4.0
    expression_cutoff: float = 1.0
    emotion_amp: float = 0.1
    fluctuation_amp: float = 0.03
    mouth_amp: float = 0.12
    expression_max: float | None = None

    def still(self) -> "RigConfig":
        """Same rig with every motion amplitude set to zero."""
        return replace(self, pose_amp=(0.0, 0.0, 0.0), translation_amp=(0.0, 0.0, 0.0),
                       emotion_amp=0.0, fluctuation_amp=0.0, mouth_amp=0.0)


@dataclass(frozen=True)
class RigIdentity:
    canonical: KeypointSet
    identity_id: int
    shape_seed: int


def make_identity(seed: int, config: RigConfig = RigConfig(),
                  identity_id: int | None = None) -> RigIdentity:
    """Template plus bounded offsets and axis scaling, all drawn from ``seed``."""
    lay = layout(config.K)
    rng = make_rng(seed, "identity")
    scale = 1.0 + config.identity_scale * rng.uniform(-1.0, 1.0, 3)
    offsets = config.identity_offset * rng.uniform(-1.0, 1.0, (config.K, 3))
    # lips share one offset so the lip gap stays a vertical, positive distance
    up, lo = lay.lip_pair
    offsets[lo] = offsets[up] + (0.0, 0.3 * config.identity_offset * rng.uniform(-1.0, 1.0), 0.0)
    canon = np.clip(lay.template * scale + offsets, -1.0, 1.0)
    return RigIdentity(KeypointSet(canon), int(seed if identity_id is None else identity_id),
                       int(seed))


def bandlimited(rng: np.random.Generator, T: int, cutoff_hz: float, n: int = 1,
                fps: float = FPS) -> np.ndarray:
    """Zero-mean white noise low-passed at ``cutoff_hz`` and peak-normalized to 1; (T, n)."""
    x = rng.standard_normal((T, n))
    spec = np.fft.rfft(x, axis=0)
    freqs = np.fft.rfftfreq(T, 1.0 / fps)
    spec[(freqs > cutoff_hz) | (freqs == 0)] = 0.0
    y = np.fft.irfft(spec, n=T, axis=0)
    peak = np.abs(y).max(axis=0)
    return np.divide(y, peak, out=np.zeros_like(y), where=peak > 0)


def synth_speech(seed: int, seconds: float, sr: int = audiofeat.SAMPLE_RATE) -> np.ndarray:
    """Speech-like int16 audio: a harmonic carrier gated by a syllable-rate envelope."""
    rng = make_rng(seed, "speech")
    n = int(round(seconds * sr))
    ctrl_rate = 100
    n_ctrl = max(int(np.ceil(seconds * ctrl_rate)) + 2, 4)
    syll = bandlimited(rng, n_ctrl, 6.0, fps=ctrl_rate)[:, 0]
    gate = bandlimited(rng, n_ctrl, 0.7, fps=ctrl_rate)[:, 0]
    env_ctrl = np.clip(syll + 0.35, 0.0, None) * (gate > -0.45)
    f0_ctrl = 150.0 + 30.0 * bandlimited(rng, n_ctrl, 1.0, fps=ctrl_rate)[:, 0]
    t_ctrl = np.arange(n_ctrl) / ctrl_rate
    t = np.arange(n) / sr
    env = np.interp(t, t_ctrl, env_ctrl)
    f0 = np.interp(t, t_ctrl, f0_ctrl)
    phase = 2 * np.pi * np.cumsum(f0) / sr
    f1, f2 = rng.uniform(350, 800), rng.uniform(1000, 2400)
    carrier = np.zeros(n)
    for h in range(1, 13):
        fh = 150.0 * h
        amp = (np.exp(-0.5 * ((fh - f1) / 200) ** 2)
               + 0.6 * np.exp(-0.5 * ((fh - f2) / 300) ** 2) + 0.05) / h ** 0.5
        carrier += amp * np.sin(h * phase)
    carrier += 0.05 * rng.standard_normal(n)
    x = env * carrier
    peak = np.abs(x).max()
    if peak > 0:
        x *= 0.7 / peak
    return audiofeat.to_int16(x)


@dataclass
class RigEpisode:
    identity: RigIdentity
    motion_seed: int
    euler: np.ndarray          # (T, 3)
    expression: np.ndarray     # (T, K, 3)
    translation: np.ndarray    # (T, 3)
    keypoints: np.ndarray      # (T, K, 3) noise-free
    observations: np.ndarray   # (T, 3K)
    landmarks: np.ndarray      # (T, N, 2)
    emotion: np.ndarray        # (T, n_bases) expression coefficients
    audio_track: np.ndarray | None = None  # (T,) loudness envelope
    pcm: np.ndarray | None = field(default=None, repr=False)
    config: RigConfig = field(default_factory=RigConfig)

    @property
    def T(self) -> int:
        return self.euler.shape[0]

    @property
    def K(self) -> int:
        return self.keypoints.shape[1]

    @property
    def layout(self) -> RigLayout:
        return layout(self.K)

    def factors(self, i: int) -> MotionFactors:
        return MotionFactors(self.identity.canonical, Rotation(*map(float, self.euler[i])),
                             self.expression[i], self.translation[i])

    def latents(self) -> np.ndarray:
        return pack_sequence(self.euler, self.expression, self.translation)

    def lip_aperture(self) -> np.ndarray:
        u, l = self.layout.lip_pair
        return np.linalg.norm(self.keypoints[:, u] - self.keypoints[:, l], axis=-1)

    # -- directory layout ----------------------------------------------------
    def save(self, directory: str | Path, **meta) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        K = self.K
        info = {"version": 1, "identity_id": self.identity.identity_id,
                "shape_seed": self.identity.shape_seed, "motion_seed": self.motion_seed,
                "T": self.T, "K": K, "fps": FPS, "noise": self.config.noise,
                "lip_pair": ",".join(map(str, self.layout.lip_pair)),
                "landmark_index": ",".join(map(str, self.layout.landmark_index)),
                "audio": int(self.audio_track is not None)}
        info.update(meta)
        (d / "episode.meta").write_text("".join(f"{k}={v}\n" for k, v in info.items()))
        canon = np.broadcast_to(self.identity.canonical.points.reshape(-1), (self.T, 3 * K))
        write_kp(d / "factors.kp", np.hstack([canon, self.latents()]), K, kind="factors", **meta)
        write_kp(d / "obs.kp", self.observations, K, kind="keypoints", **meta)
        write_kp(d / "landmarks.kp", self.landmarks.reshape(self.T, -1), K, kind="landmarks",
                 N=self.landmarks.shape[1], **meta)
        if self.audio_track is not None:
            (d / "audio.f32").write_bytes(self.audio_track.astype("<f4").tobytes())


def read_meta(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def load_episode(directory: str | Path) -> RigEpisode:
    """Read an episode directory back (values carry 9 significant digits)."""
    d = Path(directory)
    meta = read_meta(d / "episode.meta")
    K = int(meta["K"])
    fac, _ = read_kp(d / "factors.kp")
    canon = fac[0, :3 * K].reshape(K, 3)
    lat = fac[:, 3 * K:]
    euler, expr, trans = lat[:, :3], lat[:, 3:3 + 3 * K].reshape(-1, K, 3), lat[:, 3 + 3 * K:]
    obs, _ = read_kp(d / "obs.kp")
    lms, _ = read_kp(d / "landmarks.kp")
    audio = None
    if (d / "audio.f32").exists():
        audio = np.frombuffer((d / "audio.f32").read_bytes(), dtype="<f4").astype(np.float64)
    ident = RigIdentity(KeypointSet(canon), int(meta["identity_id"]), int(meta["shape_seed"]))
    R = euler_to_matrix(euler[:, 0], euler[:, 1], euler[:, 2])
    kp = compose_arrays(canon, R, expr, trans)
    return RigEpisode(ident, int(meta["motion_seed"]), euler, expr, trans, kp, obs,
                      lms.reshape(obs.shape[0], -1, 2), np.zeros((obs.shape[0], 0)), audio,
                      config=RigConfig(K=K, noise=float(meta["noise"])))


def make_episode(identity: RigIdentity, T: int | None, motion_seed: int, audio=None,
                 config: RigConfig = RigConfig()) -> RigEpisode:
    """Simulate ``T`` frames of motion for ``identity``.

    With ``audio`` (int16 PCM at 16 kHz) the mouth-open basis follows its
    loudness envelope and ``T`` may be None (taken from the audio length).
    """
    K = identity.canonical.K
    if K != config.K:
        raise RigError(f"identity has K={K}, config K={config.K}")
    env = None
    if audio is not None:
        env = audiofeat.envelope(audio)
        if T is None:
            T = env.size
        elif T != env.size:
            raise RigError(f"T={T} does not match audio length of {env.size} frames")
    if T is None or T < 2:
        raise RigError(f"episode needs T >= 2, got {T}")
    lay = layout(K)
    rng = make_rng(motion_seed, "motion", identity.shape_seed)
    euler = bandlimited(rng, T, config.pose_cutoff, 3) * np.asarray(config.pose_amp)
    trans = bandlimited(rng, T, config.pose_cutoff, 3) * np.asarray(config.translation_amp)
    nb = lay.bases.shape[0]
    bias = config.emotion_amp * rng.uniform(-1.0, 1.0, nb)
    coeffs = bias + config.fluctuation_amp * bandlimited(rng, T, config.expression_cutoff, nb)
    expr = np.einsum("tb,bkc->tkc", coeffs, lay.bases)
    if env is not None:
        expr = expr + config.mouth_amp * env[:, None, None] * lay.mouth_basis
    peak = np.abs(expr).max(initial=0.0)
    cap = EXPRESSION_LIMIT if config.expression_max is None else min(config.expression_max,
                                                                     EXPRESSION_LIMIT)
    if peak > cap:
        expr *= cap / peak
        coeffs = coeffs * (cap / peak)
    R = euler_to_matrix(euler[:, 0], euler[:, 1], euler[:, 2])
    kp = compose_arrays(identity.canonical.points, R, expr, trans)
    noise = make_rng(motion_seed, "observation-noise", identity.shape_seed)
    obs = (kp + config.noise * noise.standard_normal(kp.shape)).reshape(T, 3 * K)
    lms = kp[:, lay.landmark_index, :2].copy()
    pcm = None if audio is None else np.asarray(audio)
    return RigEpisode(identity, int(motion_seed), euler, expr, trans, kp, obs, lms, coeffs,
                      env, pcm, config)


@dataclass(frozen=True)
class CrossPair:
    source: MotionFactors
    source_obs: np.ndarray
    driving: MotionFactors
    driving_obs: np.ndarray
    truth: KeypointSet


def cross_pair(identity_a: RigIdentity, identity_b: RigIdentity, seed: int,
               config: RigConfig = RigConfig(), T: int = 16) -> CrossPair:
    """A frame of A, a frame of B, and B's motion applied to A's canonical."""
    if identity_a.identity_id == identity_b.identity_id:
        raise RigError("cross_pair needs two distinct identities")
    ep_a = make_episode(identity_a, T, derive_seed(seed, "cross-a"), config=config)
    ep_b = make_episode(identity_b, T, derive_seed(seed, "cross-b"), config=config)
    rng = make_rng(seed, "cross-frames")
    ia, ib = (int(v) for v in rng.integers(0, T, 2))
    src, drv = ep_a.factors(ia), ep_b.factors(ib)
    R = drv.rotation.matrix
    truth = KeypointSet(identity_a.canonical.points @ R + drv.expression + drv.translation)
    return CrossPair(src, ep_a.observations[ia], drv, ep_b.observations[ib], truth)


@dataclass
class Rig:
    """A pool of identities and episodes generated from one seed."""

    identities: list[RigIdentity]
    episodes: list[list[RigEpisode]]
    config: RigConfig
    seed: int

    @classmethod
    def build(cls, n_identities: int, episodes_per_identity: int, T: int, seed: int,
              config: RigConfig = RigConfig(), speech: bool = False) -> "Rig":
        ids, eps = [], []
        for i in range(n_identities):
            ident = make_identity(derive_seed(seed, "identity", i), config, identity_id=i)
            row = []
            for e in range(episodes_per_identity):
                ms = derive_seed(seed, "episode", i, e)
                audio = synth_speech(derive_seed(ms, "speech"), T / FPS) if speech else None
                row.append(make_episode(ident, None if speech else T, ms, audio, config))
            ids.append(ident)
            eps.append(row)
        return cls(ids, eps, config, seed)

    @property
    def K(self) -> int:
        return self.config.K

    @property
    def layout(self) -> RigLayout:
        return layout(self.K)

    def all_episodes(self) -> list[RigEpisode]:
        return [e for row in self.episodes for e in row]

    def cross_pairs(self, n: int, seed: int) -> list[CrossPair]:
        """``n`` cross-identity pairs drawn from frames already in the rig."""
        if len(self.identities) < 2:
            raise RigError("cross pairs need at least two identities")
        rng = make_rng(seed, "rig-cross")
        out = []
        for _ in range(n):
            a, b = rng.choice(len(self.identities), 2, replace=False)
            ep_a = self.episodes[a][rng.integers(len(self.episodes[a]))]
            ep_b = self.episodes[b][rng.integers(len(self.episodes[b]))]
            ia, ib = int(rng.integers(ep_a.T)), int(rng.integers(ep_b.T))
            drv = ep_b.factors(ib)
            truth = KeypointSet(self.identities[a].canonical.points @ drv.rotation.matrix
                                + drv.expression + drv.translation)
            out.append(CrossPair(ep_a.factors(ia), ep_a.observations[ia], drv,
                                 ep_b.observations[ib], truth))
        return out


def canonical_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Mean per-keypoint Euclidean distance over the last two axes (K, 3)."""
    return np.linalg.norm(np.asarray(a) - np.asarray(b), axis=-1).mean(axis=-1)


class RigOracle:
    """Decomposer that looks up the ground-truth factors of known observations."""

    def __init__(self, episodes):
        self._table: dict[bytes, tuple] = {}
        for ep in episodes:
            for i in range(ep.T):
                self._table[np.asarray(ep.observations[i], dtype=np.float64).tobytes()] = (
                    ep.identity.canonical.points, ep.euler[i], ep.expression[i],
                    ep.translation[i])

    def encode_batch(self, obs: np.ndarray):
        from kpmotion.kpspace import FactorBatch

        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        rows = []
        for o in obs:
            key = o.tobytes()
            if key not in self._table:
                raise RigError("observation not produced by this rig")
            rows.append(self._table[key])
        return FactorBatch(*(np.stack(col) for col in zip(*rows)))
