"""Stage 2: audio-conditioned diffusion over motion-latent sequences.

A DDPM noise schedule and epsilon-prediction loss train a conformer-lite
denoiser (banded self-attention with a learned relative-position bias,
depthwise temporal convolution, feed-forward) conditioned on frame-aligned
audio features, a window-averaged emotion descriptor and the diffusion step.
Sampling uses DDIM over an evenly strided step subset. Long clips are
generated in overlapping 125-frame chunks that are cross-faded linearly.

Everything inside the denoiser works in a z-normalized space whose
statistics come from the training data and travel with the checkpoint.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from kpmotion import __version__, audiofeat, checkpoint, optim
from kpmotion.autograd import (Tensor, as_tensor, depthwise_conv1d, gather_bias, layer_norm,
                               no_grad)
from kpmotion.kpspace import (DEFAULT_K, EXPRESSION_LIMIT, KeypointError, compose_sequence,
                              latent_dim, unpack_sequence, write_kp)
from kpmotion.losses import LossError
from kpmotion.rng import derive_seed, make_rng

log = logging.getLogger(__name__)

FPS = audiofeat.VIDEO_RATE
WINDOW = 125
OVERLAP = 12
STRIDE = WINDOW - OVERLAP
TEMB_DIM = 64
EMOTION_WINDOW = 5
STD_FLOOR = 1e-4
MASK_VALUE = -1e9
SECTION_TAG = "STG2"


class DiffusionError(ValueError):
    pass


# -- schedule ---------------------------------------------------------------------

@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear beta schedule; arrays are indexed by step t = 1..T_steps.

    ``betas[t-1]`` is beta_t and ``alpha_bars[t]`` is the cumulative product
    up to t, with ``alpha_bars[0] = 1`` standing for clean data.
    """

    T_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    betas: np.ndarray = field(init=False, repr=False, compare=False)
    alpha_bars: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.T_steps < 1:
            raise DiffusionError("schedule needs at least one step")
        if not 0 < self.beta_start < 1 or not 0 < self.beta_end < 1:
            raise DiffusionError("betas must lie in (0, 1)")
        if self.T_steps > 1 and not self.beta_start < self.beta_end:
            raise DiffusionError("beta_start must be below beta_end")
        betas = np.linspace(self.beta_start, self.beta_end, self.T_steps)
        abar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        if not np.all(np.diff(abar) < 0):
            raise DiffusionError("alpha_bar underflows; shorten the schedule or lower the betas")
        betas.setflags(write=False)
        abar.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", abar)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    def check_step(self, t) -> np.ndarray:
        t = np.asarray(t)
        if not np.issubdtype(t.dtype, np.integer):
            if not np.all(t == np.round(t)):
                raise DiffusionError(f"diffusion step must be an integer, got {t}")
            t = t.astype(np.int64)
        if np.any(t < 1) or np.any(t > self.T_steps):
            raise DiffusionError(f"diffusion step outside 1..{self.T_steps}: {t}")
        return t

    def to_csv(self, path: str | Path) -> None:
        rows = ["t,beta,alpha_bar"]
        rows += [f"{t},{self.betas[t - 1]:.17g},{self.alpha_bars[t]:.17g}"
                 for t in range(1, self.T_steps + 1)]
        Path(path).write_text("\n".join(rows) + "\n")


def q_sample(m0, t, eps, schedule: DiffusionSchedule):
    """Forward-noise clean data: sqrt(abar_t) m0 + sqrt(1 - abar_t) eps.

    ``t`` is a scalar or one step per leading batch element.
    """
    t = schedule.check_step(t)
    m0 = np.asarray(m0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if m0.shape != eps.shape:
        raise DiffusionError(f"noise shape {eps.shape} != data shape {m0.shape}")
    ab = schedule.alpha_bars[t]
    ab = ab.reshape(ab.shape + (1,) * (m0.ndim - ab.ndim))
    return np.sqrt(ab) * m0 + np.sqrt(1.0 - ab) * eps


def timestep_embedding(t, dim: int = TEMB_DIM) -> np.ndarray:
    """Sinusoidal embedding (..., dim) of integer steps."""
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


# -- sequences and emotion --------------------------------------------------------

@dataclass(frozen=True)
class MotionSequence:
    """(T, 3K+6) latent rows at 25 Hz."""

    latents: np.ndarray
    fps: int = FPS

    def __post_init__(self):
        a = np.array(self.latents, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] < 1 or (a.shape[1] - 6) % 3 or a.shape[1] < 6:
            raise DiffusionError(f"motion sequence must be (T>=1, 3K+6), got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise DiffusionError("motion sequence is not finite")
        a.setflags(write=False)
        object.__setattr__(self, "latents", a)

    @property
    def T(self) -> int:
        return self.latents.shape[0]

    @property
    def K(self) -> int:
        return (self.latents.shape[1] - 6) // 3

    def factors(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return unpack_sequence(self.latents)

    def keypoints(self, canonical: np.ndarray) -> np.ndarray:
        return compose_sequence(np.asarray(canonical), self.latents)

    def lip_aperture(self, canonical: np.ndarray, lip_pair: tuple[int, int]) -> np.ndarray:
        kp = self.keypoints(canonical)
        return np.linalg.norm(kp[:, lip_pair[0]] - kp[:, lip_pair[1]], axis=-1)

    def save(self, path: str | Path, **meta) -> None:
        write_kp(path, self.latents, self.K, kind="latents", fps=self.fps, **meta)


@dataclass(frozen=True)
class EmotionDescriptor:
    """Window-averaged expression (3K,) used to steer affect."""

    vector: np.ndarray

    def __post_init__(self):
        v = np.array(self.vector, dtype=np.float64).reshape(-1)
        if v.size % 3:
            raise DiffusionError(f"emotion descriptor length {v.size} is not 3K")
        if not np.all(np.isfinite(v)):
            raise DiffusionError("emotion descriptor is not finite")
        if v.size and np.abs(v).max() > EXPRESSION_LIMIT:
            raise DiffusionError(f"emotion descriptor exceeds expression bound {EXPRESSION_LIMIT}")
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)

    @classmethod
    def zeros(cls, K: int = DEFAULT_K) -> "EmotionDescriptor":
        return cls(np.zeros(3 * K))

    @property
    def K(self) -> int:
        return self.vector.size // 3


def emotion_descriptor(expressions, window: int = EMOTION_WINDOW,
                       center: int | None = None) -> EmotionDescriptor:
    """Mean expression over ``window`` frames centred on ``center`` (default middle).

    ``expressions`` is (T, K, 3) or (T, 3K). Indices past either end clamp to
    the boundary frame.
    """
    e = np.asarray(expressions, dtype=np.float64)
    if e.shape[0] == 0:
        raise DiffusionError("emotion descriptor needs at least one frame")
    if window < 1 or window % 2 == 0:
        raise DiffusionError(f"emotion window must be odd and >= 1, got {window}")
    e = e.reshape(e.shape[0], -1)
    T = e.shape[0]
    c = T // 2 if center is None else int(center)
    if not 0 <= c < T:
        raise DiffusionError(f"centre frame {c} outside 0..{T - 1}")
    h = window // 2
    idx = np.clip(np.arange(c - h, c + h + 1), 0, T - 1)
    return EmotionDescriptor(e[idx].sum(axis=0) / window)


class Conditions(NamedTuple):
    """Normalized conditioning: audio layers (L, [B,] T, D) and emotion ([B,] E)."""

    audio: np.ndarray
    emotion: np.ndarray


# -- denoiser ---------------------------------------------------------------------

@dataclass(frozen=True)
class DenoiserConfig:
    K: int = DEFAULT_K
    d_model: int = 128
    n_blocks: int = 4
    heads: int = 4
    kernel: int = 7
    radius: int = 25
    audio_dim: int = audiofeat.N_FILTERS
    audio_layers: int = audiofeat.N_LAYERS
    temb_dim: int = TEMB_DIM
    adaptive_norm: bool = True
    noise_skip: bool = True
    audio_hidden: int = 0

    def __post_init__(self):
        if self.d_model % self.heads:
            raise DiffusionError("d_model must be divisible by heads")
        if self.kernel % 2 == 0:
            raise DiffusionError("conv kernel must be odd")

    @property
    def latent_dim(self) -> int:
        return latent_dim(self.K)

    @property
    def emotion_dim(self) -> int:
        return 3 * self.K


PROFILES = {
    "default": (DenoiserConfig(audio_hidden=128), 50),
    "rt": (DenoiserConfig(d_model=64, n_blocks=2, audio_hidden=64), 10),
}


@dataclass
class NormStats:
    latent_mean: np.ndarray
    latent_std: np.ndarray
    audio_mean: np.ndarray   # (L, D)
    audio_std: np.ndarray
    emotion_mean: np.ndarray
    emotion_std: np.ndarray

    @classmethod
    def identity(cls, cfg: DenoiserConfig) -> "NormStats":
        Dl, E = cfg.latent_dim, cfg.emotion_dim
        L, D = cfg.audio_layers, cfg.audio_dim
        return cls(np.zeros(Dl), np.ones(Dl), np.zeros((L, D)), np.ones((L, D)),
                   np.zeros(E), np.ones(E))

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {f"stats.{f.name}": getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "NormStats":
        return cls(**{f.name: arrays[f"stats.{f.name}"] for f in fields(cls)})


def _floor(std: np.ndarray) -> np.ndarray:
    return np.maximum(std, STD_FLOOR)


class DenoiserModel:
    """Conformer-lite epsilon predictor over (B, T, 3K+6) latent sequences."""

    def __init__(self, config: DenoiserConfig = DenoiserConfig(), seed: int = 0,
                 schedule: DiffusionSchedule | None = None):
        self.config = config
        self.schedule = schedule or DiffusionSchedule()
        self.stats = NormStats.identity(config)
        self.params = self._init_params(seed)
        self.velocity = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._mask_cache: dict[int, tuple] = {}

    def _init_params(self, seed: int) -> dict[str, np.ndarray]:
        c = self.config
        d = c.d_model
        rng = make_rng(seed, "denoiser-init")

        def lin(n_in, n_out, scale=1.0):
            return scale * rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)

        p = {
            "in.Wx": lin(c.latent_dim, d), "in.Wa": lin(c.audio_dim, d),
            "in.We": lin(c.emotion_dim, d), "in.Wt": lin(c.temb_dim, d), "in.b": np.zeros(d),
            "audio.logits": np.zeros(c.audio_layers),
        }
        if c.audio_hidden:
            p["aenc.W1"] = lin(c.audio_dim, c.audio_hidden)
            p["aenc.b1"] = np.zeros(c.audio_hidden)
            p["aenc.W2"] = lin(c.audio_hidden, d, 0.5)
        for i in range(c.n_blocks):
            b = f"blk{i}."
            for ln in ("ln1", "ln2", "ln3"):
                p[b + ln + ".g"] = np.ones(d)
                p[b + ln + ".b"] = np.zeros(d)
                if c.adaptive_norm:
                    p[b + ln + ".Wg"] = np.zeros((c.temb_dim, d))
                    p[b + ln + ".Wb"] = np.zeros((c.temb_dim, d))
            for w in ("Wq", "Wk", "Wv"):
                p[b + w] = lin(d, d)
            p[b + "Wo"] = lin(d, d, 0.5)
            p[b + "bo"] = np.zeros(d)
            p[b + "rel"] = np.zeros((c.heads, 2 * c.radius + 1))
            p[b + "conv.w"] = rng.standard_normal((c.kernel, d)) / np.sqrt(c.kernel)
            p[b + "conv.b"] = np.zeros(d)
            p[b + "pw.W"] = lin(d, d, 0.5)
            p[b + "pw.b"] = np.zeros(d)
            p[b + "ff.W1"] = lin(d, 2 * d)
            p[b + "ff.b1"] = np.zeros(2 * d)
            p[b + "ff.W2"] = lin(2 * d, d, 0.5)
            p[b + "ff.b2"] = np.zeros(d)
        p["out.ln.g"] = np.ones(d)
        p["out.ln.b"] = np.zeros(d)
        if c.adaptive_norm:
            p["out.ln.Wg"] = np.zeros((c.temb_dim, d))
            p["out.ln.Wb"] = np.zeros((c.temb_dim, d))
        p["out.W"] = lin(d, c.latent_dim, 0.1)
        p["out.b"] = np.zeros(c.latent_dim)
        return p

    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    # -- normalization --------------------------------------------------------
    def norm_latents(self, m: np.ndarray) -> np.ndarray:
        return (np.asarray(m) - self.stats.latent_mean) / _floor(self.stats.latent_std)

    def denorm_latents(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) * _floor(self.stats.latent_std) + self.stats.latent_mean

    def norm_audio(self, layers: np.ndarray) -> np.ndarray:
        """(L, [B,] T, D) raw 25 Hz layers to model space."""
        a = np.asarray(layers, dtype=np.float64)
        shape = (a.shape[0],) + (1,) * (a.ndim - 2) + (a.shape[-1],)
        return ((a - self.stats.audio_mean.reshape(shape))
                / _floor(self.stats.audio_std).reshape(shape))

    def norm_emotion(self, e: np.ndarray) -> np.ndarray:
        return (np.asarray(e) - self.stats.emotion_mean) / _floor(self.stats.emotion_std)

    # -- forward --------------------------------------------------------------
    def _band(self, T: int):
        if T not in self._mask_cache:
            R = self.config.radius
            off = np.arange(T)[None, :] - np.arange(T)[:, None]
            valid = np.abs(off) <= R
            index = np.where(valid, off + R, 0)
            mask = np.where(valid, 0.0, MASK_VALUE)
            self._mask_cache[T] = (index, valid, mask)
        return self._mask_cache[T]

    def _norm(self, P, name: str, h: Tensor, temb: Tensor | None) -> Tensor:
        """LayerNorm whose gain and bias are shifted by the step embedding."""
        y = layer_norm(h, P[name + ".g"], P[name + ".b"])
        if temb is None or not self.config.adaptive_norm:
            return y
        B, d = h.shape[0], h.shape[-1]
        gain = (temb @ P[name + ".Wg"]).reshape(B, 1, d)
        shift = (temb @ P[name + ".Wb"]).reshape(B, 1, d)
        return y + y * gain + shift

    def _attention(self, P, b: str, h: Tensor) -> Tensor:
        B, T, d = h.shape
        H = self.config.heads
        dh = d // H

        def split(x):
            return x.reshape(B, T, H, dh).transpose(0, 2, 1, 3)

        q, k, v = split(h @ P[b + "Wq"]), split(h @ P[b + "Wk"]), split(h @ P[b + "Wv"])
        index, valid, mask = self._band(T)
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
        scores = scores + gather_bias(P[b + "rel"], index, valid) + mask
        out = (scores.softmax(-1) @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
        return out @ P[b + "Wo"] + P[b + "bo"]

    def _block(self, P, i: int, h: Tensor, temb: Tensor | None = None) -> Tensor:
        b = f"blk{i}."
        h = h + self._attention(P, b, self._norm(P, b + "ln1", h, temb))
        c = depthwise_conv1d(self._norm(P, b + "ln2", h, temb),
                             P[b + "conv.w"], P[b + "conv.b"]).silu()
        h = h + (c @ P[b + "pw.W"] + P[b + "pw.b"])
        f = (self._norm(P, b + "ln3", h, temb) @ P[b + "ff.W1"] + P[b + "ff.b1"]).silu()
        return h + (f @ P[b + "ff.W2"] + P[b + "ff.b2"])

    def forward(self, params: dict[str, Tensor], x_t, t, conditions: Conditions) -> Tensor:
        """Predicted noise (B, T, Dl) for normalized inputs.

        ``x_t`` is (B, T, Dl); ``t`` is (B,) integer steps; ``conditions``
        holds audio (L, B, T, D) and emotion (B, E).
        """
        c = self.config
        x_t = as_tensor(x_t)
        B, T, Dl = x_t.shape
        audio = np.asarray(conditions.audio, dtype=np.float64)
        emo = np.asarray(conditions.emotion, dtype=np.float64)
        if Dl != c.latent_dim:
            raise DiffusionError(f"latent dim {Dl} != model latent dim {c.latent_dim}")
        if audio.shape != (c.audio_layers, B, T, c.audio_dim):
            raise DiffusionError(
                f"audio condition {audio.shape} misaligned with latents {(B, T, Dl)}")
        if emo.shape != (B, c.emotion_dim):
            raise DiffusionError(f"emotion condition {emo.shape} != {(B, c.emotion_dim)}")
        P = params
        a = audiofeat.weighted_sum(Tensor(audio), P["audio.logits"])
        temb = Tensor(timestep_embedding(self.schedule.check_step(np.broadcast_to(t, (B,))),
                                         c.temb_dim))
        glob = (Tensor(emo) @ P["in.We"] + temb @ P["in.Wt"] + P["in.b"])
        h = x_t @ P["in.Wx"] + a @ P["in.Wa"] + glob.reshape(B, 1, c.d_model)
        if c.audio_hidden:
            h = h + (a @ P["aenc.W1"] + P["aenc.b1"]).silu() @ P["aenc.W2"]
        for i in range(c.n_blocks):
            h = self._block(P, i, h, temb)
        h = self._norm(P, "out.ln", h, temb)
        out = h @ P["out.W"] + P["out.b"]
        if c.noise_skip:
            # eps = sqrt(1-abar) x_t + sqrt(abar) v: the first term is exact for
            # unit-variance data, so the network only supplies the v residual
            ab = self.schedule.alpha_bars[np.broadcast_to(t, (B,))].reshape(B, 1, 1)
            out = x_t * np.sqrt(1.0 - ab) + out * np.sqrt(ab)
        return out

    def predict_eps(self, x_t, t, conditions: Conditions) -> np.ndarray:
        with no_grad():
            return self.forward(self.tensors(), x_t, t, conditions).data

    __call__ = predict_eps

    # -- persistence ----------------------------------------------------------
    def section(self, **meta) -> checkpoint.Section:
        info = {"version": __version__, **{k: v for k, v in asdict(self.config).items()},
                "T_steps": self.schedule.T_steps, "beta_start": repr(self.schedule.beta_start),
                "beta_end": repr(self.schedule.beta_end)}
        info.update(meta)
        arrays = {k: self.params[k] for k in sorted(self.params)}
        arrays.update(self.stats.as_arrays())
        return checkpoint.Section(SECTION_TAG, info, arrays)

    def save(self, path: str | Path, **meta) -> None:
        checkpoint.write(path, [self.section(**meta)])

    @classmethod
    def from_section(cls, section: checkpoint.Section) -> "DenoiserModel":
        m = section.meta
        cfg = DenoiserConfig(**{f.name: (m[f.name] == "True") if f.type in (bool, "bool")
                                else int(m[f.name]) for f in fields(DenoiserConfig)})
        sched = DiffusionSchedule(int(m["T_steps"]), float(m["beta_start"]),
                                  float(m["beta_end"]))
        model = cls(cfg, seed=0, schedule=sched)
        for k in model.params:
            if k not in section.arrays or section.arrays[k].shape != model.params[k].shape:
                raise checkpoint.CheckpointError(f"checkpoint array {k} missing or misshapen")
            model.params[k] = section.arrays[k].copy()
        model.stats = NormStats.from_arrays(section.arrays)
        return model

    @classmethod
    def load(cls, path: str | Path) -> "DenoiserModel":
        return cls.from_section(checkpoint.find(checkpoint.read(path), SECTION_TAG))


EpsFn = Callable[[np.ndarray, np.ndarray, Conditions], np.ndarray]


def _as_batch(m0, conditions: Conditions):
    m0 = np.asarray(m0, dtype=np.float64)
    if m0.ndim == 2:
        return m0[None], Conditions(np.asarray(conditions.audio)[:, None],
                                    np.asarray(conditions.emotion)[None]), True
    return m0, conditions, False


def diffusion_loss(model, m0, t, eps, conditions: Conditions,
                   params: dict[str, Tensor] | None = None):
    """Mean squared error between ``eps`` and the model's prediction on q_sample.

    All inputs live in the model's normalized space. With ``params`` (tensors
    of a :class:`DenoiserModel`) the result is a differentiable tensor;
    otherwise ``model`` may be any callable ``(x_t, t, conditions) -> eps``.
    """
    m0, conditions, _ = _as_batch(m0, conditions)
    eps = np.asarray(eps, dtype=np.float64).reshape(m0.shape)
    B, T = m0.shape[:2]
    if np.asarray(conditions.audio).shape[-2] != T:
        raise DiffusionError(
            f"audio condition has {np.asarray(conditions.audio).shape[-2]} frames, latents {T}")
    sched = model.schedule if isinstance(model, DenoiserModel) else None
    t = np.broadcast_to(np.asarray(t), (B,))
    x_t = q_sample(m0, t, eps, sched or _stub_schedule(model))
    if params is not None:
        pred = model.forward(params, x_t, t, conditions)
        return ((pred - eps) ** 2).mean()
    pred = np.asarray(model(x_t, t, conditions), dtype=np.float64)
    return float(((pred - eps) ** 2).mean())


def _stub_schedule(model) -> DiffusionSchedule:
    return getattr(model, "schedule", None) or DiffusionSchedule()


def ddim_steps(T_steps: int, n_steps: int) -> np.ndarray:
    """Evenly strided descending subset of 1..T_steps, always ending at 1."""
    if n_steps < 1:
        raise DiffusionError("DDIM needs n_steps >= 1")
    if n_steps > T_steps:
        raise DiffusionError(f"n_steps {n_steps} exceeds schedule length {T_steps}")
    return np.unique(np.round(np.linspace(1, T_steps, n_steps)).astype(np.int64))[::-1]


def ddim_sample(model, shape: tuple[int, ...], conditions: Conditions, n_steps: int = 50,
                eta: float = 0.0, seed: int = 0, schedule: DiffusionSchedule | None = None,
                rng: np.random.Generator | None = None) -> np.ndarray:
    """DDIM sampling in normalized space; returns the final clean estimate.

    ``model`` is a :class:`DenoiserModel` or a callable ``(x_t, t, conditions)
    -> eps`` over arrays of ``shape``.
    """
    if not 0.0 <= eta <= 1.0:
        raise DiffusionError(f"eta must lie in [0, 1], got {eta}")
    schedule = schedule or _stub_schedule(model)
    steps = ddim_steps(schedule.T_steps, n_steps)
    rng = rng or make_rng(seed, "ddim")
    ab = schedule.alpha_bars
    x = rng.standard_normal(shape)
    lead = shape[:1] if len(shape) > 1 else ()
    x0 = x
    for i, t in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else 0
        a_t, a_prev = ab[t], ab[t_prev]
        eps = np.asarray(model(x, np.full(lead, t), conditions), dtype=np.float64)
        x0 = (x - np.sqrt(1.0 - a_t) * eps) / np.sqrt(a_t)
        sigma = eta * np.sqrt((1.0 - a_prev) / (1.0 - a_t)) * np.sqrt(1.0 - a_t / a_prev)
        x = np.sqrt(a_prev) * x0 + np.sqrt(max(1.0 - a_prev - sigma ** 2, 0.0)) * eps
        if sigma > 0:
            x = x + sigma * rng.standard_normal(shape)
    return x0


# -- data ---------------------------------------------------------------------------

def video_features(pcm) -> np.ndarray:
    """Raw 25 Hz feature layers (L, T, D) for a clip."""
    return audiofeat.downsample_to_video(audiofeat.extract(pcm).layers)


@dataclass
class MotionDataset:
    """Per-episode raw latents, expressions and 25 Hz audio layers."""

    latents: list[np.ndarray]
    audio: list[np.ndarray]

    @classmethod
    def from_rig(cls, rig) -> "MotionDataset":
        lat, aud = [], []
        for ep in rig.all_episodes():
            if ep.pcm is None:
                raise DiffusionError("stage-2 data needs episodes with audio")
            feats = video_features(ep.pcm)
            if feats.shape[1] != ep.T:
                raise DiffusionError(f"audio has {feats.shape[1]} frames, episode {ep.T}")
            if ep.T < WINDOW:
                raise DiffusionError(f"episode of {ep.T} frames is shorter than {WINDOW}")
            lat.append(ep.latents())
            aud.append(feats)
        return cls(lat, aud)

    @property
    def K(self) -> int:
        return (self.latents[0].shape[1] - 6) // 3

    def window(self, i: int, start: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        lat = self.latents[i][start:start + WINDOW]
        aud = self.audio[i][:, start:start + WINDOW]
        _, delta, _ = unpack_sequence(lat)
        return lat, aud, emotion_descriptor(delta, EMOTION_WINDOW, WINDOW // 2).vector

    def sample(self, rng: np.random.Generator, batch_size: int) -> dict[str, np.ndarray]:
        eps_idx = rng.integers(0, len(self.latents), batch_size)
        rows = [self.window(int(i), int(rng.integers(0, self.latents[i].shape[0] - WINDOW + 1)))
                for i in eps_idx]
        return {"latents": np.stack([r[0] for r in rows]),
                "audio": np.stack([r[1] for r in rows], axis=1),
                "emotion": np.stack([r[2] for r in rows])}

    def stats(self) -> NormStats:
        lat = np.concatenate(self.latents)
        aud = np.concatenate(self.audio, axis=1)
        emo = np.stack([self.window(i, s)[2] for i in range(len(self.latents))
                        for s in range(0, self.latents[i].shape[0] - WINDOW + 1, 25)])
        return NormStats(lat.mean(0), lat.std(0), aud.mean(1), aud.std(1),
                         emo.mean(0), emo.std(0))


# -- training -----------------------------------------------------------------------

@dataclass
class Stage2Config:
    steps: int = 5000
    batch_size: int = 8
    lr: float = 0.25
    momentum: float = 0.9
    clip_norm: float = 1.0
    seed: int = 0
    profile: str = "default"
    use_emotion: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")


def prepare_batch(model: DenoiserModel, batch: dict[str, np.ndarray], use_emotion: bool = True
                  ) -> tuple[np.ndarray, Conditions]:
    lat = np.asarray(batch["latents"], dtype=np.float64)
    if lat.shape[1] != WINDOW:
        raise DiffusionError(f"training windows must be {WINDOW} frames, got {lat.shape[1]}")
    emo = model.norm_emotion(batch["emotion"])
    if not use_emotion:
        emo = np.zeros_like(emo)
    return model.norm_latents(lat), Conditions(model.norm_audio(batch["audio"]), emo)


def draw_noise(model: DenoiserModel, shape: tuple[int, ...], seed: int):
    rng = make_rng(seed, "stage2-noise")
    t = rng.integers(1, model.schedule.T_steps + 1, shape[0])
    return t, rng.standard_normal(shape)


def train_step(model: DenoiserModel, batch: dict[str, np.ndarray], seed: int,
               config: Stage2Config = Stage2Config()) -> float:
    """One SGD-with-momentum update on the epsilon-prediction loss."""
    m0, cond = prepare_batch(model, batch, config.use_emotion)
    t, eps = draw_noise(model, m0.shape, seed)
    params = model.tensors(requires_grad=True)
    loss = diffusion_loss(model, m0, t, eps, cond, params=params)
    if not np.isfinite(loss.data):
        raise LossError("diffusion loss is not finite")
    loss.backward()
    bad = optim.sgd_momentum(model.params, model.velocity, params, config.lr,
                             config.momentum, config.clip_norm)
    if bad:
        raise LossError(f"parameter {bad[0]} became non-finite")
    return float(loss.data)


def eval_loss(model: DenoiserModel, batch: dict[str, np.ndarray], seed: int,
              use_emotion: bool = True) -> float:
    m0, cond = prepare_batch(model, batch, use_emotion)
    t, eps = draw_noise(model, m0.shape, seed)
    return diffusion_loss(model, m0, t, eps, cond)


def init_model(config: Stage2Config, data: MotionDataset) -> DenoiserModel:
    cfg = PROFILES[config.profile][0]
    model = DenoiserModel(DenoiserConfig(**{**asdict(cfg), "K": data.K}),
                          seed=derive_seed(config.seed, "init"))
    model.stats = data.stats()
    return model


def train(config: Stage2Config, data: MotionDataset,
          callback: Callable[[int, float], None] | None = None
          ) -> tuple[DenoiserModel, list[float]]:
    """Training run; a pure function of (config, data)."""
    model = init_model(config, data)
    rng = make_rng(config.seed, "stage2-batches")
    history = []
    for step in range(config.steps):
        batch = data.sample(rng, config.batch_size)
        loss = train_step(model, batch, derive_seed(config.seed, "step", step), config)
        history.append(loss)
        if callback is not None:
            callback(step, loss)
    return model, history


# -- generation ---------------------------------------------------------------------

def chunk_plan(T: int) -> list[tuple[int, int]]:
    """(start, end) of the overlapping chunks covering T frames."""
    if T < 1:
        raise DiffusionError("nothing to generate")
    plan, start = [], 0
    while True:
        end = min(start + WINDOW, T)
        plan.append((start, end))
        if end == T:
            return plan
        start += STRIDE


class ChunkStitcher:
    """Cross-fades consecutive chunks and releases frames once they are final."""

    def __init__(self):
        self._pending: np.ndarray | None = None
        self._pending_start = 0
        self.emitted = 0

    def push(self, chunk: np.ndarray, start: int, final: bool = False) -> np.ndarray:
        chunk = np.array(chunk, dtype=np.float64)
        if self._pending is not None:
            n = self._pending_start + len(self._pending) - start
            if start != self.emitted or n < 0 or n > len(chunk):
                raise DiffusionError(f"chunk at {start} does not continue the stream")
            w = (np.arange(1, n + 1) / (n + 1))[:, None]
            chunk[:n] = (1.0 - w) * self._pending[:n] + w * chunk[:n]
        elif start != self.emitted:
            raise DiffusionError(f"chunk at {start} does not continue the stream")
        keep = 0 if final else min(OVERLAP, len(chunk))
        out = chunk[:len(chunk) - keep]
        self._pending = chunk[len(chunk) - keep:] if keep else None
        self._pending_start = start + len(out)
        self.emitted += len(out)
        return out

    def flush(self) -> np.ndarray:
        out = self._pending if self._pending is not None else np.zeros((0, 0))
        self.emitted += len(self._pending) if self._pending is not None else 0
        self._pending = None
        return out


def sample_chunk(model: DenoiserModel, audio_norm: np.ndarray, emotion_norm: np.ndarray,
                 seed: int, index: int, n_steps: int, eta: float = 0.0) -> np.ndarray:
    """Raw latents (n, Dl) for one chunk; ``audio_norm`` is (L, n, D)."""
    n = audio_norm.shape[1]
    cond = Conditions(audio_norm[:, None], emotion_norm[None])
    z = ddim_sample(model, (1, n, model.config.latent_dim), cond, n_steps, eta,
                    rng=make_rng(seed, "chunk", index))
    return model.denorm_latents(z[0])


def generate(model: DenoiserModel, pcm, canonical=None, emotion: EmotionDescriptor | None = None,
             seed: int = 0, n_steps: int = 50, eta: float = 0.0,
             pose: np.ndarray | None = None) -> MotionSequence:
    """Motion latents for an audio clip, one row per 25 Hz video frame.

    ``pose`` (T, 3), when given, replaces the generated head pose.
    """
    K = model.config.K
    if canonical is not None and np.asarray(canonical).shape != (K, 3):
        raise KeypointError(f"canonical shape {np.asarray(canonical).shape} != {(K, 3)}")
    x = audiofeat.to_float(pcm).reshape(-1)
    if x.size == 0:
        raise audiofeat.AudioError("empty audio")
    if x.size < audiofeat.WINDOW:
        x = np.concatenate([x, np.zeros(audiofeat.WINDOW - x.size)])
        feats = video_features(x)[:, :audiofeat.video_frames(audiofeat.to_float(pcm).size)]
    else:
        feats = video_features(x)
    emotion = emotion or EmotionDescriptor.zeros(K)
    if emotion.K != K:
        raise DiffusionError(f"emotion descriptor K={emotion.K}, model K={K}")
    audio_norm = model.norm_audio(feats)
    emo_norm = model.norm_emotion(emotion.vector)
    T = feats.shape[1]
    plan = chunk_plan(T)
    stitch = ChunkStitcher()
    parts = []
    for i, (s, e) in enumerate(plan):
        chunk = sample_chunk(model, audio_norm[:, s:e], emo_norm, seed, i, n_steps, eta)
        parts.append(stitch.push(chunk, s, final=i == len(plan) - 1))
    out = np.concatenate(parts)
    if pose is not None:
        pose = np.asarray(pose, dtype=np.float64)
        if pose.shape != (T, 3):
            raise DiffusionError(f"pose track {pose.shape} != {(T, 3)}")
        out[:, :3] = pose
    return MotionSequence(out)


def config_hash(items: dict) -> str:
    text = "\n".join(f"{k}={items[k]}" for k in sorted(items))
    return hashlib.sha256(text.encode()).hexdigest()[:16]
