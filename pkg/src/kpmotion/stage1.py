"""Stage 1: factorize observations into canonical, pose, expression and translation.

The encoder has four independent two-layer tanh MLP heads (no shared trunk)
so that expression leaking into the canonical estimate can be attributed to
one head. Training reconstructs a target frame from the source canonical and
the target's motion (self-reenactment), combining reconstruction and
perceptual stand-ins with the canonical-consistency and landmark terms and
small auxiliary priors. Updates are plain SGD with momentum.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Protocol

import numpy as np

from kpmotion import __version__, checkpoint, losses, optim
from kpmotion.autograd import Tensor, as_tensor, euler_to_rowmatrix, no_grad
from kpmotion.kpspace import (DEFAULT_K, EXPRESSION_LIMIT, FactorBatch, KeypointError,
                              MotionFactors)
from kpmotion.losses import LossError, LossWeights, Similarity2D
from kpmotion.rng import derive_seed, make_rng
from kpmotion.synthrig import Rig, RigConfig, RigError, canonical_distance, layout

log = logging.getLogger(__name__)

HEADS = ("canonical", "pose", "expression", "translation")
SUBTLE_AMPLITUDE = 0.05


class Decomposer(Protocol):
    def encode_batch(self, obs: np.ndarray) -> FactorBatch: ...


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 32
    lr: float = 0.2
    momentum: float = 0.9
    clip_norm: float | None = 1.0
    weights: LossWeights = field(default_factory=LossWeights)
    use_canonical: bool = True
    use_landmark: bool = True
    use_aux: bool = True
    landmark_pairing: str = "own"
    seed: int = 0
    K: int = DEFAULT_K
    hidden: int = 128
    n_identities: int = 128
    episodes_per_identity: int = 2
    episode_frames: int = 50

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.episodes_per_identity < 2:
            raise ValueError("canonical pairing needs >= 2 episodes per identity")


def _head_dims(K: int) -> dict[str, int]:
    return {"canonical": 3 * K, "pose": 3, "expression": 3 * K, "translation": 3}


def param_names(head: str) -> tuple[str, ...]:
    return tuple(f"{head}.{p}" for p in ("W1", "b1", "W2", "b2"))


class EncoderModel:
    """Four-head MLP encoder mapping flattened observations (3K) to motion factors."""

    def __init__(self, K: int = DEFAULT_K, hidden: int = 128, seed: int | None = 0,
                 expression_limit: float = EXPRESSION_LIMIT):
        self.K = K
        self.hidden = hidden
        self.expression_limit = expression_limit
        self.params: dict[str, np.ndarray] = {}
        dims = _head_dims(K)
        for head in HEADS:
            w1, b1, w2, b2 = param_names(head)
            self.params[w1] = np.zeros((3 * K, hidden))
            self.params[b1] = np.zeros(hidden)
            self.params[w2] = np.zeros((hidden, dims[head]))
            self.params[b2] = np.zeros(dims[head])
        if seed is not None:
            for i, head in enumerate(HEADS):
                rng = make_rng(seed, "encoder-init", i)
                w1, _, w2, b2 = param_names(head)
                self.params[w1] = rng.standard_normal((3 * K, hidden)) / np.sqrt(3 * K)
                self.params[w2] = 0.1 * rng.standard_normal((hidden, dims[head])) / np.sqrt(hidden)
            self.params["canonical.b2"] = layout(K).template.reshape(-1).copy()
        self.velocity = {k: np.zeros_like(v) for k, v in self.params.items()}

    @classmethod
    def zeros(cls, K: int = DEFAULT_K, hidden: int = 128) -> "EncoderModel":
        return cls(K, hidden, seed=None)

    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    @property
    def obs_dim(self) -> int:
        return 3 * self.K

    def copy(self) -> "EncoderModel":
        m = EncoderModel.zeros(self.K, self.hidden)
        m.expression_limit = self.expression_limit
        m.params = {k: v.copy() for k, v in self.params.items()}
        m.velocity = {k: v.copy() for k, v in self.velocity.items()}
        return m

    # -- forward ------------------------------------------------------------
    def _check(self, obs) -> None:
        if as_tensor(obs).shape[-1] != self.obs_dim:
            raise KeypointError(
                f"observation dim {as_tensor(obs).shape[-1]} != model input {self.obs_dim}")

    def head(self, params: dict[str, Tensor], name: str, obs: Tensor) -> Tensor:
        w1, b1, w2, b2 = (params[n] for n in param_names(name))
        out = ((obs @ w1 + b1).tanh()) @ w2 + b2
        if name == "expression":
            out = out.tanh() * self.expression_limit
        return out

    def forward(self, params: dict[str, Tensor], obs, heads=HEADS) -> dict[str, Tensor]:
        """Tensor-level factors for a batch of observations (B, 3K)."""
        obs = as_tensor(obs)
        self._check(obs)
        B = obs.shape[0]
        out = {}
        for name in heads:
            y = self.head(params, name, obs)
            if name in ("canonical", "expression"):
                y = y.reshape(B, self.K, 3)
            out[name] = y
        return out

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def encode_batch(self, obs: np.ndarray) -> FactorBatch:
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        with no_grad():
            f = self.forward(self.tensors(), obs)
        return FactorBatch(f["canonical"].data, f["pose"].data, f["expression"].data,
                           f["translation"].data)

    def encode(self, observation: np.ndarray) -> MotionFactors:
        obs = np.asarray(observation, dtype=np.float64).reshape(-1)
        self._check(obs)
        return self.encode_batch(obs[None]).factors(0)


class PassthroughEncoder:
    """Treats the observation itself as canonical geometry (no motion factored out)."""

    def __init__(self, K: int = DEFAULT_K):
        self.K = K

    def encode_batch(self, obs: np.ndarray) -> FactorBatch:
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        B = obs.shape[0]
        return FactorBatch(obs.reshape(B, self.K, 3), np.zeros((B, 3)),
                           np.zeros((B, self.K, 3)), np.zeros((B, 3)))


def compose_t(canonical: Tensor, euler: Tensor, expression: Tensor, translation: Tensor) -> Tensor:
    R = euler_to_rowmatrix(euler)
    return canonical @ R + expression + translation.reshape(translation.shape[0], 1, 3)


# -- objective ------------------------------------------------------------------

def sample_batch(rig: Rig, batch_size: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Source/target frames from one episode plus a second view from another episode."""
    n_id = len(rig.identities)
    n_ep = len(rig.episodes[0])
    ids = rng.integers(0, n_id, batch_size)
    e1 = rng.integers(0, n_ep, batch_size)
    e2 = (e1 + rng.integers(1, n_ep, batch_size)) % n_ep
    T = rig.episodes[0][0].T
    fs, ft, fu = (rng.integers(0, T, batch_size) for _ in range(3))
    eps1 = [rig.episodes[i][e] for i, e in zip(ids, e1)]
    eps2 = [rig.episodes[i][e] for i, e in zip(ids, e2)]
    return {
        "obs_s": np.stack([ep.observations[f] for ep, f in zip(eps1, fs)]),
        "obs_t": np.stack([ep.observations[f] for ep, f in zip(eps1, ft)]),
        "obs_2": np.stack([ep.observations[f] for ep, f in zip(eps2, fu)]),
        "lm_s": np.stack([ep.landmarks[f] for ep, f in zip(eps1, fs)]),
        "lm_t": np.stack([ep.landmarks[f] for ep, f in zip(eps1, ft)]),
    }


def objective(model: EncoderModel, params: dict[str, Tensor], batch: dict[str, np.ndarray],
              config: TrainConfig, transform: Similarity2D | None = None
              ) -> tuple[Tensor, dict[str, Tensor]]:
    """Total loss and its parts for one batch (differentiable in ``params``)."""
    K = model.K
    B = batch["obs_s"].shape[0]
    src = model.forward(params, batch["obs_s"])
    tgt = model.forward(params, batch["obs_t"], heads=HEADS[1:])
    x_s = compose_t(src["canonical"], src["pose"], src["expression"], src["translation"])
    x_d = compose_t(src["canonical"], tgt["pose"], tgt["expression"], tgt["translation"])
    target = batch["obs_t"].reshape(B, K, 3)
    parts: dict[str, Tensor] = {
        "recon": losses.recon_loss(x_d, Tensor(target)),
        "percep": losses.percep_loss(x_d, Tensor(target), seed=config.seed, batch_axes=1),
    }
    if config.use_canonical:
        second = model.forward(params, batch["obs_2"], heads=("canonical",))["canonical"]
        parts["canonical"] = losses.canonical_loss(src["canonical"], second)
    if config.use_landmark:
        parts["landmark"] = losses.landmark_loss(
            Tensor(batch["lm_s"]), x_s, Tensor(batch["lm_t"]), x_d,
            layout(K).landmark_index, pairing=config.landmark_pairing)
    if config.use_aux:
        if transform is not None:
            def kp(obs):
                f = model.forward(params, obs)
                return compose_t(f["canonical"], f["pose"], f["expression"], f["translation"])

            parts["equivariance"] = losses.equivariance_loss(kp, batch["obs_s"], transform)
        parts["keypoint_prior"] = losses.keypoint_prior(x_s)
        parts["deformation_prior"] = (losses.deformation_prior(src["expression"])
                                      + losses.deformation_prior(tgt["expression"])) * 0.5
    return losses.total_loss(parts, config.weights), parts


def breakdown(total: Tensor, parts: dict[str, Tensor]) -> dict[str, float]:
    out = {"total": float(total.data)}
    for name in losses.LOSS_TERMS:
        out[name] = float(parts[name].data) if name in parts else 0.0
    return out


def train_step(model: EncoderModel, batch: dict[str, np.ndarray], config: TrainConfig,
               transform: Similarity2D | None = None) -> dict[str, float]:
    """One SGD-with-momentum update; returns every loss term (disabled terms as 0)."""
    params = model.tensors(requires_grad=True)
    try:
        total, parts = objective(model, params, batch, config, transform)
    except LossError as exc:
        raise LossError(f"aborting train step: {exc}") from exc
    total.backward()
    bad = optim.sgd_momentum(model.params, model.velocity, params, config.lr,
                             config.momentum, config.clip_norm)
    if bad:
        raise LossError(f"parameter {bad[0]} became non-finite")
    return breakdown(total, parts)


def training_rig(config: TrainConfig, rig_config: RigConfig | None = None) -> Rig:
    rc = rig_config or RigConfig(K=config.K)
    return Rig.build(config.n_identities, config.episodes_per_identity, config.episode_frames,
                     derive_seed(config.seed, "train-rig"), rc)


def train(config: TrainConfig, rig: Rig | None = None,
          callback: Callable[[int, dict[str, float]], None] | None = None
          ) -> tuple[EncoderModel, list[dict[str, float]]]:
    """Full training run, a pure function of ``config`` (and ``rig``)."""
    rig = rig or training_rig(config)
    model = EncoderModel(config.K, config.hidden, seed=derive_seed(config.seed, "init"))
    rng = make_rng(config.seed, "stage1-batches")
    history = []
    for step in range(config.steps):
        batch = sample_batch(rig, config.batch_size, rng)
        transform = Similarity2D.random(rng) if config.use_aux else None
        out = train_step(model, batch, config, transform)
        history.append(out)
        if callback is not None:
            callback(step, out)
    return model, history


# -- metrics ----------------------------------------------------------------------

def leakage_pairs(rig: Rig, n_pairs: int) -> list[tuple[np.ndarray, np.ndarray, int]]:
    """Same-identity frame pairs with the most different expressions, round-robin over ids."""
    per_id = []
    for i, eps in enumerate(rig.episodes):
        expr = np.concatenate([ep.expression.reshape(ep.T, -1) for ep in eps])
        obs = np.concatenate([ep.observations for ep in eps])
        d = np.linalg.norm(expr[:, None] - expr[None], axis=-1)
        iu, ju = np.triu_indices(len(expr), k=1)
        order = np.argsort(-d[iu, ju], kind="stable")
        per_id.append([(obs[iu[o]], obs[ju[o]], i) for o in order])
    pairs, rank = [], 0
    while len(pairs) < n_pairs:
        for cand in per_id:
            if len(pairs) < n_pairs:
                pairs.append(cand[rank])
        rank += 1
    return pairs


def leakage_metric(model: Decomposer, rig: Rig, n_pairs: int = 40) -> float:
    """Same-identity canonical spread over cross-identity canonical spread.

    0 means canonical estimates ignore expression entirely; values near 1 mean
    expression moves the canonical estimate as much as identity does.
    """
    if n_pairs < 30:
        raise ValueError("leakage_metric needs n_pairs >= 30")
    n_id = len(rig.identities)
    if n_id < 2:
        raise RigError("leakage needs at least two identities")
    pairs = leakage_pairs(rig, n_pairs)
    a = model.encode_batch(np.stack([p[0] for p in pairs])).canonical
    b = model.encode_batch(np.stack([p[1] for p in pairs])).canonical
    same = canonical_distance(a, b).mean()
    # cross-identity: each pair's first frame against the next identity's first frame
    by_id = {}
    for k, p in enumerate(pairs):
        by_id.setdefault(p[2], k)
    ids = sorted(by_id)
    partner = np.array([by_id[ids[(ids.index(p[2]) + 1) % len(ids)]] for p in pairs])
    cross = canonical_distance(a, a[partner]).mean()
    if cross <= 0:
        return 0.0 if same == 0 else float("inf")
    return float(same / cross)


def subtle_rig(seed: int, n_identities: int = 40, T: int = 50, K: int = DEFAULT_K) -> Rig:
    """Evaluation rig whose expression never exceeds the subtle amplitude."""
    return Rig.build(n_identities, 1, T, seed,
                     RigConfig(K=K, expression_max=SUBTLE_AMPLITUDE))


def subtle_expression_error(model: Decomposer, rig: Rig, n_pairs: int = 200) -> float:
    """Mean xy landmark error of cross-identity retargeting on low-amplitude expressions."""
    peak = max(np.abs(ep.expression).max() for ep in rig.all_episodes())
    if peak > SUBTLE_AMPLITUDE + 1e-12:
        raise RigError(f"rig expression amplitude {peak:.3g} exceeds {SUBTLE_AMPLITUDE}")
    pairs = rig.cross_pairs(n_pairs, derive_seed(rig.seed, "subtle"))
    src = model.encode_batch(np.stack([p.source_obs for p in pairs]))
    drv = model.encode_batch(np.stack([p.driving_obs for p in pairs]))
    pred = drv.retarget_onto(src.canonical)
    truth = np.stack([p.truth.points for p in pairs])
    idx = rig.layout.landmark_index
    err = np.linalg.norm(pred[:, idx, :2] - truth[:, idx, :2], axis=-1)
    return float(err.mean())


def config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["weights"] = config.weights.as_dict()
    return d


def ablation(config: TrainConfig, variant: str) -> TrainConfig:
    """``full``, ``no_canonical`` or ``no_landmark`` copies of ``config``."""
    if variant == "full":
        return replace(config, use_canonical=True, use_landmark=True)
    if variant == "no_canonical":
        return replace(config, use_canonical=False, use_landmark=True)
    if variant == "no_landmark":
        return replace(config, use_canonical=True, use_landmark=False)
    raise ValueError(f"unknown ablation variant {variant!r}")


# -- persistence ----------------------------------------------------------------------

SECTION_TAG = "STG1"


def model_section(model: EncoderModel, **meta) -> checkpoint.Section:
    info = {"version": __version__, "K": model.K, "H": model.hidden,
            "expression_limit": repr(model.expression_limit),
            "head_dims": ",".join(str(v) for v in _head_dims(model.K).values())}
    info.update(meta)
    arrays = {k: model.params[k] for head in HEADS for k in param_names(head)}
    return checkpoint.Section(SECTION_TAG, info, arrays)


def save_model(model: EncoderModel, path, **meta) -> None:
    checkpoint.write(path, [model_section(model, **meta)])


def model_from_section(section: checkpoint.Section) -> EncoderModel:
    m = section.meta
    model = EncoderModel.zeros(int(m["K"]), int(m["H"]))
    model.expression_limit = float(m.get("expression_limit", EXPRESSION_LIMIT))
    for k in model.params:
        a = section.arrays.get(k)
        if a is None or a.shape != model.params[k].shape:
            raise checkpoint.CheckpointError(f"checkpoint array {k} missing or misshapen")
        model.params[k] = a.copy()
    return model


def load_model(path) -> EncoderModel:
    return model_from_section(checkpoint.find(checkpoint.read(path), SECTION_TAG))
