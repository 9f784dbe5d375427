"""Flat ``key=value`` pipeline configuration with CLI overrides and a stable hash."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

from kpmotion.kpspace import DEFAULT_K

EMOTION_SOURCES = ("none", "descriptor", "episode")
UNDERRUN_POLICIES = ("block", "drop-late", "emit-freeze")
POSE_SOURCES = ("generated", "file")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    # paths
    stage1_ckpt: str = ""
    stage2_ckpt: str = ""
    output: str = ""
    # model and diffusion
    K: int = DEFAULT_K
    hidden: int = 128
    profile: str = "default"
    ddim_steps: int = 50
    eta: float = 0.0
    # conditioning
    emotion_source: str = "none"
    emotion_path: str = ""
    pose_source: str = "generated"
    pose_path: str = ""
    # training
    steps: int = 5000
    batch_size: int = 32
    lr: float = 1e-3
    use_canonical: bool = True
    use_landmark: bool = True
    # streaming and benchmark
    underrun_policy: str = "block"
    prebuffer_s: float = 1.0
    queue_frames: int = 8
    paced: bool = True
    bench_frames: int = 2500
    seed: int = 0

    def __post_init__(self):
        if self.emotion_source not in EMOTION_SOURCES:
            raise ConfigError(f"emotion_source must be one of {EMOTION_SOURCES}")
        if self.underrun_policy not in UNDERRUN_POLICIES:
            raise ConfigError(f"underrun_policy must be one of {UNDERRUN_POLICIES}")
        if self.pose_source not in POSE_SOURCES:
            raise ConfigError(f"pose_source must be one of {POSE_SOURCES}")
        if self.queue_frames < 1:
            raise ConfigError("queue_frames must be >= 1")
        if self.prebuffer_s < 0:
            raise ConfigError("prebuffer_s must be >= 0")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError("eta must lie in [0, 1]")

    # -- parsing ------------------------------------------------------------------
    @classmethod
    def coerce(cls, key: str, value: str):
        types = {f.name: f.type for f in fields(cls)}
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        kind = types[key]
        try:
            if kind in (bool, "bool"):
                v = value.strip().lower()
                if v not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return v in ("true", "1", "yes")
            if kind in (int, "int"):
                return int(value)
            if kind in (float, "float"):
                return float(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {value!r}") from exc
        return value.strip()

    @classmethod
    def parse(cls, text: str) -> dict:
        out = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key=value")
            k, _, v = line.partition("=")
            out[k.strip()] = cls.coerce(k.strip(), v)
        return out

    @classmethod
    def load(cls, path: str | Path | None = None, **overrides) -> "PipelineConfig":
        """File values first, then non-None ``overrides`` (CLI flags) on top."""
        values = cls.parse(Path(path).read_text()) if path else {}
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def with_overrides(self, **overrides) -> "PipelineConfig":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    def hash(self) -> str:
        """Hash of every setting except output location."""
        items = [f"{f.name}={getattr(self, f.name)}" for f in fields(self) if f.name != "output"]
        return hashlib.sha256("\n".join(items).encode()).hexdigest()[:16]

    def validate(self, *required: str) -> "PipelineConfig":
        """Check that the named path settings (and any set auxiliary paths) exist."""
        for name in required:
            if not getattr(self, name):
                raise ConfigError(f"{name} is required")
        for name in ("stage1_ckpt", "stage2_ckpt", "emotion_path", "pose_path"):
            p = getattr(self, name)
            if p and not Path(p).exists():
                raise ConfigError(f"{name}: {p} does not exist")
        if self.emotion_source != "none" and not self.emotion_path:
            raise ConfigError(f"emotion_source={self.emotion_source} needs emotion_path")
        if self.pose_source == "file" and not self.pose_path:
            raise ConfigError("pose_source=file needs pose_path")
        return self
