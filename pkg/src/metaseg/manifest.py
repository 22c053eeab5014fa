"""Run configuration persisted next to every checkpoint and result table."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .augment import AugmentConfig
from .errors import ConfigError
from .metatrain import MamlConfig, RefineConfig, TransferConfig
from .sampler import SamplerConfig
from .segnet import UNetConfig

MODES = ("maml", "transfer", "refine", "eval")
DESK_CROP = (64, 64)


def _desk_augment() -> AugmentConfig:
    return AugmentConfig(crop=DESK_CROP)


@dataclass(frozen=True)
class RunManifest:
    mode: str = "maml"
    dataset_root: str = "data"
    output_dir: str = "runs/run"
    train_sources: tuple[str, ...] | None = None
    held_out: str | None = None
    split_fractions: tuple[float, ...] = (0.5, 0.5)
    split_seed: int = 0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    augment: AugmentConfig | None = field(default_factory=_desk_augment)
    unet: UNetConfig = field(default_factory=UNetConfig)
    maml: MamlConfig = field(default_factory=MamlConfig)
    transfer: TransferConfig = field(default_factory=TransferConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    init_checkpoint: str | None = None
    init_seed: int = 0
    seed: int = 0
    workers: int = 1
    precision: str | None = None
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.precision not in (None, "f32", "f64"):
            raise ConfigError(f"precision must be f32, f64 or null, got {self.precision!r}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if self.mode in ("refine", "eval") and not self.held_out:
            raise ConfigError(f"mode {self.mode!r} needs held_out")
        if self.mode == "eval" and not self.init_checkpoint:
            raise ConfigError("mode 'eval' needs init_checkpoint")
        if self.train_sources is not None:
            object.__setattr__(self, "train_sources", tuple(self.train_sources))
            if self.held_out in self.train_sources:
                raise ConfigError(f"held-out source {self.held_out!r} is also a training source")
        object.__setattr__(self, "split_fractions", tuple(float(f) for f in self.split_fractions))

    def to_dict(self) -> dict[str, Any]:
        return _plain(dataclasses.asdict(self))

    def to_json(self) -> str:
        """Canonical serialization: sorted keys, fixed separators."""
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def digest(self) -> str:
        """Hash of the run configuration; the output location is not part of it."""
        body = self.to_dict()
        body.pop("output_dir")
        canon = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def replace(self, **changes) -> RunManifest:
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RunManifest:
        if not isinstance(data, dict):
            raise ConfigError("manifest must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown manifest keys: {sorted(unknown)}")
        kwargs = dict(data)
        nested = {"sampler": SamplerConfig, "augment": AugmentConfig, "unet": UNetConfig,
                  "maml": MamlConfig, "transfer": TransferConfig, "refine": RefineConfig}
        try:
            for key, typ in nested.items():
                if key in kwargs and kwargs[key] is not None:
                    kwargs[key] = _build(typ, kwargs[key], key)
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"invalid manifest: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> RunManifest:
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"manifest not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


def _build(typ, value, key):
    if not isinstance(value, dict):
        raise ConfigError(f"{key} must be an object")
    names = {f.name for f in dataclasses.fields(typ)}
    unknown = set(value) - names
    if unknown:
        raise ConfigError(f"unknown keys in {key}: {sorted(unknown)}")
    value = {k: tuple(v) if isinstance(v, list) else v for k, v in value.items()}
    return typ(**value)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj
