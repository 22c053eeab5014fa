"""Mini U-Net backbone with task-specific 1x1 heads and a functional forward.

Parameters live in a flat, immutable :class:`ParamSet` keyed by path-like
names (``backbone/enc0/conv1/weight``, ``heads/<task>/bias``). The forward
pass takes the ParamSet as an argument instead of owning weights, so base
weights and any number of adapted copies can be evaluated side by side.
"""

from __future__ import annotations

import json
import zlib
from collections.abc import Iterator, Mapping
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, RoutingError, ShapeError

HEAD_PREFIX = "heads/"
BACKBONE_PREFIX = "backbone/"
CHECKPOINT_FORMAT = "metaseg-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 3
    base_channels: int = 8
    in_channels: int = 3

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1 or self.in_channels < 1:
            raise ConfigError("channel counts must be positive")

    @property
    def multiple(self) -> int:
        """Input H and W must be divisible by this."""
        return 2 ** self.depth


@dataclass(frozen=True)
class InitSpec:
    seed: int = 0


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ParamSet(Mapping):
    """Immutable name -> array mapping plus the backbone config.

    Arrays are stored read-only; every update produces a new ParamSet that
    shares untouched arrays with its parent.
    """

    config: UNetConfig | None
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        frozen = {}
        for name, arr in self.tensors.items():
            arr = np.asarray(arr)
            if arr.flags.writeable:
                arr = _freeze(arr)
            frozen[name] = arr
        object.__setattr__(self, "tensors", frozen)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    @property
    def heads(self) -> dict[str, int]:
        """Task id -> number of classes."""
        out = {}
        for name, arr in self.tensors.items():
            if name.startswith(HEAD_PREFIX) and name.endswith("/weight"):
                out[name[len(HEAD_PREFIX):-len("/weight")]] = arr.shape[0]
        return out

    def backbone_keys(self) -> list[str]:
        return [n for n in self.tensors if not n.startswith(HEAD_PREFIX)]

    def head_keys(self, task_id: str) -> list[str]:
        return [head_name(task_id, "weight"), head_name(task_id, "bias")]

    def keys_for(self, task_id: str) -> list[str]:
        """Backbone parameters plus the head of ``task_id``."""
        if self.heads and task_id not in self.heads:
            raise RoutingError(f"no head for task {task_id!r}; known: {sorted(self.heads)}")
        if not self.heads:
            return self.backbone_keys()
        return self.backbone_keys() + self.head_keys(task_id)

    def copy(self) -> ParamSet:
        return ParamSet(self.config, {k: _freeze(v) for k, v in self.tensors.items()})

    def replace(self, updates: Mapping[str, np.ndarray]) -> ParamSet:
        tensors = dict(self.tensors)
        for name, arr in updates.items():
            if name not in tensors:
                raise KeyError(f"unknown parameter {name!r}")
            if np.shape(arr) != tensors[name].shape:
                raise ShapeError(f"{name}: shape {np.shape(arr)} != {tensors[name].shape}")
            tensors[name] = arr
        return ParamSet(self.config, tensors)

    def equal(self, other: ParamSet) -> bool:
        """Bitwise equality of names, shapes, dtypes and values."""
        if list(self.tensors) != list(other.tensors):
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in ((self.tensors[k], other.tensors[k]) for k in self.tensors)
        )


def head_name(task_id: str, leaf: str) -> str:
    return f"{HEAD_PREFIX}{task_id}/{leaf}"


def _layer_specs(cfg: UNetConfig) -> list[tuple[str, int, int, int]]:
    """(prefix, in_channels, out_channels, kernel) for every backbone conv in forward order."""
    specs = []
    c_in = cfg.in_channels
    widths = [cfg.base_channels * 2 ** i for i in range(cfg.depth + 1)]
    for level in range(cfg.depth):
        specs.append((f"enc{level}/conv1", c_in, widths[level], 3))
        specs.append((f"enc{level}/conv2", widths[level], widths[level], 3))
        c_in = widths[level]
    specs.append(("mid/conv1", c_in, widths[-1], 3))
    specs.append(("mid/conv2", widths[-1], widths[-1], 3))
    c_in = widths[-1]
    for level in reversed(range(cfg.depth)):
        specs.append((f"dec{level}/conv1", c_in + widths[level], widths[level], 3))
        specs.append((f"dec{level}/conv2", widths[level], widths[level], 3))
        c_in = widths[level]
    return specs


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _head_arrays(cfg: UNetConfig, task_id: str, num_classes: int, init: InitSpec, dtype):
    if num_classes < 2:
        raise ConfigError(f"task {task_id!r} needs at least 2 classes, got {num_classes}")
    if "/" in task_id or not task_id:
        raise ConfigError(f"task id must be non-empty and contain no '/': {task_id!r}")
    rng = np.random.default_rng([init.seed, zlib.crc32(task_id.encode("utf-8"))])
    weight = _he_uniform(rng, (num_classes, cfg.base_channels, 1, 1)).astype(dtype)
    return {
        head_name(task_id, "weight"): weight,
        head_name(task_id, "bias"): np.zeros(num_classes, dtype=dtype),
    }


def build_model(cfg: UNetConfig, tasks: list[tuple[str, int]], init: InitSpec = InitSpec(),
                dtype=None) -> ParamSet:
    """Fresh backbone plus one head per ``(task_id, num_classes)``."""
    dtype = T.default_dtype() if dtype is None else dtype
    ids = [t for t, _ in tasks]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate task ids in {ids}")
    rng = np.random.default_rng(init.seed)
    tensors: dict[str, np.ndarray] = {}
    for prefix, c_in, c_out, k in _layer_specs(cfg):
        tensors[f"{BACKBONE_PREFIX}{prefix}/weight"] = _he_uniform(rng, (c_out, c_in, k, k)).astype(dtype)
        tensors[f"{BACKBONE_PREFIX}{prefix}/bias"] = np.zeros(c_out, dtype=dtype)
    for task_id, k in tasks:
        tensors.update(_head_arrays(cfg, task_id, k, init, dtype))
    return ParamSet(cfg, tensors)


def attach_head(params: ParamSet, task_id: str, num_classes: int, init: InitSpec = InitSpec()) -> ParamSet:
    """Return a ParamSet with the same backbone and a new head for ``task_id``."""
    if task_id in params.heads:
        raise ConfigError(f"task {task_id!r} already has a head")
    if params.config is None:
        raise ContractError("attach_head needs a U-Net ParamSet")
    tensors = dict(params.tensors)
    tensors.update(_head_arrays(params.config, task_id, num_classes, init, params.dtype))
    return ParamSet(params.config, tensors)


def register(graph: T.Graph, params: ParamSet, names: list[str], requires_grad: bool = True) -> dict[str, T.Var]:
    return {n: graph.param(n, params[n], requires_grad=requires_grad) for n in names}


def unet_logits(cfg: UNetConfig, pv: Mapping[str, T.Var], task_id: str, images) -> T.Var:
    """Build the forward graph for one task. ``pv`` maps parameter names to graph variables."""
    head_w = head_name(task_id, "weight")
    if head_w not in pv:
        raise RoutingError(f"no head for task {task_id!r}")
    graph = pv[head_w].graph
    x = images if isinstance(images, T.Var) else graph.const(images)
    if x.value.ndim != 4:
        raise ShapeError(f"images must be [B,C,H,W], got {x.value.shape}")
    _, c, h, w = x.value.shape
    if c != cfg.in_channels:
        raise ShapeError(f"expected {cfg.in_channels} input channels, got {c}")
    if h % cfg.multiple or w % cfg.multiple:
        raise ShapeError(f"H={h}, W={w} not divisible by 2**depth={cfg.multiple}")

    def block(x, prefix):
        for conv in ("conv1", "conv2"):
            p = f"{BACKBONE_PREFIX}{prefix}/{conv}"
            x = T.relu(T.conv2d(x, pv[f"{p}/weight"], pv[f"{p}/bias"]))
        return x

    skips = []
    for level in range(cfg.depth):
        x = block(x, f"enc{level}")
        skips.append(x)
        x = T.maxpool2(x)
    x = block(x, "mid")
    for level in reversed(range(cfg.depth)):
        x = T.concat_channels(skips[level], T.upsample2(x))
        x = block(x, f"dec{level}")
    return T.conv2d(x, pv[head_w], pv[head_name(task_id, "bias")])


def model_forward(params: ParamSet, task_id: str, images: np.ndarray) -> np.ndarray:
    """Logits ``[B, K_task, H, W]`` for ``images`` routed through ``task_id``'s head."""
    if task_id not in params.heads:
        raise RoutingError(f"no head for task {task_id!r}; known: {sorted(params.heads)}")
    g = T.Graph()
    pv = register(g, params, params.keys_for(task_id), requires_grad=False)
    images = np.asarray(images, dtype=params.dtype)
    return np.array(unet_logits(params.config, pv, task_id, images).value)


def count_parameters(params: ParamSet) -> int:
    return sum(a.size for a in params.values())


# -- checkpoints ---------------------------------------------------------------

def checkpoint_bytes(params: ParamSet, meta: Mapping | None = None) -> bytes:
    """Serialize: one JSON header line, then raw little-endian floats in name order."""
    dtype = np.dtype(params.dtype).newbyteorder("<")
    index = {}
    chunks = []
    offset = 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype=dtype)
        index[name] = {"offset": offset, "shape": list(arr.shape)}
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dtype": dtype.str,
        "unet": asdict(params.config) if params.config else None,
        "heads": params.heads,
        "order": list(params),
        "tensors": index,
        "meta": dict(meta or {}),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return head.encode("utf-8") + b"\n" + b"".join(chunks)


def checkpoint_from_bytes(blob: bytes) -> tuple[ParamSet, dict]:
    newline = blob.find(b"\n")
    if newline < 0:
        raise ContractError("checkpoint has no header terminator")
    header = json.loads(blob[:newline].decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint header {header.get('format')!r} v{header.get('version')}")
    payload = memoryview(blob)[newline + 1:]
    dtype = np.dtype(header["dtype"])
    tensors = {}
    for name in header["order"]:
        entry = header["tensors"][name]
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=entry["offset"])
        tensors[name] = arr.astype(dtype.newbyteorder("="), copy=True).reshape(entry["shape"])
    cfg = UNetConfig(**header["unet"]) if header["unet"] else None
    return ParamSet(cfg, tensors), header["meta"]


def save_checkpoint(path: str | Path, params: ParamSet, meta: Mapping | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(params, meta))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[ParamSet, dict]:
    return checkpoint_from_bytes(Path(path).read_bytes())
