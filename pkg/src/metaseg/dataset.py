"""Unified sample format, source ingestion/export and preprocessing helpers.

A task source on disk is a directory::

    <source>/manifest.json
    <source>/images/*.png   8-bit RGB
    <source>/masks/*.png    8-bit gray, pixel value = class id

``manifest.json`` holds ``name``, ``num_classes``, ``class_names`` and
``samples: [{image, mask}]``. Sources annotated with nuclei centroids
instead of masks list ``centroids: [{image, points: [{x, y, class}], radius}]``;
their masks are rasterized at load time.
"""

from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, IngestError, LabelRangeError, ShapeError

MANIFEST = "manifest.json"
SPLIT_NAMES = ("train", "test", "val")


@dataclass(frozen=True, eq=False)
class Sample:
    image: np.ndarray  # [C, H, W] float32 in [0, 1]
    mask: np.ndarray  # [H, W] int64 class ids
    source_id: str
    name: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.mask.ndim != 2:
            raise ShapeError(f"sample {self.name!r}: image must be [C,H,W] and mask [H,W]")
        if self.image.shape[1:] != self.mask.shape:
            raise ShapeError(
                f"sample {self.name!r}: image H,W {self.image.shape[1:]} != mask {self.mask.shape}"
            )


@dataclass(frozen=True, eq=False)
class TaskSource:
    id: str
    name: str
    num_classes: int
    class_names: tuple[str, ...]
    samples: tuple[Sample, ...]

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"source {self.id!r}: num_classes must be >= 2")
        if len(self.class_names) != self.num_classes:
            raise ConfigError(
                f"source {self.id!r}: {len(self.class_names)} class names for {self.num_classes} classes"
            )
        if not self.samples:
            raise ConfigError(f"source {self.id!r} has no samples")
        for s in self.samples:
            if s.source_id != self.id:
                raise ConfigError(f"sample {s.name!r} carries source id {s.source_id!r}, not {self.id!r}")
            _check_labels(s.mask, self.num_classes, s.name)

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True, eq=False)
class MetaDataset:
    sources: tuple[TaskSource, ...]
    splits: dict[str, dict[str, tuple[int, ...]]] = field(default_factory=dict)

    def __post_init__(self):
        ids = [s.id for s in self.sources]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate source ids: {ids}")
        for sid, parts in self.splits.items():
            if sid not in ids:
                raise ConfigError(f"split given for unknown source {sid!r}")
            seen: set[int] = set()
            n = len(self.source(sid))
            for name, idx in parts.items():
                if seen & set(idx):
                    raise ConfigError(f"source {sid!r}: split {name!r} overlaps another split")
                if any(i < 0 or i >= n for i in idx):
                    raise ConfigError(f"source {sid!r}: split {name!r} index out of range")
                seen |= set(idx)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.sources]

    def source(self, source_id: str) -> TaskSource:
        for s in self.sources:
            if s.id == source_id:
                return s
        raise ConfigError(f"unknown source {source_id!r}")

    def indices(self, source_id: str, split: str = "train") -> tuple[int, ...]:
        """Sample indices of a split; a source without split info is all-train."""
        src = self.source(source_id)
        if source_id not in self.splits:
            return tuple(range(len(src))) if split == "train" else ()
        return tuple(self.splits[source_id].get(split, ()))

    def split_samples(self, source_id: str, split: str = "train") -> list[Sample]:
        src = self.source(source_id)
        return [src.samples[i] for i in self.indices(source_id, split)]

    def subset(self, source_ids: Sequence[str]) -> MetaDataset:
        return MetaDataset(
            tuple(self.source(s) for s in source_ids),
            {s: self.splits[s] for s in source_ids if s in self.splits},
        )


def _check_labels(mask: np.ndarray, num_classes: int, name: str) -> None:
    bad = (mask < 0) | (mask >= num_classes)
    if bad.any():
        raise LabelRangeError(
            f"sample {name!r}: {int(bad.sum())} pixels with class id outside [0, {num_classes}) "
            f"(max {int(mask.max())})"
        )


def image_to_float(rgb: np.ndarray) -> np.ndarray:
    """[H, W, 3] uint8 -> [3, H, W] float32 in [0, 1]."""
    return (rgb.astype(np.float32) / np.float32(255.0)).transpose(2, 0, 1).copy()


def image_to_uint8(image: np.ndarray) -> np.ndarray:
    """[C, H, W] float in [0, 1] -> [H, W, C] uint8."""
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def _read_png(path: Path, mode: str) -> np.ndarray:
    if not path.is_file():
        raise IngestError(f"missing file: {path}")
    with Image.open(path) as im:
        if mode == "RGB" and im.mode != "RGB":
            raise IngestError(f"{path}: expected 8-bit RGB, got mode {im.mode}")
        if mode == "L" and im.mode not in ("L", "P"):
            raise IngestError(f"{path}: expected 8-bit gray mask, got mode {im.mode}")
        return np.asarray(im)


def ingest_source(directory: str | Path) -> TaskSource:
    """Read a source directory into a validated TaskSource (manifest order preserved)."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST
    if not manifest_path.is_file():
        raise IngestError(f"missing file: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise IngestError(f"{manifest_path}: invalid JSON ({exc})") from exc
    try:
        k = int(manifest["num_classes"])
        class_names = tuple(manifest.get("class_names") or [f"class{i}" for i in range(k)])
        name = manifest.get("name", directory.name)
        source_id = manifest.get("id", directory.name)
        entries = manifest.get("samples", [])
        centroid_entries = manifest.get("centroids", [])
        background = int(manifest.get("background_class", 0))
    except (KeyError, TypeError, ValueError) as exc:
        raise IngestError(f"{manifest_path}: malformed manifest ({exc})") from exc

    samples = []
    for entry in entries:
        image = _read_png(directory / entry["image"], "RGB")
        mask = _read_png(directory / entry["mask"], "L").astype(np.int64)
        if image.shape[:2] != mask.shape:
            raise IngestError(f"{entry['image']}: image {image.shape[:2]} and mask {mask.shape} differ")
        sample_name = Path(entry["image"]).stem
        _check_labels(mask, k, sample_name)
        samples.append(Sample(image_to_float(image), mask, source_id, sample_name))
    for entry in centroid_entries:
        image = _read_png(directory / entry["image"], "RGB")
        points = [(p["x"], p["y"], p["class"]) for p in entry["points"]]
        mask = rasterize_centroids(points, entry["radius"], image.shape[0], image.shape[1],
                                   background, num_classes=k)
        samples.append(Sample(image_to_float(image), mask, source_id, Path(entry["image"]).stem))
    if not samples:
        raise IngestError(f"{manifest_path}: no samples listed")
    return TaskSource(source_id, name, k, class_names, tuple(samples))


def export_source(source: TaskSource, directory: str | Path) -> Path:
    """Write ``source`` in the on-disk layout read by :func:`ingest_source`."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    if source.num_classes > 256:
        raise ConfigError("8-bit masks hold at most 256 classes")
    entries = []
    for i, s in enumerate(source.samples):
        stem = s.name or f"{i:04d}"
        image_rel, mask_rel = f"images/{stem}.png", f"masks/{stem}.png"
        if s.image.shape[0] != 3:
            raise ShapeError("only 3-channel images can be exported as RGB PNG")
        Image.fromarray(image_to_uint8(s.image), mode="RGB").save(directory / image_rel, optimize=False)
        Image.fromarray(s.mask.astype(np.uint8), mode="L").save(directory / mask_rel, optimize=False)
        entries.append({"image": image_rel, "mask": mask_rel})
    manifest = {
        "id": source.id,
        "name": source.name,
        "num_classes": source.num_classes,
        "class_names": list(source.class_names),
        "samples": entries,
    }
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return directory


def load_sources(root: str | Path) -> list[TaskSource]:
    """Ingest every immediate subdirectory of ``root`` holding a manifest, sorted by name."""
    root = Path(root)
    if not root.is_dir():
        raise IngestError(f"dataset root not found: {root}")
    dirs = sorted(p for p in root.iterdir() if (p / MANIFEST).is_file())
    if not dirs:
        raise IngestError(f"no source directories with {MANIFEST} under {root}")
    return [ingest_source(d) for d in dirs]


def rasterize_centroids(centroids: Sequence[tuple[float, float, int]], radius: float, height: int,
                        width: int, background_class: int = 0, num_classes: int | None = None) -> np.ndarray:
    """Paint a disk of ``radius`` around each ``(x, y, class)`` centroid.

    A pixel covered by several disks takes the class of the nearest centroid,
    and of the earlier one in the list on an exact tie.
    """
    if radius < 1:
        raise ConfigError(f"radius must be >= 1, got {radius}")
    if num_classes is not None:
        classes = [c for _, _, c in centroids] + [background_class]
        bad = [c for c in classes if not 0 <= c < num_classes]
        if bad:
            raise LabelRangeError(f"centroid classes {sorted(set(bad))} outside [0, {num_classes})")
    mask = np.full((height, width), background_class, dtype=np.int64)
    best = np.full((height, width), np.inf)
    r2 = float(radius) ** 2
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    for x, y, cls in centroids:
        d2 = (rows - y) ** 2 + (cols - x) ** 2
        hit = (d2 <= r2) & (d2 < best)
        best[hit] = d2[hit]
        mask[hit] = cls
    return mask


def fuse_annotations(masks: Sequence[np.ndarray], num_classes: int) -> np.ndarray:
    """Per-pixel majority vote over annotators; ties go to the lowest class id."""
    if not masks:
        raise ConfigError("need at least one annotation")
    shape = np.shape(masks[0])
    for m in masks:
        if np.shape(m) != shape:
            raise ShapeError(f"annotation shapes differ: {shape} vs {np.shape(m)}")
    stack = np.stack([np.asarray(m) for m in masks])
    _check_labels(stack, num_classes, "annotation stack")
    votes = np.zeros((num_classes,) + shape, dtype=np.int64)
    for c in range(num_classes):
        votes[c] = (stack == c).sum(axis=0)
    return votes.argmax(axis=0)


def _class_colors(rng: np.random.Generator, k: int, min_dist: float = 0.3) -> np.ndarray:
    colors = np.empty((k, 3))
    for c in range(k):
        for _ in range(1000):
            cand = rng.uniform(0.05, 0.95, size=3)
            if c == 0 or np.min(np.linalg.norm(colors[:c] - cand, axis=1)) >= min_dist:
                break
        colors[c] = cand
    return colors


def generate_synthetic_source(seed: int, num_classes: int, n_samples: int, height: int, width: int,
                              source_id: str | None = None, name: str | None = None,
                              noise: float = 0.05) -> TaskSource:
    """Voronoi-blob segmentation task, fully determined by ``seed``.

    Every sample partitions the image among ``num_classes`` random sites,
    each labeled with a distinct class, so every class shows up in every
    sample. Pixels are the class base color plus Gaussian noise, clamped and
    quantized to 8 bits so the source survives a PNG round trip unchanged.
    """
    k = num_classes
    if k < 2:
        raise ConfigError("num_classes must be >= 2")
    if n_samples < 2:
        raise ConfigError("n_samples must be >= 2")
    if height * width < k:
        raise ConfigError("image too small to hold one site per class")
    source_id = source_id or f"synth_s{seed}_k{k}"
    rng = np.random.default_rng(seed)
    colors = _class_colors(rng, k)
    rows, cols = np.mgrid[0:height, 0:width]
    samples = []
    for i in range(n_samples):
        flat_sites = rng.choice(height * width, size=k, replace=False)
        sr, sc = np.divmod(flat_sites, width)
        labels = rng.permutation(k)
        d2 = (rows[None] - sr[:, None, None]) ** 2 + (cols[None] - sc[:, None, None]) ** 2
        mask = labels[d2.argmin(axis=0)].astype(np.int64)
        image = colors[mask].transpose(2, 0, 1) + rng.normal(0.0, noise, size=(3, height, width))
        image = image_to_float(image_to_uint8(np.clip(image, 0.0, 1.0)))
        samples.append(Sample(image, mask, source_id, f"{i:04d}"))
    return TaskSource(source_id, name or source_id, k, tuple(f"class{c}" for c in range(k)), tuple(samples))


def split_source(source: TaskSource | int, fractions: Sequence[float], seed: int) -> tuple[tuple[int, ...], ...]:
    """Shuffle sample indices with ``seed`` and cut them into consecutive parts."""
    n = source if isinstance(source, int) else len(source)
    fractions = [float(f) for f in fractions]
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be nonnegative and sum to 1, got {fractions}")
    perm = np.random.default_rng(seed).permutation(n)
    bounds = [0] + [int(round(c * n)) for c in np.cumsum(fractions)]
    bounds[-1] = n
    parts = []
    for f, lo, hi in zip(fractions, bounds[:-1], bounds[1:]):
        if f > 0 and hi <= lo:
            raise ConfigError(f"split fraction {f} leaves an empty split for {n} samples")
        parts.append(tuple(sorted(int(i) for i in perm[lo:hi])))
    return tuple(parts)


def build_meta_dataset(sources: Sequence[TaskSource], fractions: Sequence[float] = (0.5, 0.5),
                       seed: int = 0, names: Sequence[str] = SPLIT_NAMES) -> MetaDataset:
    """Split every source with the same fractions; split i of ``fractions`` gets ``names[i]``."""
    if len(fractions) > len(names):
        raise ConfigError(f"at most {len(names)} splits supported")
    splits = {}
    for src in sources:
        parts = split_source(src, fractions, seed)
        splits[src.id] = dict(zip(names, parts))
    return MetaDataset(tuple(sources), splits)
