"""Experiment commands: synthetic data, training runs, the new-task matrix, overlays.

Every command is a plain function so the CLI, the tests and the matrix
runner share one code path. Output directories hold ``manifest.json`` (the
resolved run config), ``metrics.tsv`` (``iter``/``loss``; deterministic),
``timing.tsv`` (wall-clock ms per iteration), ``checkpoint.bin`` and, for
refine/eval, ``result.json``.
"""

from __future__ import annotations

import json
import logging
import time
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import tensor as T
from .dataset import (
    MetaDataset,
    build_meta_dataset,
    export_source,
    generate_synthetic_source,
    image_to_uint8,
    load_sources,
)
from .errors import ConfigError
from .evaluation import center_crop, evaluate_task, predict
from .manifest import RunManifest
from .metatrain import refine_on_new_task, train_maml, train_transfer
from .segnet import InitSpec, ParamSet, build_model, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

METHODS = ("maml", "transfer")
ALL_OTHERS = "all_others"

# Fixed class palette for overlays (RGB); class ids beyond its length wrap.
PALETTE = np.array([
    (0, 0, 0), (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60),
    (250, 190, 212), (0, 128, 128), (220, 190, 255), (170, 110, 40), (255, 250, 200),
    (128, 0, 0),
], dtype=np.uint8)


def synth_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def cmd_synth(seed: int, spec: Sequence[tuple[int, int]], out: str | Path, size: int = 64) -> list[Path]:
    """Write one synthetic source directory per ``(num_classes, n_samples)`` entry."""
    out = Path(out)
    paths = []
    for i, (k, n) in enumerate(spec):
        sid = f"synth{i}_k{k}"
        src = generate_synthetic_source(synth_seed(seed, i), k, n, size, size, source_id=sid)
        paths.append(export_source(src, out / sid))
    return paths


def parse_synth_spec(text: str) -> list[tuple[int, int]]:
    """``"2:20,3:20"`` -> ``[(2, 20), (3, 20)]``."""
    try:
        pairs = [tuple(int(v) for v in item.split(":")) for item in text.split(",") if item.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --spec {text!r}; expected K:n[,K:n...]") from exc
    if not pairs or any(len(p) != 2 or p[0] < 2 or p[1] < 2 for p in pairs):
        raise ConfigError(f"bad --spec {text!r}; need K>=2 and n>=2 per entry")
    return pairs


def load_meta(m: RunManifest) -> MetaDataset:
    return build_meta_dataset(load_sources(m.dataset_root), m.split_fractions, m.split_seed)


def _training_ids(m: RunManifest, meta: MetaDataset) -> list[str]:
    ids = list(m.train_sources) if m.train_sources is not None else [s for s in meta.ids if s != m.held_out]
    for sid in ids:
        if sid not in meta.ids:
            raise ConfigError(f"unknown training source {sid!r}; available: {meta.ids}")
    if not ids:
        raise ConfigError("no training sources")
    return ids


class _RunLog:
    """Append metrics and timing rows while a run progresses."""

    def __init__(self, out: Path, checkpoint_every: int, meta: dict):
        self.out = out
        self.every = checkpoint_every
        self.meta = meta
        self.metrics = open(out / "metrics.tsv", "w", encoding="utf-8", newline="\n")
        self.timing = open(out / "timing.tsv", "w", encoding="utf-8", newline="\n")
        self.metrics.write("iter\tloss\n")
        self.timing.write("iter\twall_ms\n")
        self.t0 = time.perf_counter()

    def __call__(self, it: int, params: ParamSet, metrics: dict) -> None:
        self.metrics.write(f"{it}\t{metrics['loss']!r}\n")
        self.timing.write(f"{it}\t{(time.perf_counter() - self.t0) * 1000:.1f}\n")
        if self.every and it % self.every == 0:
            self.metrics.flush()
            save_checkpoint(self.out / "checkpoint.bin", params, dict(self.meta, iter=it))

    def close(self):
        self.metrics.close()
        self.timing.close()


def _checkpoint_meta(m: RunManifest) -> dict:
    return {
        "dataset_root": m.dataset_root,
        "manifest_digest": m.digest(),
        "mode": m.mode,
        "split_fractions": list(m.split_fractions),
        "split_seed": m.split_seed,
    }


def cmd_train(m: RunManifest) -> dict:
    """Run the manifest's mode and write its artifacts to ``m.output_dir``.

    ``maml``/``transfer`` pretrain on the training sources; ``refine``
    attaches a head for ``held_out`` to ``init_checkpoint`` (or to a
    randomly initialized backbone when no checkpoint is given) and
    fine-tunes; ``eval`` scores ``init_checkpoint`` on the held-out test split.
    """
    dtype = T.resolve_dtype(m.precision)
    meta = load_meta(m)
    if m.held_out is not None and m.held_out not in meta.ids:
        raise ConfigError(f"unknown held-out source {m.held_out!r}; available: {meta.ids}")
    out = Path(m.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = m.replace(precision=T.precision_name(dtype))
    resolved.save(out / "manifest.json")
    ck_meta = _checkpoint_meta(m)

    if m.mode == "eval":
        params, _ = load_checkpoint(m.init_checkpoint)
        task = meta.source(m.held_out)
        score = evaluate_task(params, task, meta.indices(task.id, "test"))
        result = {"task": task.id, "miou": score}
        _write_json(out / "result.json", result)
        return result

    runlog = _RunLog(out, m.checkpoint_every, ck_meta)
    try:
        if m.mode in ("maml", "transfer"):
            ids = _training_ids(m, meta)
            sub = meta.subset(ids)
            params = build_model(m.unet, [(s, meta.source(s).num_classes) for s in ids],
                                 InitSpec(m.init_seed), dtype)
            if m.mode == "maml":
                params, _, losses = train_maml(params, sub, m.sampler, m.maml, m.augment, seed=m.seed,
                                               workers=m.workers, on_step=runlog)
            else:
                params, _, losses = train_transfer(params, sub, m.sampler, m.transfer, m.augment,
                                                   seed=m.seed, on_step=runlog)
            result = {"iters": len(losses), "train_sources": ids,
                      "final_loss": losses[-1] if losses else None}
        else:
            if m.init_checkpoint:
                pretrained, _ = load_checkpoint(m.init_checkpoint)
            else:
                pretrained = build_model(m.unet, [], InitSpec(m.init_seed), dtype)
            task = meta.source(m.held_out)
            params, score = refine_on_new_task(
                pretrained, task, meta.indices(task.id, "train"), meta.indices(task.id, "test"),
                m.refine, m.augment, seed=m.seed, on_step=runlog)
            result = {"task": task.id, "miou": score, "init_checkpoint": m.init_checkpoint}
    finally:
        runlog.close()
    save_checkpoint(out / "checkpoint.bin", params, ck_meta)
    _write_json(out / "result.json", result)
    return result


def cmd_eval(checkpoint: str | Path, dataset: str | Path, task_id: str, split: str = "test") -> float:
    params, meta_info = load_checkpoint(checkpoint)
    fractions = meta_info.get("split_fractions", [0.5, 0.5])
    seed = meta_info.get("split_seed", 0)
    meta = build_meta_dataset(load_sources(dataset), fractions, seed)
    task = meta.source(task_id)
    idx = meta.indices(task_id, split) if split != "all" else None
    return evaluate_task(params, task, idx)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- matrix --------------------------------------------------------------------

@dataclass
class ResultGrid:
    """New tasks (rows) x pretraining sets (columns) x methods; ``None`` marks NA."""

    rows: list[str]
    columns: list[str]
    methods: tuple[str, ...] = METHODS
    cells: dict[tuple[str, str, str], float | None] = field(default_factory=dict)

    def get(self, row: str, column: str, method: str) -> float | None:
        return self.cells.get((row, column, method))

    def to_tsv(self) -> str:
        header = ["new_task"] + [f"{c}:{m}" for c in self.columns for m in self.methods]
        lines = ["\t".join(header)]
        for r in self.rows:
            vals = [r]
            for c in self.columns:
                for m in self.methods:
                    v = self.cells.get((r, c, m))
                    vals.append("NA" if v is None else repr(v))
            lines.append("\t".join(vals))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        """Aligned table; ``*`` marks the better method within each column pair."""
        head1 = ["new task \\ training"] + [c for c in self.columns for _ in self.methods]
        head2 = [""] + [m for _ in self.columns for m in self.methods]
        body = []
        for r in self.rows:
            row = [r]
            for c in self.columns:
                vals = [self.cells.get((r, c, m)) for m in self.methods]
                best = max((v for v in vals if v is not None), default=None)
                for v in vals:
                    if v is None:
                        row.append("NA")
                    else:
                        row.append(f"{v:.3f}" + ("*" if v == best and vals.count(best) == 1 else ""))
            body.append(row)
        table = [head1, head2] + body
        widths = [max(len(line[i]) for line in table) for i in range(len(head1))]
        return "\n".join(
            "  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip() for line in table
        ) + "\n"

    @classmethod
    def from_tsv(cls, text: str) -> ResultGrid:
        lines = [l.split("\t") for l in text.strip().splitlines()]
        keys = [tuple(h.rsplit(":", 1)) for h in lines[0][1:]]
        columns = list(dict.fromkeys(c for c, _ in keys))
        methods = tuple(dict.fromkeys(m for _, m in keys))
        grid = cls([l[0] for l in lines[1:]], columns, methods)
        for line in lines[1:]:
            for (c, m), v in zip(keys, line[1:]):
                grid.cells[(line[0], c, m)] = None if v == "NA" else float(v)
        return grid


def load_protocol(path: str | Path) -> RunManifest:
    """A matrix protocol file is a RunManifest template; mode, sources and paths are filled per cell."""
    return RunManifest.load(path)


def pretrain_manifest(template: RunManifest, dataset: str, method: str, sources: Sequence[str],
                      out_dir: str | Path) -> RunManifest:
    return template.replace(mode=method, dataset_root=str(dataset), train_sources=tuple(sources),
                            held_out=None, init_checkpoint=None, output_dir=str(out_dir))


def refine_manifest(template: RunManifest, dataset: str, held_out: str, checkpoint: str | Path | None,
                    out_dir: str | Path) -> RunManifest:
    return template.replace(mode="refine", dataset_root=str(dataset), train_sources=None,
                            held_out=held_out, init_checkpoint=None if checkpoint is None else str(checkpoint),
                            output_dir=str(out_dir))


def _done(out: Path) -> bool:
    return (out / "result.json").is_file() and (out / "checkpoint.bin").is_file()


def cmd_matrix(dataset: str | Path, template: RunManifest, out: str | Path,
               methods: Sequence[str] = METHODS) -> ResultGrid:
    """Hold out each source in turn, pretrain on every other single source and on all
    others with each method, refine on the held-out source and record its test mIoU.

    Finished pretraining runs and cells are detected on disk and skipped, so an
    interrupted matrix resumes where it stopped.
    """
    dataset, out = str(dataset), Path(out)
    ids = [s.id for s in load_sources(dataset)]
    if len(ids) < 3:
        raise ConfigError(f"matrix needs at least 3 sources, found {len(ids)}")
    grid = ResultGrid(list(ids), [ALL_OTHERS] + list(ids), tuple(methods))

    for row in ids:
        others = [s for s in ids if s != row]
        for column in grid.columns:
            if column == row:
                for method in methods:
                    grid.cells[(row, column, method)] = None
                continue
            sources = others if column == ALL_OTHERS else [column]
            for method in methods:
                pre_dir = out / "pretrain" / f"{method}__{'+'.join(sources)}"
                if not _done(pre_dir):
                    log.info("pretrain %s on %s", method, sources)
                    cmd_train(pretrain_manifest(template, dataset, method, sources, pre_dir))
                cell_dir = out / "cells" / row / column / method
                if not _done(cell_dir):
                    log.info("refine %s <- %s (%s)", row, column, method)
                    cmd_train(refine_manifest(template, dataset, row, pre_dir / "checkpoint.bin", cell_dir))
                result = json.loads((cell_dir / "result.json").read_text(encoding="utf-8"))
                grid.cells[(row, column, method)] = result["miou"]
    out.mkdir(parents=True, exist_ok=True)
    (out / "grid.tsv").write_text(grid.to_tsv(), encoding="utf-8")
    (out / "grid.txt").write_text(grid.to_text(), encoding="utf-8")
    return grid


# -- overlay -------------------------------------------------------------------

def colorize(mask: np.ndarray) -> np.ndarray:
    return PALETTE[np.asarray(mask) % len(PALETTE)]


def decode_colors(rgb: np.ndarray) -> np.ndarray:
    """Inverse of :func:`colorize` for class ids below the palette length."""
    flat = rgb.reshape(-1, 3)
    match = (flat[:, None, :] == PALETTE[None, :, :]).all(axis=2)
    if not match.any(axis=1).all():
        raise ValueError("colors outside the palette")
    return match.argmax(axis=1).reshape(rgb.shape[:2])


def cmd_overlay(checkpoint: str | Path, task_id: str, index: int, out: str | Path,
                dataset: str | Path | None = None) -> Path:
    """Write a strip PNG: input image | ground truth | prediction."""
    params, meta_info = load_checkpoint(checkpoint)
    dataset = dataset or meta_info.get("dataset_root")
    if not dataset:
        raise ConfigError("checkpoint does not record a dataset root; pass --dataset")
    sources = {s.id: s for s in load_sources(dataset)}
    if task_id not in sources:
        raise ConfigError(f"unknown task {task_id!r}; available: {sorted(sources)}")
    task = sources[task_id]
    if not 0 <= index < len(task):
        raise ConfigError(f"index {index} out of range for {len(task)} samples")
    sample = task.samples[index]
    image, truth = center_crop(sample, params.config.multiple)
    pred = predict(params, task_id, [sample])[0]
    strip = np.concatenate([image_to_uint8(image), colorize(truth), colorize(pred)], axis=1)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(strip, mode="RGB").save(out)
    return out
