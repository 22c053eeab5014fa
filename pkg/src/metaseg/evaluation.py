"""Dataset-aggregated mean IoU and task-level evaluation."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from .dataset import Sample, TaskSource
from .errors import EmptyEvaluationError, LabelRangeError, RoutingError, ShapeError
from .segnet import ParamSet, model_forward


class ConfusionAccumulator:
    """Running ``[truth, pred]`` pixel counts for ``num_classes`` classes.

    Per-class intersection is the diagonal; union is row sum plus column sum
    minus the diagonal. Accumulators over disjoint shards merge by addition.
    """

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise ValueError("num_classes must be positive")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def add(self, pred: np.ndarray, truth: np.ndarray) -> ConfusionAccumulator:
        pred, truth = np.asarray(pred), np.asarray(truth)
        if pred.shape != truth.shape:
            raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
        n = self.num_classes
        for label, arr in (("prediction", pred), ("truth", truth)):
            if arr.size and (arr.min() < 0 or arr.max() >= n):
                raise LabelRangeError(f"{label} holds class ids outside [0, {n})")
        flat = truth.astype(np.int64).ravel() * n + pred.astype(np.int64).ravel()
        self.counts += np.bincount(flat, minlength=n * n).reshape(n, n)
        return self

    def merge(self, other: ConfusionAccumulator) -> ConfusionAccumulator:
        if other.num_classes != self.num_classes:
            raise ShapeError("cannot merge accumulators with different class counts")
        out = ConfusionAccumulator(self.num_classes)
        out.counts = self.counts + other.counts
        return out

    @property
    def intersection(self) -> np.ndarray:
        return np.diag(self.counts).copy()

    @property
    def union(self) -> np.ndarray:
        return self.counts.sum(axis=0) + self.counts.sum(axis=1) - np.diag(self.counts)

    def iou(self) -> np.ndarray:
        """Per-class IoU, NaN where the union is empty."""
        union = self.union
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, self.intersection / np.maximum(union, 1), np.nan)


def accumulate(acc: ConfusionAccumulator, pred: np.ndarray, truth: np.ndarray) -> ConfusionAccumulator:
    return acc.add(pred, truth)


def miou(acc: ConfusionAccumulator) -> float:
    """Mean IoU over classes with a non-empty union."""
    union = acc.union
    present = union > 0
    if not present.any():
        raise EmptyEvaluationError("every class has an empty union; nothing was evaluated")
    return float(np.mean(acc.intersection[present] / union[present]))


def center_crop(sample: Sample, multiple: int) -> tuple[np.ndarray, np.ndarray]:
    """Largest centered crop whose sides are multiples of ``multiple``."""
    h, w = sample.mask.shape
    ch, cw = (h // multiple) * multiple, (w // multiple) * multiple
    if ch == 0 or cw == 0:
        raise ShapeError(f"sample {sample.name!r} ({h}x{w}) smaller than {multiple}x{multiple}")
    top, left = (h - ch) // 2, (w - cw) // 2
    return sample.image[:, top:top + ch, left:left + cw], sample.mask[top:top + ch, left:left + cw]


def predict(params: ParamSet, task_id: str, samples: Sequence[Sample], batch_size: int = 8) -> list[np.ndarray]:
    """Argmax class maps (ties to the lower id) for center-cropped samples."""
    multiple = params.config.multiple
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = [center_crop(s, multiple) for s in samples[start:start + batch_size]]
        shapes = {img.shape for img, _ in chunk}
        if len(shapes) == 1:
            logits = model_forward(params, task_id, np.stack([img for img, _ in chunk]))
            out.extend(logits.argmax(axis=1))
        else:
            for img, _ in chunk:
                out.append(model_forward(params, task_id, img[None])[0].argmax(axis=0))
    return out


def evaluate_task(params: ParamSet, task: TaskSource, indices: Sequence[int] | None = None,
                  batch_size: int = 8) -> float:
    """mIoU of ``params`` on the given sample indices of ``task`` (all samples by default)."""
    if task.id not in params.heads:
        raise RoutingError(f"no head for task {task.id!r}")
    indices = range(len(task)) if indices is None else indices
    samples = [task.samples[i] for i in indices]
    if not samples:
        raise EmptyEvaluationError(f"no samples to evaluate for task {task.id!r}")
    acc = ConfusionAccumulator(task.num_classes)
    multiple = params.config.multiple
    for pred, sample in zip(predict(params, task.id, samples, batch_size), samples):
        acc.add(pred, center_crop(sample, multiple)[1])
    return miou(acc)
