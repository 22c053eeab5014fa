"""Finite-difference gradient suite for the tensor ops and the mini U-Net (float64)."""

from __future__ import annotations

from collections.abc import Callable, Iterator
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .segnet import InitSpec, UNetConfig, build_model, unet_logits

THRESHOLD = 1e-5
EPS = 1e-6


@dataclass(frozen=True)
class CheckResult:
    name: str
    seed: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < THRESHOLD


def _project(out: T.Var, rng: np.random.Generator) -> T.Var:
    """Scalarize with a fixed random projection so every output entry matters."""
    return T.sum_all(T.mul(out, rng.standard_normal(out.shape)))


def _case(name: str, seed: int):
    rng = np.random.default_rng(seed)
    r = np.random.default_rng(seed + 10_000)
    if name == "conv2d_3x3":
        point = {"x": rng.standard_normal((2, 3, 5, 6)), "w": rng.standard_normal((4, 3, 3, 3)),
                 "b": rng.standard_normal(4)}
        proj = r.standard_normal((2, 4, 5, 6))
        return point, lambda g, v: T.sum_all(T.mul(T.conv2d(v["x"], v["w"], v["b"]), proj))
    if name == "conv2d_1x1":
        point = {"x": rng.standard_normal((2, 3, 4, 4)), "w": rng.standard_normal((5, 3, 1, 1)),
                 "b": rng.standard_normal(5)}
        proj = r.standard_normal((2, 5, 4, 4))
        return point, lambda g, v: T.sum_all(T.mul(T.conv2d(v["x"], v["w"], v["b"]), proj))
    if name == "relu":
        point = {"x": rng.standard_normal((2, 3, 4, 4))}
        proj = r.standard_normal((2, 3, 4, 4))
        return point, lambda g, v: T.sum_all(T.mul(T.relu(v["x"]), proj))
    if name == "maxpool2":
        point = {"x": rng.standard_normal((2, 3, 4, 6))}
        proj = r.standard_normal((2, 3, 2, 3))
        return point, lambda g, v: T.sum_all(T.mul(T.maxpool2(v["x"]), proj))
    if name == "upsample2":
        point = {"x": rng.standard_normal((2, 2, 3, 4))}
        proj = r.standard_normal((2, 2, 6, 8))
        return point, lambda g, v: T.sum_all(T.mul(T.upsample2(v["x"]), proj))
    if name == "concat_channels":
        point = {"a": rng.standard_normal((2, 2, 3, 3)), "b": rng.standard_normal((2, 3, 3, 3))}
        proj = r.standard_normal((2, 5, 3, 3))
        return point, lambda g, v: T.sum_all(T.mul(T.concat_channels(v["a"], v["b"]), proj))
    if name == "softmax_ce":
        point = {"z": 3 * rng.standard_normal((2, 4, 3, 3))}
        target = r.integers(0, 4, size=(2, 3, 3))
        return point, lambda g, v: T.softmax_ce(v["z"], target)
    if name == "elementwise":
        point = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((3, 4))}
        return point, lambda g, v: T.sum_all(T.scale(T.add(T.mul(v["a"], v["b"]), v["a"]), 0.5))
    if name == "unet_depth2":
        cfg = UNetConfig(depth=2, base_channels=4, in_channels=3)
        params = build_model(cfg, [("t", 3)], InitSpec(seed), dtype=np.float64)
        point = {k: np.array(v) for k, v in params.items()}
        # zero biases put dead units exactly on the relu kink; move off it
        for k in point:
            if k.endswith("/bias"):
                point[k] = rng.normal(0.0, 0.1, size=point[k].shape)
        images = r.uniform(0, 1, size=(1, 3, 8, 8))
        target = r.integers(0, 3, size=(1, 8, 8))
        return point, lambda g, v: T.softmax_ce(unet_logits(cfg, v, "t", images), target)
    raise KeyError(name)


OP_CASES = ("conv2d_3x3", "conv2d_1x1", "relu", "maxpool2", "upsample2", "concat_channels",
            "softmax_ce", "elementwise")
MODEL_CASE = "unet_depth2"


def run_suite(seeds: range = range(10), include_model: bool = True, max_coords: int | None = 16,
              report: Callable[[CheckResult], None] | None = None) -> list[CheckResult]:
    results = []
    names = OP_CASES + ((MODEL_CASE,) if include_model else ())
    for name in names:
        for seed in seeds:
            point, fn = _case(name, seed)
            res = CheckResult(name, seed, T.grad_check(fn, point, EPS, max_coords=max_coords if name == MODEL_CASE else None, seed=seed))
            results.append(res)
            if report is not None:
                report(res)
    return results


def iter_cases(seeds: range = range(10)) -> Iterator[tuple[str, int]]:
    for name in OP_CASES + (MODEL_CASE,):
        for seed in seeds:
            yield name, seed
