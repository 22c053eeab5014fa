"""First-order MAML, instance-based transfer learning and new-task refinement.

Trainers are model-agnostic: they only need an *objective*,
``objective(params, task_id, samples, wrt=None) -> (loss, grads)``, that
returns the mean loss of ``samples`` under ``params`` routed through
``task_id`` and its gradient keyed by parameter name. The default objective
is the U-Net pixelwise cross-entropy; tests plug in closed-form toys.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .augment import AugmentConfig, augment
from .dataset import MetaDataset, Sample, TaskSource
from .errors import ConfigError, RoutingError, ShapeError
from .evaluation import evaluate_task
from .sampler import Episode, EpisodeBatch, SamplerConfig, TaskDistribution, batch_loader, episode_loader
from .segnet import InitSpec, ParamSet, attach_head, register, unet_logits

log = logging.getLogger(__name__)

Objective = Callable[..., "tuple[float, T.GradMap]"]
StepCallback = Callable[[int, ParamSet, dict], None]


@dataclass(frozen=True)
class MamlConfig:
    inner_lr: float = 0.01
    inner_steps: int = 1
    outer_lr: float = 1e-4
    max_iters: int = 500
    order: str = "first"

    def __post_init__(self):
        if self.inner_lr < 0 or self.outer_lr < 0:
            raise ConfigError("learning rates must be nonnegative")
        if self.inner_steps < 1:
            raise ConfigError("inner_steps must be >= 1")
        if self.order != "first":
            raise ConfigError(f"only first-order MAML is implemented, got order={self.order!r}")
        if self.max_iters < 0:
            raise ConfigError("max_iters must be >= 0")


@dataclass(frozen=True)
class TransferConfig:
    lr: float = 1e-4
    max_iters: int = 500

    def __post_init__(self):
        if self.lr < 0 or self.max_iters < 0:
            raise ConfigError("lr and max_iters must be nonnegative")


@dataclass(frozen=True)
class RefineConfig:
    lr: float = 1e-4
    iters: int = 100
    which_params: str = "all"
    batch_size: int = 8
    head_seed: int = 0

    def __post_init__(self):
        if self.which_params not in ("all", "head"):
            raise ConfigError(f"which_params must be 'all' or 'head', got {self.which_params!r}")
        if self.iters < 0 or self.batch_size < 1 or self.lr < 0:
            raise ConfigError("refine iters/lr must be nonnegative and batch_size positive")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: ParamSet, grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float) -> tuple[ParamSet, AdamState]:
    """Bias-corrected Adam on the parameters present in ``grads``.

    The step counter is global; parameters absent from ``grads`` keep their
    values and their moments.
    """
    t = state.step + 1
    m, v = dict(state.m), dict(state.v)
    updates = {}
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        dt = p.dtype.type
        b1, b2 = dt(state.beta1), dt(state.beta2)
        m_new = b1 * m.get(name, np.zeros_like(p)) + (dt(1) - b1) * g
        v_new = b2 * v.get(name, np.zeros_like(p)) + (dt(1) - b2) * (g * g)
        m_hat = m_new / dt(1 - state.beta1 ** t)
        v_hat = v_new / dt(1 - state.beta2 ** t)
        updates[name] = (p - dt(lr) * m_hat / (np.sqrt(v_hat) + dt(state.eps))).astype(p.dtype)
        m[name], v[name] = m_new, v_new
    return params.replace(updates), AdamState(m, v, t, state.beta1, state.beta2, state.eps)


# -- objectives ----------------------------------------------------------------

def _stack(params: ParamSet, samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    shapes = {s.mask.shape for s in samples}
    if len(shapes) != 1:
        raise ShapeError(f"samples in one loss evaluation must share H,W, got {sorted(shapes)}")
    images = np.stack([s.image for s in samples]).astype(params.dtype, copy=False)
    return images, np.stack([s.mask for s in samples])


def build_loss(graph: T.Graph, pv: Mapping[str, T.Var], params: ParamSet, task_id: str,
               samples: Sequence[Sample]) -> T.Var:
    for s in samples:
        if s.source_id != task_id:
            raise RoutingError(f"sample {s.name!r} from {s.source_id!r} routed to task {task_id!r}")
    images, masks = _stack(params, samples)
    return T.softmax_ce(unet_logits(params.config, pv, task_id, images), masks)


def segmentation_objective(params: ParamSet, task_id: str, samples: Sequence[Sample],
                           wrt: Sequence[str] | None = None) -> tuple[float, T.GradMap]:
    """Mean pixel cross-entropy and its gradient over backbone + ``task_id`` head."""
    if not samples:
        raise ConfigError("loss over an empty sample set")
    names = params.keys_for(task_id)
    wanted = set(names if wrt is None else wrt)
    g = T.Graph()
    pv = {n: g.param(n, params[n], requires_grad=n in wanted) for n in names}
    loss = build_loss(g, pv, params, task_id, samples)
    return float(loss.value), T.backward(g, loss, [n for n in names if n in wanted])


def loss_on(params: ParamSet, task_id: str, samples: Sequence[Sample]) -> float:
    """Mean pixelwise cross-entropy of ``samples`` (forward only)."""
    if task_id not in params.heads:
        raise RoutingError(f"no head for task {task_id!r}")
    g = T.Graph()
    pv = register(g, params, params.keys_for(task_id), requires_grad=False)
    return float(build_loss(g, pv, params, task_id, samples).value)


# -- MAML ----------------------------------------------------------------------

def inner_adapt(params: ParamSet, episode: Episode, cfg: MamlConfig,
                objective: Objective = segmentation_objective) -> ParamSet:
    """``inner_steps`` plain gradient steps on the support set; ``params`` is left untouched."""
    if not episode.support:
        raise ConfigError("episode has an empty support set")
    adapted = params
    for _ in range(cfg.inner_steps):
        _, grads = objective(adapted, episode.task_id, episode.support)
        adapted = adapted.replace({
            n: (adapted[n] - adapted[n].dtype.type(cfg.inner_lr) * g).astype(adapted[n].dtype)
            for n, g in grads.items()
        })
    return adapted


def _episode_gradient(params: ParamSet, episode: Episode, cfg: MamlConfig,
                      objective: Objective) -> tuple[float, T.GradMap]:
    adapted = inner_adapt(params, episode, cfg, objective)
    return objective(adapted, episode.task_id, episode.query)


def mean_gradients(params: ParamSet, grad_list: Sequence[Mapping[str, np.ndarray]],
                   weights: Sequence[float] | None = None) -> T.GradMap:
    """Weighted sum of gradient maps in list order; absent keys contribute zero.

    Without ``weights`` this is the plain mean over the list.
    """
    n = len(grad_list)
    total: dict[str, np.ndarray] = {}
    for i, grads in enumerate(grad_list):
        for name, g in grads.items():
            term = g if weights is None else g * g.dtype.type(weights[i])
            total[name] = term if name not in total else total[name] + term
    ordered = {}
    for name in params:
        if name in total:
            ordered[name] = total[name] / total[name].dtype.type(n) if weights is None else total[name]
    return ordered


def maml_outer_step(params: ParamSet, adam: AdamState, batch: EpisodeBatch, cfg: MamlConfig,
                    objective: Objective = segmentation_objective,
                    executor: Executor | None = None) -> tuple[ParamSet, AdamState, dict]:
    """One first-order MAML update.

    Each episode adapts on its support set; the query-loss gradient taken at
    the adapted weights is applied to the base weights. Episode gradients are
    averaged in episode order, so the result does not depend on how many
    workers computed them.
    """
    if len(batch) == 0:
        raise ConfigError("empty episode batch")

    def work(ep):
        return _episode_gradient(params, ep, cfg, objective)

    if executor is None:
        results = [work(ep) for ep in batch.episodes]
    else:
        results = list(executor.map(work, batch.episodes))
    grads = mean_gradients(params, [g for _, g in results])
    new_params, new_adam = adam_step(params, grads, adam, cfg.outer_lr)
    loss = float(np.mean([l for l, _ in results]))
    return new_params, new_adam, {"loss": loss}


# -- transfer learning ---------------------------------------------------------

def group_by_source(samples: Iterable[Sample]) -> dict[str, list[Sample]]:
    groups: dict[str, list[Sample]] = {}
    for s in samples:
        groups.setdefault(s.source_id, []).append(s)
    return groups


def mixed_objective(params: ParamSet, samples: Sequence[Sample],
                    objective: Objective = segmentation_objective) -> tuple[float, T.GradMap]:
    """Mean per-instance loss over a mixed batch, each instance through its own head."""
    groups = group_by_source(samples)
    for sid in groups:
        if params.heads and sid not in params.heads:
            raise RoutingError(f"no head for source {sid!r} in a mixed batch")
    n = len(samples)
    results = [objective(params, sid, group) for sid, group in groups.items()]
    weights = [len(group) / n for group in groups.values()]
    loss = float(sum(w * l for w, (l, _) in zip(weights, results)))
    return loss, mean_gradients(params, [g for _, g in results], weights)


def transfer_train_step(params: ParamSet, adam: AdamState, samples: Sequence[Sample],
                        cfg: TransferConfig,
                        objective: Objective = segmentation_objective) -> tuple[ParamSet, AdamState, dict]:
    if not samples:
        raise ConfigError("empty instance batch")
    loss, grads = mixed_objective(params, samples, objective)
    new_params, new_adam = adam_step(params, grads, adam, cfg.lr)
    return new_params, new_adam, {"loss": loss}


# -- training loops ------------------------------------------------------------

def _augment_all(samples: Sequence[Sample], cfg: AugmentConfig | None, seed: int, it: int) -> list[Sample]:
    if cfg is None:
        return list(samples)
    rng = np.random.default_rng([seed, it])
    return [augment(s, cfg, rng) for s in samples]


def _augment_batch(batch: EpisodeBatch, cfg: AugmentConfig | None, seed: int, it: int) -> EpisodeBatch:
    if cfg is None:
        return batch
    rng = np.random.default_rng([seed, it])
    episodes = []
    for ep in batch.episodes:
        support = tuple(augment(s, cfg, rng) for s in ep.support)
        query = tuple(augment(s, cfg, rng) for s in ep.query)
        episodes.append(Episode(ep.task_id, support, query, ep.indices))
    return EpisodeBatch(tuple(episodes))


def train_maml(params: ParamSet, meta: MetaDataset, sampler_cfg: SamplerConfig, cfg: MamlConfig,
               augment_cfg: AugmentConfig | None = None, dist: TaskDistribution | None = None,
               seed: int = 0, workers: int = 1, on_step: StepCallback | None = None,
               objective: Objective = segmentation_objective) -> tuple[ParamSet, AdamState, list[float]]:
    """Run ``cfg.max_iters`` FOMAML steps; returns final params, optimizer state and losses."""
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    loader = episode_loader(meta, dist, sampler_cfg)
    adam = AdamState()
    losses = []
    executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for it in range(1, cfg.max_iters + 1):
            batch = _augment_batch(next(loader), augment_cfg, seed, it)
            params, adam, metrics = maml_outer_step(params, adam, batch, cfg, objective, executor)
            losses.append(metrics["loss"])
            if on_step is not None:
                on_step(it, params, metrics)
    finally:
        if executor is not None:
            executor.shutdown()
    return params, adam, losses


def train_transfer(params: ParamSet, meta: MetaDataset, sampler_cfg: SamplerConfig, cfg: TransferConfig,
                   augment_cfg: AugmentConfig | None = None, seed: int = 0,
                   on_step: StepCallback | None = None,
                   objective: Objective = segmentation_objective) -> tuple[ParamSet, AdamState, list[float]]:
    """Run ``cfg.max_iters`` steps on truncation-balanced mixed batches."""
    loader = batch_loader(meta, sampler_cfg)
    adam = AdamState()
    losses = []
    for it in range(1, cfg.max_iters + 1):
        samples = _augment_all(next(loader).samples, augment_cfg, seed, it)
        params, adam, metrics = transfer_train_step(params, adam, samples, cfg, objective)
        losses.append(metrics["loss"])
        if on_step is not None:
            on_step(it, params, metrics)
    return params, adam, losses


def refine_on_new_task(pretrained: ParamSet, task: TaskSource, train_idx: Sequence[int],
                       test_idx: Sequence[int], cfg: RefineConfig,
                       augment_cfg: AugmentConfig | None = None, seed: int = 0,
                       on_step: StepCallback | None = None) -> tuple[ParamSet, float]:
    """Attach a fresh head for ``task``, fine-tune on ``train_idx`` and score mIoU on ``test_idx``."""
    if task.id in pretrained.heads:
        raise ConfigError(f"task {task.id!r} already has a head in the pretrained model")
    params = attach_head(pretrained, task.id, task.num_classes, InitSpec(cfg.head_seed))
    wrt = params.head_keys(task.id) if cfg.which_params == "head" else params.keys_for(task.id)
    if cfg.iters:
        meta = MetaDataset((task,), {task.id: {"train": tuple(train_idx)}})
        loader = batch_loader(meta, SamplerConfig(instance_batch_size=cfg.batch_size, seed=seed))
        adam = AdamState()
        for it in range(1, cfg.iters + 1):
            samples = _augment_all(next(loader).samples, augment_cfg, seed, it)
            loss, grads = segmentation_objective(params, task.id, samples, wrt)
            params, adam = adam_step(params, grads, adam, cfg.lr)
            if on_step is not None:
                on_step(it, params, {"loss": loss})
    return params, evaluate_task(params, task, test_idx)


def moving_average(values: Sequence[float], window: int = 100) -> np.ndarray:
    """Trailing mean; entry i averages values[max(0, i-window+1) : i+1]."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)
