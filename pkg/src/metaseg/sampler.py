"""Task-level (episodic) and instance-level batch construction.

``episode_loader`` draws a source from a task distribution, then a set of
instances from that source, and splits them into support and query.
``batch_loader`` pools instances across sources after truncating every
source to the size of the smallest, redrawing the truncation each epoch.
Both are plain generators whose output is a pure function of the dataset,
the config and the seed.
"""

from __future__ import annotations

from collections.abc import Iterator, Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .dataset import MetaDataset, Sample
from .errors import ConfigError


@dataclass(frozen=True)
class SamplerConfig:
    episode_size: int = 16
    support_size: int = 8
    batch_episodes: int = 4
    instance_batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.support_size < self.episode_size:
            raise ConfigError(
                f"need 0 < support_size < episode_size, got {self.support_size} and {self.episode_size}"
            )
        if self.batch_episodes < 1 or self.instance_batch_size < 1:
            raise ConfigError("batch sizes must be positive")


@dataclass(frozen=True)
class Episode:
    task_id: str
    support: tuple[Sample, ...]
    query: tuple[Sample, ...]
    # positions of the drawn samples within the source, support first
    indices: tuple[int, ...] = ()


@dataclass(frozen=True)
class EpisodeBatch:
    episodes: tuple[Episode, ...]

    def __len__(self) -> int:
        return len(self.episodes)


@dataclass(frozen=True)
class InstanceBatch:
    epoch: int
    samples: tuple[Sample, ...]


class TaskDistribution(dict):
    """``source_id -> probability``; validated on construction."""

    def __init__(self, probs: Mapping[str, float]):
        super().__init__((k, float(v)) for k, v in probs.items())
        if not self:
            raise ConfigError("task distribution is empty")
        if any(p < 0 for p in self.values()):
            raise ConfigError(f"negative task probability in {dict(self)}")
        total = sum(self.values())
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"task probabilities sum to {total}, not 1")

    @classmethod
    def uniform(cls, source_ids: Sequence[str]) -> TaskDistribution:
        n = len(source_ids)
        if n == 0:
            raise ConfigError("uniform distribution over no sources")
        return cls({s: 1.0 / n for s in source_ids})

    @classmethod
    def point(cls, source_id: str) -> TaskDistribution:
        return cls({source_id: 1.0})


def split_support_query(instances: Sequence, support_size: int) -> tuple[list, list]:
    """Order-preserving prefix/suffix split."""
    if not 0 < support_size < len(instances):
        raise ConfigError(f"support_size {support_size} invalid for {len(instances)} instances")
    return list(instances[:support_size]), list(instances[support_size:])


def episode_loader(meta: MetaDataset, dist: TaskDistribution | None, cfg: SamplerConfig,
                   split: str = "train") -> Iterator[EpisodeBatch]:
    """Infinite stream of episode batches. ``dist=None`` means uniform over the sources."""
    if dist is None:
        dist = TaskDistribution.uniform([s for s in meta.ids if meta.indices(s, split)])
    ids = list(dist)
    for sid in ids:
        if sid not in meta.ids:
            raise ConfigError(f"task distribution references unknown source {sid!r}")
        if dist[sid] > 0 and not meta.indices(sid, split):
            raise ConfigError(f"source {sid!r} has an empty {split} split")
    probs = np.array([dist[s] for s in ids])
    pools = {sid: meta.indices(sid, split) for sid in ids}
    rng = np.random.default_rng(cfg.seed)

    while True:
        episodes = []
        for _ in range(cfg.batch_episodes):
            sid = ids[int(rng.choice(len(ids), p=probs))]
            pool = pools[sid]
            replace = len(pool) < cfg.episode_size
            picks = rng.choice(len(pool), size=cfg.episode_size, replace=replace)
            idx = [pool[int(i)] for i in picks]
            samples = meta.source(sid).samples
            sup, qry = split_support_query(idx, cfg.support_size)
            episodes.append(Episode(
                sid,
                tuple(samples[i] for i in sup),
                tuple(samples[i] for i in qry),
                tuple(idx),
            ))
        yield EpisodeBatch(tuple(episodes))


def truncated_pool(meta: MetaDataset, rng: np.random.Generator, split: str = "train") -> list[Sample]:
    """One epoch's balanced pool: every source subsampled to the smallest split size."""
    ids = [s for s in meta.ids if meta.indices(s, split)]
    if not ids:
        raise ConfigError(f"no source has a non-empty {split} split")
    size = min(len(meta.indices(s, split)) for s in ids)
    pool = []
    for sid in ids:
        idx = meta.indices(sid, split)
        keep = rng.choice(len(idx), size=size, replace=False)
        samples = meta.source(sid).samples
        pool.extend(samples[idx[int(i)]] for i in keep)
    return pool


def batch_loader(meta: MetaDataset, cfg: SamplerConfig, split: str = "train") -> Iterator[InstanceBatch]:
    """Infinite stream of mixed-source batches; the last batch of an epoch may be short."""
    rng = np.random.default_rng(cfg.seed)
    epoch = 0
    while True:
        pool = truncated_pool(meta, rng, split)
        order = rng.permutation(len(pool))
        for start in range(0, len(pool), cfg.instance_batch_size):
            chunk = order[start:start + cfg.instance_batch_size]
            yield InstanceBatch(epoch, tuple(pool[int(i)] for i in chunk))
        epoch += 1
