"""Seeded scene splits and (optionally parallel) scene generation."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .config import RunConfig
from .simulator import SceneSample, derive_seed, generate_scene
from .train import Scene, build_rig, prepare_scene

SPLITS = {"train": 0, "test": 1}


def split_seeds(seed: int, split: str, n: int) -> list[int]:
    """Scene seeds for a split; disjoint across splits, stable under changes of ``n``."""
    return [derive_seed(seed, SPLITS[split], i) for i in range(n)]


def _one(args):
    cfg, s = args
    rig = build_rig(cfg)
    return generate_scene(s, cfg.world.params(), rig, cfg.grid.labels(), ego_jitter=cfg.world.ego_jitter)


def generate_samples(cfg: RunConfig, seeds, jobs: int = 1) -> list[SceneSample]:
    """Scenes in seed order. Output does not depend on ``jobs``."""
    work = [(cfg, int(s)) for s in seeds]
    if jobs <= 1 or len(work) < 2:
        return [_one(w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(_one, work, chunksize=max(1, len(work) // (4 * jobs))))


def prepare_all(samples: list[SceneSample], cfg: RunConfig) -> list[Scene]:
    return [prepare_scene(s, cfg, np.float32) for s in samples]


def class_fractions(samples: list[SceneSample], num_classes: int) -> np.ndarray:
    counts = np.zeros(num_classes, np.int64)
    for s in samples:
        counts += np.bincount(s.labels.reshape(-1), minlength=num_classes)[:num_classes]
    return counts / max(counts.sum(), 1)
