"""Multi-seed replication protocols: headline run, ablation ordering, regularizer effect.

Each protocol returns a small result object with the measured numbers and
a ``passed`` verdict against the bands the project accepts.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import pipeline as P
from .data import Dataset
from .model import ModelConfig

SEEDS = (0, 1, 2, 3, 4)
F1_FLOOR, FAR_CEILING = 90.0, 10.0
SLACK = 1.0
# rows compared for the ordering check, strongest first
ORDER = ("F(·) + PN +CII + SPinfomax (ours)", "F(·) + PN", "PN")


@dataclass
class EndToEnd:
    mean: dict
    per_seed: list
    seconds: float

    @property
    def passed(self):
        return self.mean["f1"] >= F1_FLOOR and self.mean["far"] <= FAR_CEILING


def end_to_end(train: Dataset, test: Dataset, cfg: P.TrainConfig | None = None,
               model_cfg: ModelConfig | None = None, seeds=SEEDS) -> EndToEnd:
    cfg = cfg or P.TrainConfig()
    model_cfg = model_cfg or ModelConfig.default(train.n_features)
    t0 = time.perf_counter()
    runs = [P.run_variant(train, test, replace(cfg, seed=s), model_cfg, P.FULL) for s in seeds]
    metrics = [r.metrics for r in runs]
    return EndToEnd(P.mean_percents(metrics), [m.percents() for m in metrics], time.perf_counter() - t0)


def ordered(values, slack=SLACK) -> bool:
    """True when each value is at least the next one minus ``slack``."""
    return all(a >= b - slack for a, b in zip(values, values[1:]))


@dataclass
class AblationOrder:
    rows: list
    per_seed_f1: dict            # label -> [f1 per seed]
    holds_per_seed: list = field(default_factory=list)

    @property
    def mean_f1(self):
        return {k: float(np.mean(v)) for k, v in self.per_seed_f1.items()}

    @property
    def passed(self):
        return sum(self.holds_per_seed) >= len(self.holds_per_seed) - 1 and ordered(
            [self.mean_f1[k] for k in ORDER])


def ablation_order(train: Dataset, test: Dataset, cfg: P.TrainConfig | None = None,
                   model_cfg: ModelConfig | None = None, seeds=SEEDS) -> AblationOrder:
    cfg = cfg or P.TrainConfig()
    model_cfg = model_cfg or ModelConfig.default(train.n_features)
    rows = P.run_ablation(train, test, cfg, model_cfg, seeds)
    f1 = {}
    for row in rows:
        f1[row.label] = [100 * r.metrics.f1 if r.metrics else float("nan") for r in row.runs]
    holds = [ordered([f1[k][i] for k in ORDER]) for i in range(len(seeds))]
    return AblationOrder(rows, f1, holds)


@dataclass
class RegularizerEffect:
    far_with: float
    far_without: float
    rows: list

    @property
    def passed(self):
        return self.far_with <= self.far_without


def regularizer_effect(train: Dataset, test: Dataset, cfg: P.TrainConfig | None = None,
                       model_cfg: ModelConfig | None = None, seeds=SEEDS, alpha=0.001) -> RegularizerEffect:
    cfg = cfg or P.TrainConfig()
    model_cfg = model_cfg or ModelConfig.default(train.n_features)
    rows = P.sweep("alpha", (alpha, 0.0), train, test, cfg, model_cfg, seeds)
    with_reg, without = (r.mean()["far"] for r in rows)
    return RegularizerEffect(with_reg, without, rows)
