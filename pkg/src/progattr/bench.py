"""Inference and training timing: one shared base pass versus one pass per model."""

from __future__ import annotations

import statistics
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np

from .data import Dataset
from .errors import ComparisonError, ConfigurationError
from .models import Ensemble, ProgressiveModel, forward_shared
from .training import TrainConfig, exposure_epochs, train_individual, train_progressive

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None


@contextmanager
def single_thread():
    if threadpool_limits is None:
        yield
    else:
        with threadpool_limits(limits=1):
            yield


@dataclass
class BenchReport:
    mode: str
    batch_size: int
    batches: int
    wall_time: float          # median seconds for one pass over all batches
    base_forward_calls: int   # during one pass
    per_image_latency: float
    times: list

    def row(self) -> dict:
        d = asdict(self)
        d.pop("times")
        return d


@dataclass
class InferenceComparison:
    progressive: BenchReport
    ensemble: BenchReport
    outputs_equal: bool

    @property
    def ratio(self) -> float:
        return self.progressive.wall_time / self.ensemble.wall_time

    def to_rows(self) -> list[dict]:
        return [self.progressive.row(), self.ensemble.row()]


def _run(forward, batches, repetitions, reset, calls):
    times, outputs, counts = [], None, None
    for _ in range(repetitions):
        reset()
        t0 = time.perf_counter()
        outs = [forward(b) for b in batches]
        times.append(time.perf_counter() - t0)
        outputs, counts = outs, calls()
    return times[1:], outputs, counts


def bench_inference(model: ProgressiveModel, features: np.ndarray, batch_size: int = 32,
                    repetitions: int = 5, ensemble: Optional[Ensemble] = None) -> InferenceComparison:
    """Time shared-base inference against an ensemble of individual models.

    The ensemble defaults to standalone copies of ``model``'s branches, so
    both modes must produce bitwise-identical probabilities. The first
    repetition is a warm-up and is discarded.
    """
    if repetitions < 3:
        raise ConfigurationError("need at least 3 repetitions (the first is discarded)")
    ensemble = ensemble or Ensemble.from_progressive(model)
    if ensemble.config != model.config:
        raise ComparisonError("ensemble and progressive model use different net configs")
    batches = [features[i:i + batch_size] for i in range(0, len(features), batch_size)]

    def reset_prog():
        model.base_forward_calls = 0

    with single_thread():
        pt, pout, pcalls = _run(lambda b: [p.data for p in forward_shared(model, b)], batches,
                                repetitions, reset_prog, lambda: model.base_forward_calls)
        et, eout, ecalls = _run(lambda b: [p.data for p in ensemble.forward(b)], batches,
                                repetitions, ensemble.reset_counters, lambda: ensemble.base_forward_calls)
    equal = all(np.array_equal(a, b) for pa, ea in zip(pout, eout) for a, b in zip(pa, ea))
    n_img = len(features)
    pm, em = statistics.median(pt), statistics.median(et)
    return InferenceComparison(
        BenchReport("progressive", batch_size, len(batches), pm, pcalls, pm / n_img, pt),
        BenchReport("individual-ensemble", batch_size, len(batches), em, ecalls, em / n_img, et),
        equal)


@dataclass
class TrainingBench:
    progressive_seconds: float
    individual_seconds: float
    individual_epochs: dict

    @property
    def ratio(self) -> float:
        return self.progressive_seconds / self.individual_seconds

    def to_rows(self) -> list[dict]:
        return [{"mode": "progressive", "wall_time": self.progressive_seconds},
                {"mode": "individual-sum", "wall_time": self.individual_seconds,
                 "epochs": self.individual_epochs}]


def bench_training(dataset: Dataset, config: TrainConfig = TrainConfig()) -> TrainingBench:
    """Wall time of one progressive run against the sum of individual runs.

    Each individual model trains end to end for as many epochs as its
    attribute is exposed to during the progressive schedule.
    """
    order = config.order_for(dataset.schema)
    budget = dict(zip(order, exposure_epochs(config, len(order))))
    with single_thread():
        t0 = time.perf_counter()
        train_progressive(dataset, config)
        prog = time.perf_counter() - t0
        t0 = time.perf_counter()
        for attr in order:
            train_individual(dataset, attr, config, epochs=budget[attr])
        indiv = time.perf_counter() - t0
    return TrainingBench(prog, indiv, budget)
