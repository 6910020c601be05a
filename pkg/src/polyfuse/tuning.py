"""Latency measurement and genetic-algorithm schedule tuning.

Timed regions run under a process-wide lock so at most one measurement is in
flight at any instant; absolute numbers are machine-dependent, comparisons and
ratios are the currency.
"""

from __future__ import annotations

import logging
import random
import statistics
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import schedule
from .graph import OpKind, TensorGraph

log = logging.getLogger(__name__)

_MEASURE_LOCK = threading.Lock()


class MeasurementError(RuntimeError):
    pass


@dataclass(frozen=True)
class MeasureConfig:
    runs: int = 100
    warmup: int = 10


@dataclass(frozen=True)
class LatencyStats:
    runs: int
    warmup: int
    samples_ms: tuple[float, ...]
    median_ms: float
    p90_ms: float

    @classmethod
    def from_samples(cls, samples_ms: Sequence[float], warmup: int = 0) -> "LatencyStats":
        if not samples_ms:
            raise ValueError("at least one sample is required")
        ordered = sorted(samples_ms)
        rank = max(0, -(-9 * len(ordered) // 10) - 1)  # nearest-rank 90th percentile
        return cls(
            runs=len(samples_ms),
            warmup=warmup,
            samples_ms=tuple(samples_ms),
            median_ms=statistics.median(samples_ms),
            p90_ms=ordered[rank],
        )


def measure_latency(
    executable: Callable[[Mapping[int, np.ndarray]], object],
    cfg: MeasureConfig,
    bindings: Mapping[int, np.ndarray],
) -> LatencyStats:
    """Warm up unrecorded, then time `runs` executions of fixed bindings."""
    if cfg.runs < 1:
        raise ValueError(f"runs must be >= 1, got {cfg.runs}")
    if cfg.warmup < 0:
        raise ValueError(f"warmup must be >= 0, got {cfg.warmup}")
    samples: list[float] = []
    with _MEASURE_LOCK:
        for i in range(cfg.warmup):
            try:
                executable(bindings)
            except Exception as e:
                raise MeasurementError(f"executable failed during warmup run {i}") from e
        for i in range(cfg.runs):
            t0 = time.perf_counter()
            try:
                executable(bindings)
            except Exception as e:
                raise MeasurementError(f"executable failed during timed run {i}") from e
            samples.append((time.perf_counter() - t0) * 1e3)
    return LatencyStats.from_samples(samples, warmup=cfg.warmup)


Chromosome = tuple[int, ...]


@dataclass(frozen=True)
class GAConfig:
    population_size: int = 24
    generations: int = 40
    crossover_rate: float = 0.9
    mutation_rate: float = 0.08
    elitism_count: int = 1
    rng_seed: int = 0

    def __post_init__(self):
        if self.elitism_count < 1 or self.population_size < self.elitism_count:
            raise ValueError("population_size must be >= elitism_count >= 1")
        for name in ("crossover_rate", "mutation_rate"):
            rate = getattr(self, name)
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {rate}")


def ga_search(
    space: Sequence[int],
    fitness: Callable[[Chromosome], float],
    cfg: GAConfig,
) -> tuple[Chromosome, list[float]]:
    """Minimize fitness over a categorical gene space.

    Tournament selection of size 2, single-point crossover, per-gene uniform
    mutation, elitism. Fully deterministic for a fixed seed. Returns the best
    chromosome and the best-so-far fitness after the initial population and
    after each generation (non-increasing by elitism).
    """
    if not space or any(s < 1 for s in space):
        raise ValueError(f"gene space must be non-empty with sizes >= 1, got {space}")
    rng = random.Random(cfg.rng_seed)
    cache: dict[Chromosome, float] = {}

    def fit(c: Chromosome) -> float:
        if c not in cache:
            cache[c] = fitness(c)
        return cache[c]

    def random_individual() -> Chromosome:
        return tuple(rng.randrange(s) for s in space)

    def tournament(pop: list[Chromosome]) -> Chromosome:
        a, b = rng.randrange(len(pop)), rng.randrange(len(pop))
        return pop[a] if fit(pop[a]) <= fit(pop[b]) else pop[b]

    def crossover(a: Chromosome, b: Chromosome) -> Chromosome:
        if len(space) < 2:
            return a
        cut = rng.randrange(1, len(space))
        return a[:cut] + b[cut:]

    def mutate(c: Chromosome) -> Chromosome:
        genes = list(c)
        for i, s in enumerate(space):
            if rng.random() < cfg.mutation_rate:
                genes[i] = rng.randrange(s)
        return tuple(genes)

    population = [random_individual() for _ in range(cfg.population_size)]
    best = min(population, key=fit)
    history = [fit(best)]
    for _ in range(cfg.generations):
        ranked = sorted(population, key=fit)
        nxt = ranked[: cfg.elitism_count]
        while len(nxt) < cfg.population_size:
            parent_a = tournament(population)
            parent_b = tournament(population)
            child = crossover(parent_a, parent_b) if rng.random() < cfg.crossover_rate else parent_a
            nxt.append(mutate(child))
        population = nxt
        gen_best = min(population, key=fit)
        if fit(gen_best) < fit(best):
            best = gen_best
        history.append(fit(best))
    return best, history


@dataclass
class TuneResult:
    assignment: dict[int, schedule.ScheduleVariant]
    stats: LatencyStats
    history: list[float] = field(default_factory=list)


def tune_graph(
    g: TensorGraph,
    cfg: GAConfig,
    bindings: Mapping[int, np.ndarray],
    search_cfg: MeasureConfig = MeasureConfig(runs=5, warmup=1),
    final_cfg: MeasureConfig = MeasureConfig(runs=30, warmup=3),
) -> TuneResult:
    """Pick per-block schedules by measured whole-graph latency.

    Two genes per fused block: the (order, hoisting) base schedule and the
    unroll factor. Fitness is the median latency over `search_cfg` runs on the
    fixed bench bindings; the winning assignment is re-measured with
    `final_cfg` for the headline stats.
    """
    blocks: list[tuple[int, schedule.LoweredBlock, list[schedule.ScheduleVariant]]] = []
    for n in g.nodes:
        if n.kind is not OpKind.FUSED:
            continue
        try:
            lb = schedule.lower_block(n)
        except schedule.LoweringError as e:
            log.warning("block %d is not tunable, using per-op fallback: %s", n.id, e)
            continue
        blocks.append((n.id, lb, schedule.gen_variants(lb)))

    n_unroll = len(schedule.UNROLL_FACTORS)
    space: list[int] = []
    for _, _, variants in blocks:
        space.extend((len(variants) // n_unroll, n_unroll))

    def decode(chrom: Chromosome) -> dict[int, schedule.ScheduleVariant]:
        assignment = {}
        for i, (nid, _, variants) in enumerate(blocks):
            base, unroll = chrom[2 * i], chrom[2 * i + 1]
            assignment[nid] = variants[base * n_unroll + unroll]
        return assignment

    if not space:
        executable = schedule.graph_executable(g)
        return TuneResult(assignment={}, stats=measure_latency(executable, final_cfg, bindings))

    def fitness(chrom: Chromosome) -> float:
        executable = schedule.graph_executable(g, decode(chrom))
        return measure_latency(executable, search_cfg, bindings).median_ms

    best, history = ga_search(space, fitness, cfg)
    assignment = decode(best)
    stats = measure_latency(schedule.graph_executable(g, assignment), final_cfg, bindings)
    return TuneResult(assignment=assignment, stats=stats, history=history)
