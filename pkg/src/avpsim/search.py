"""Search-based test generation: a multi-objective genetic algorithm (NSGA-II)
over normalized scenario genomes, driving the closed-loop simulation toward
low pedestrian clearance, low time-to-collision and high impact speed.

Failure classification is decoupled from the fitness: a test case counts as
failure-revealing iff its trace violates the SAFETY-GOAL requirement.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from multiprocessing import Pool
from pathlib import Path
from typing import Callable, Sequence

from .episode import EpisodeConfig, SimulationFault, StackConfig, run_episode
from .scenarios import (
    ConcreteScenario,
    FunctionalScenario,
    OddSpec,
    ParameterRange,
    decode_genome,
    rng_stream,
)
from .stl import Requirement, requirement_library, robustness_offline, signal_names
from .world import SIGNAL_CAP, Trace, write_trace

SBX_ETA = 15.0
MUTATION_ETA = 20.0
CROSSOVER_PROB = 0.9

# Per-individual episode seeds: distinct for every (run seed, evaluation
# index) pair at any realistic budget, and independent of worker scheduling.
_SEED_STRIDE = 1_000_003


class SearchError(ValueError):
    """Invalid search configuration or input."""


@dataclass(frozen=True)
class FitnessVector:
    """Objectives, all minimized.

    min_ped_distance: closest footprint-to-pedestrian gap over the episode,
        clamped to 0 on contact (meters).
    min_ttc: smallest path-projected time to collision (seconds, capped).
    neg_speed_at_min_dist: negated ego speed at the closest approach, so
        that faster near-misses rank as more critical.
    """

    min_ped_distance: float
    min_ttc: float
    neg_speed_at_min_dist: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.min_ped_distance, self.min_ttc, self.neg_speed_at_min_dist)


WORST_FITNESS = FitnessVector(SIGNAL_CAP, SIGNAL_CAP, SIGNAL_CAP)


@dataclass
class Individual:
    genome: tuple[float, ...]
    index: int = -1
    scenario: ConcreteScenario | None = None
    fitness: FitnessVector | None = None
    verdicts: dict[str, float] = field(default_factory=dict)
    failure: bool = False
    invalid: bool = False
    trace: Trace | None = None
    rank: int = -1
    crowding: float = 0.0


@dataclass
class EvalOutcome:
    fitness: FitnessVector
    verdicts: dict[str, float] = field(default_factory=dict)
    failure: bool = False
    invalid: bool = False
    trace: Trace | None = None
    scenario: ConcreteScenario | None = None


@dataclass
class SearchResult:
    archive: list[Individual]
    front: list[Individual]
    failures: list[Individual]
    evaluations: int
    seed: int


def _values(f) -> tuple[float, ...]:
    if isinstance(f, FitnessVector):
        return f.as_tuple()
    return tuple(float(v) for v in f)


def dominates(a, b) -> bool:
    """Pareto dominance for minimization: a <= b everywhere, < somewhere."""
    ta, tb = _values(a), _values(b)
    if len(ta) != len(tb):
        raise SearchError(f"fitness arity mismatch: {len(ta)} vs {len(tb)}")
    return all(x <= y for x, y in zip(ta, tb)) and any(x < y for x, y in zip(ta, tb))


def fitness_from_trace(trace: Trace) -> FitnessVector:
    """Extract the objective vector from one episode trace."""
    if not trace.samples:
        return WORST_FITNESS
    gaps = [s.min_ped_dist for s in trace.samples]
    closest = min(range(len(gaps)), key=gaps.__getitem__)
    return FitnessVector(
        min_ped_distance=max(0.0, gaps[closest]),
        min_ttc=min(s.ttc for s in trace.samples),
        neg_speed_at_min_dist=-trace.samples[closest].ego_v,
    )


def _deterministic_requirements(requirements: dict[str, Requirement]) -> dict[str, Requirement]:
    # wall-clock signals would make archives differ between reruns
    return {
        name: req for name, req in requirements.items()
        if "cycle_time" not in signal_names(req.formula)
    }


def evaluate(
    genome: Sequence[float],
    fs: FunctionalScenario,
    stack_cfg: StackConfig,
    episode_cfg: EpisodeConfig | None = None,
    odd: OddSpec | None = None,
    requirements: dict[str, Requirement] | None = None,
    seed: int = 0,
    index: int = 0,
) -> EvalOutcome:
    """Decode, simulate and score one genome.

    A simulation fault marks the individual invalid with the worst fitness
    instead of aborting the search.
    """
    if requirements is None:
        requirements = {"SAFETY-GOAL": requirement_library(stack_cfg.params)["SAFETY-GOAL"]}
    episode_seed = seed * _SEED_STRIDE + index
    sc = decode_genome(fs, genome, scenario_id=f"{fs.name}-s{seed}-e{index:04d}",
                       seed=episode_seed)
    try:
        trace = run_episode(sc, fs, stack_cfg, episode_cfg, odd)
    except SimulationFault:
        return EvalOutcome(fitness=WORST_FITNESS, invalid=True, scenario=sc)
    signals = trace.signals()
    verdicts = {
        name: robustness_offline(req.formula, signals, trace.dt)
        for name, req in requirements.items()
    }
    failure = verdicts.get("SAFETY-GOAL", math.inf) < 0.0
    return EvalOutcome(
        fitness=fitness_from_trace(trace),
        verdicts=verdicts,
        failure=failure,
        trace=trace if failure else None,
        scenario=sc,
    )


# ---------------------------------------------------------------------------
# NSGA-II machinery.


def nondominated_sort(population: Sequence[Individual]) -> list[list[Individual]]:
    """Fast non-dominated sort; assigns ranks and returns the fronts."""
    n = len(population)
    dominated_by: list[list[int]] = [[] for _ in range(n)]
    domination_count = [0] * n
    values = [_values(ind.fitness) for ind in population]
    for i in range(n):
        for j in range(i + 1, n):
            if dominates(values[i], values[j]):
                dominated_by[i].append(j)
                domination_count[j] += 1
            elif dominates(values[j], values[i]):
                dominated_by[j].append(i)
                domination_count[i] += 1
    fronts: list[list[Individual]] = []
    current = [i for i in range(n) if domination_count[i] == 0]
    rank = 0
    while current:
        for i in current:
            population[i].rank = rank
        fronts.append([population[i] for i in current])
        nxt = []
        for i in current:
            for j in dominated_by[i]:
                domination_count[j] -= 1
                if domination_count[j] == 0:
                    nxt.append(j)
        current = sorted(nxt)
        rank += 1
    return fronts


def crowding_distance(front: Sequence[Individual]) -> None:
    """Assign the NSGA-II crowding distance in place (boundaries infinite)."""
    n = len(front)
    for ind in front:
        ind.crowding = 0.0
    if n == 0:
        return
    arity = len(_values(front[0].fitness))
    for m in range(arity):
        order = sorted(range(n), key=lambda i: _values(front[i].fitness)[m])
        lo = _values(front[order[0]].fitness)[m]
        hi = _values(front[order[-1]].fitness)[m]
        front[order[0]].crowding = math.inf
        front[order[-1]].crowding = math.inf
        span = hi - lo
        if span <= 0.0:
            continue
        for k in range(1, n - 1):
            prev_v = _values(front[order[k - 1]].fitness)[m]
            next_v = _values(front[order[k + 1]].fitness)[m]
            front[order[k]].crowding += (next_v - prev_v) / span


def _tournament(pop: Sequence[Individual], rng) -> Individual:
    i, j = int(rng.integers(len(pop))), int(rng.integers(len(pop)))
    a, b = pop[i], pop[j]
    if a.rank != b.rank:
        return a if a.rank < b.rank else b
    if a.crowding != b.crowding:
        return a if a.crowding > b.crowding else b
    return a if i <= j else b


def sbx_crossover(p1: Sequence[float], p2: Sequence[float], rng,
                  eta: float = SBX_ETA) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Simulated binary crossover on [0,1]-bounded genomes."""
    c1, c2 = list(p1), list(p2)
    if rng.random() <= CROSSOVER_PROB:
        for k in range(len(c1)):
            if rng.random() > 0.5:
                continue
            x1, x2 = c1[k], c2[k]
            u = rng.random()
            if u <= 0.5:
                beta = (2.0 * u) ** (1.0 / (eta + 1.0))
            else:
                beta = (1.0 / (2.0 * (1.0 - u))) ** (1.0 / (eta + 1.0))
            y1 = 0.5 * ((1.0 + beta) * x1 + (1.0 - beta) * x2)
            y2 = 0.5 * ((1.0 - beta) * x1 + (1.0 + beta) * x2)
            c1[k] = min(1.0, max(0.0, y1))
            c2[k] = min(1.0, max(0.0, y2))
    return tuple(c1), tuple(c2)


def polynomial_mutation(genome: Sequence[float], rng, eta: float = MUTATION_ETA,
                        prob: float | None = None) -> tuple[float, ...]:
    """Bounded polynomial mutation on [0,1] genes (Deb's variant)."""
    g = list(genome)
    if prob is None:
        prob = 1.0 / max(1, len(g))
    for k in range(len(g)):
        if rng.random() >= prob:
            continue
        x = g[k]
        u = rng.random()
        if u < 0.5:
            delta = (2.0 * u + (1.0 - 2.0 * u) * (1.0 - x) ** (eta + 1.0)) ** (
                1.0 / (eta + 1.0)) - 1.0
        else:
            delta = 1.0 - (2.0 * (1.0 - u) + (2.0 * u - 1.0) * x ** (eta + 1.0)) ** (
                1.0 / (eta + 1.0))
        g[k] = min(1.0, max(0.0, x + delta))
    return tuple(g)


def _select_next_population(pool: list[Individual], pop_size: int) -> list[Individual]:
    fronts = nondominated_sort(pool)
    selected: list[Individual] = []
    for front in fronts:
        crowding_distance(front)
        if len(selected) + len(front) <= pop_size:
            selected.extend(front)
        else:
            # truncate the split front by crowding, stable on evaluation index
            rest = sorted(front, key=lambda ind: (-ind.crowding, ind.index))
            selected.extend(rest[: pop_size - len(selected)])
            break
    return selected


def _map_ordered(fn: Callable, items: list, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with Pool(processes=workers) as pool:
        return pool.map(fn, items)


class _Evaluator:
    """Picklable default evaluator bound to the scenario and stack config."""

    def __init__(self, fs, stack_cfg, episode_cfg, odd, requirements, seed):
        self.fs = fs
        self.stack_cfg = stack_cfg
        self.episode_cfg = episode_cfg
        self.odd = odd
        self.requirements = requirements
        self.seed = seed

    def __call__(self, job: tuple[int, tuple[float, ...]]) -> EvalOutcome:
        index, genome = job
        return evaluate(genome, self.fs, self.stack_cfg, self.episode_cfg,
                        self.odd, self.requirements, seed=self.seed, index=index)


def _check_run_args(budget: int, pop_size: int) -> None:
    if pop_size < 4:
        raise SearchError("pop_size must be at least 4")
    if pop_size % 2 != 0:
        raise SearchError("pop_size must be even")
    if budget < pop_size:
        raise SearchError("budget must cover the initial population")


def _ensure_safety_goal(requirements: dict[str, Requirement] | None,
                        stack_cfg: StackConfig) -> dict[str, Requirement] | None:
    if requirements is None:
        return None
    requirements = _deterministic_requirements(requirements)
    if "SAFETY-GOAL" not in requirements:
        requirements["SAFETY-GOAL"] = requirement_library(stack_cfg.params)["SAFETY-GOAL"]
    return requirements


def _run(
    propose: Callable[[int, list[Individual]], list[tuple[float, ...]]],
    budget: int,
    pop_size: int,
    seed: int,
    evaluator: Callable,
    workers: int,
) -> SearchResult:
    """Shared driver: evaluate proposals in index order until the budget."""
    archive: list[Individual] = []
    population: list[Individual] = []
    while len(archive) < budget:
        remaining = budget - len(archive)
        genomes = propose(min(pop_size, remaining), population)
        jobs = [(len(archive) + k, g) for k, g in enumerate(genomes)]
        outcomes = _map_ordered(evaluator, jobs, workers)
        offspring = []
        for (index, genome), out in zip(jobs, outcomes):
            ind = Individual(genome=genome, index=index, scenario=out.scenario,
                             fitness=out.fitness, verdicts=out.verdicts,
                             failure=out.failure, invalid=out.invalid,
                             trace=out.trace)
            archive.append(ind)
            offspring.append(ind)
        population = _select_next_population(population + offspring, pop_size)
    front = [ind for ind in nondominated_sort(archive)[0]]
    failures = [ind for ind in archive if ind.failure]
    return SearchResult(archive=archive, front=front, failures=failures,
                        evaluations=len(archive), seed=seed)


def nsga2_run(
    fs: FunctionalScenario,
    stack_cfg: StackConfig,
    budget: int,
    pop_size: int,
    seed: int,
    episode_cfg: EpisodeConfig | None = None,
    odd: OddSpec | None = None,
    requirements: dict[str, Requirement] | None = None,
    ranges: Sequence[ParameterRange] | None = None,
    workers: int = 1,
    evaluator: Callable | None = None,
) -> SearchResult:
    """NSGA-II over the scenario parameter space.

    Deterministic per seed and independent of the worker count: all random
    draws happen in the parent process and results are reduced in genome
    submission order.
    """
    _check_run_args(budget, pop_size)
    if ranges is not None:
        fs = replace(fs, parameter_ranges=tuple(ranges))
    requirements = _ensure_safety_goal(requirements, stack_cfg)
    n_genes = len(fs.parameter_ranges)
    rng = rng_stream(seed, "nsga2")
    evaluator = evaluator or _Evaluator(fs, stack_cfg, episode_cfg, odd, requirements, seed)

    def propose(count: int, population: list[Individual]) -> list[tuple[float, ...]]:
        if not population:
            return [tuple(rng.random(n_genes)) for _ in range(count)]
        out: list[tuple[float, ...]] = []
        while len(out) < count:
            a, b = _tournament(population, rng), _tournament(population, rng)
            c1, c2 = sbx_crossover(a.genome, b.genome, rng)
            out.append(polynomial_mutation(c1, rng))
            if len(out) < count:
                out.append(polynomial_mutation(c2, rng))
        return out

    return _run(propose, budget, pop_size, seed, evaluator, workers)


def random_run(
    fs: FunctionalScenario,
    stack_cfg: StackConfig,
    budget: int,
    seed: int,
    episode_cfg: EpisodeConfig | None = None,
    odd: OddSpec | None = None,
    requirements: dict[str, Requirement] | None = None,
    ranges: Sequence[ParameterRange] | None = None,
    workers: int = 1,
    evaluator: Callable | None = None,
    batch: int = 20,
) -> SearchResult:
    """Uniform random sampling baseline with the same budget accounting."""
    if budget < 1:
        raise SearchError("budget must be positive")
    if ranges is not None:
        fs = replace(fs, parameter_ranges=tuple(ranges))
    requirements = _ensure_safety_goal(requirements, stack_cfg)
    n_genes = len(fs.parameter_ranges)
    rng = rng_stream(seed, "random-search")
    evaluator = evaluator or _Evaluator(fs, stack_cfg, episode_cfg, odd, requirements, seed)

    def propose(count: int, population: list[Individual]) -> list[tuple[float, ...]]:
        return [tuple(rng.random(n_genes)) for _ in range(count)]

    return _run(propose, budget, max(1, min(batch, budget)), seed,
                evaluator, workers)


# ---------------------------------------------------------------------------
# Search space files and result artifacts.


def load_search_space(path) -> tuple[ParameterRange, ...]:
    """JSON array of parameter ranges."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SearchError(f"{path}: {exc}") from exc
    if not isinstance(data, list) or not data:
        raise SearchError(f"{path}: expected a non-empty JSON array of ranges")
    try:
        return tuple(ParameterRange.from_dict(entry) for entry in data)
    except (ValueError, TypeError, KeyError) as exc:
        raise SearchError(f"{path}: {exc}") from exc


def store_search_space(ranges: Sequence[ParameterRange], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([r.to_dict() for r in ranges], fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fmt(value: float) -> str:
    return format(float(value), ".9g")


def write_search_outputs(result: SearchResult, fs: FunctionalScenario, out_dir) -> dict:
    """Write archive.csv, front.json and one trace CSV per failure.

    Returns {"archive": path, "front": path, "failures": [paths]}.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = [r.name for r in fs.parameter_ranges]
    verdict_names = sorted({name for ind in result.archive for name in ind.verdicts})

    archive_path = out_dir / "archive.csv"
    header = (["index"] + [f"gene_{n}" for n in names] + [f"value_{n}" for n in names]
              + ["f_min_ped_distance", "f_min_ttc", "f_neg_speed_at_min_dist"]
              + [f"rob_{n}" for n in verdict_names] + ["failure", "invalid"])
    with open(archive_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for ind in result.archive:
            decoded = [rng.decode(g) for rng, g in zip(fs.parameter_ranges, ind.genome)]
            row = ([str(ind.index)] + [_fmt(g) for g in ind.genome]
                   + [_fmt(v) for v in decoded]
                   + [_fmt(v) for v in ind.fitness.as_tuple()]
                   + [_fmt(ind.verdicts[n]) if n in ind.verdicts else "" for n in verdict_names]
                   + [str(int(ind.failure)), str(int(ind.invalid))])
            writer.writerow(row)

    front_path = out_dir / "front.json"
    front_doc = [
        {
            "index": ind.index,
            "genome": list(ind.genome),
            "fitness": list(ind.fitness.as_tuple()),
            "verdicts": ind.verdicts,
            "failure": ind.failure,
        }
        for ind in sorted(result.front, key=lambda i: i.index)
    ]
    with open(front_path, "w", encoding="utf-8") as fh:
        json.dump({"seed": result.seed, "evaluations": result.evaluations,
                   "front": front_doc}, fh, indent=2, sort_keys=True)
        fh.write("\n")

    failure_paths = []
    for ind in result.failures:
        if ind.trace is None:
            continue
        path = out_dir / f"failure_e{ind.index:04d}.csv"
        write_trace(ind.trace, path)
        failure_paths.append(path)
    return {"archive": archive_path, "front": front_path, "failures": failure_paths}
