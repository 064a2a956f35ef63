"""Multi-objective grammar-guided search with successive difficulty adaptation.

Both objectives are minimised: BiCGSTAB iterations and cost per iteration
(work units by default, measured seconds in wall-clock mode).
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from mgevo.grammar import (ComponentMenu, DerivationTree, Grammar, crossover, dumps, grow,
                           loads, make_grammar, mutate, translate, validate)
from mgevo.numerics import BENCHMARK_CAP, SEARCH_CAP, SolveReport, solve_instance
from mgevo.problem import ProblemInstance, build_instance, next_difficulty

log = logging.getLogger(__name__)


@dataclass
class SearchConfig:
    mu: int = 128
    lam: Optional[int] = None
    generations: int = 150
    difficulty_period: int = 50
    init_pool: int = 1024
    p_crossover: float = 2 / 3
    p_terminal: float = 1 / 3
    min_height: int = 8
    max_height: int = 40
    height_limit: int = 120
    initial_k: float = 80.0
    depth: int = 5
    max_iterations: int = SEARCH_CAP
    mode: str = "work-units"
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.lam is None:
            self.lam = self.mu
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.mu < 1:
            problems.append("mu must be >= 1")
        if self.lam < 1:
            problems.append("lam must be >= 1")
        if self.generations < 0:
            problems.append("generations must be >= 0")
        if self.difficulty_period < 0:
            problems.append("difficulty_period must be >= 0 (0 disables adaptation)")
        if self.init_pool < self.mu:
            problems.append("init_pool must be >= mu")
        for name in ("p_crossover", "p_terminal"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                problems.append(f"{name} must lie in [0, 1]")
        if not 2 <= self.min_height <= self.max_height <= self.height_limit:
            problems.append("need 2 <= min_height <= max_height <= height_limit")
        if self.mode not in ("work-units", "wall-clock"):
            problems.append("mode must be 'work-units' or 'wall-clock'")
        if self.workers < 1:
            problems.append("workers must be >= 1")
        if self.max_iterations < 1:
            problems.append("max_iterations must be >= 1")
        if problems:
            raise ValueError("; ".join(problems))

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class Individual:
    genotype: DerivationTree
    fitness: Optional[tuple[float, float]] = None
    convergent: bool = False
    cost: Optional[float] = None
    rank: int = 0
    crowding: float = 0.0

    @property
    def digest(self) -> str:
        return self.genotype.digest()


# -- fitness -------------------------------------------------------------------

class PenaltyTracker:
    """Largest cost per iteration seen on the current instance."""

    def __init__(self):
        self.max_cost = 0.0

    def observe(self, cost: float) -> None:
        if cost is not None and math.isfinite(cost):
            self.max_cost = max(self.max_cost, cost)

    def penalty(self, cap: int) -> tuple[float, float]:
        return float(2 * cap), 2.0 * self.max_cost


def _raw_evaluate(args) -> tuple[int, bool, float]:
    text, p, cap, mode = args
    tree = loads(text)
    rep = solve_instance(tree, p, mode=mode, cap=cap)
    cost = rep.work_units_per_iteration if mode == "work-units" else rep.wall_time_per_iteration
    return rep.iterations, rep.converged, float(cost)


def _assign(ind: Individual, raw, tracker: PenaltyTracker, cap: int) -> Individual:
    iterations, converged, cost = raw
    tracker.observe(cost)
    ind.cost = cost
    ind.convergent = bool(converged)
    if converged:
        ind.fitness = (float(iterations), float(cost))
    else:
        ind.fitness = tracker.penalty(cap)
    return ind


def refresh_penalties(inds: Iterable[Individual], tracker: PenaltyTracker, cap: int) -> None:
    """Re-price non-convergent individuals with the current penalty so every
    convergent fitness still dominates them after the cost scale has grown."""
    pen = tracker.penalty(cap)
    for ind in inds:
        if not ind.convergent:
            ind.fitness = pen


def evaluate_fitness(ind: Individual, p: ProblemInstance, tracker: Optional[PenaltyTracker] = None,
                     cap: int = SEARCH_CAP, mode: str = "work-units") -> Individual:
    """Solve ``p`` with the individual's preconditioner and set its fitness.

    A non-convergent solve gets ``(2 * cap, 2 * largest cost seen)``, which every
    convergent fitness dominates.
    """
    tree = translate(ind.genotype, make_grammar(p, ind.genotype.menu))
    ind.genotype = tree
    raw = _raw_evaluate((dumps(tree), p, cap, mode))
    return _assign(ind, raw, tracker or PenaltyTracker(), cap)


class Evaluator:
    """Batch fitness evaluation with an optional process pool and a per-run cache.

    Results do not depend on the number of workers: solves are deterministic,
    duplicates are resolved before dispatch and penalties are assigned in
    input order after the gather.
    """

    def __init__(self, workers: int = 1, cap: int = SEARCH_CAP, mode: str = "work-units"):
        self.workers = workers
        self.cap = cap
        self.mode = mode
        self.cache: dict = {}
        self.pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
        self.evaluations = 0

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()
            self.pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def evaluate(self, inds: Sequence[Individual], p: ProblemInstance,
                 tracker: PenaltyTracker) -> list[Individual]:
        grammar = make_grammar(p, inds[0].genotype.menu if inds else None)
        texts = []
        for ind in inds:
            ind.genotype = translate(ind.genotype, grammar)
            texts.append(dumps(ind.genotype, header=True))
        keys = [(t, p.k) for t in texts]
        todo = []
        for key in keys:
            if key not in self.cache and key not in todo:
                todo.append(key)
        jobs = [(t, p, self.cap, self.mode) for t, _ in todo]
        if self.pool is not None and len(jobs) > 1:
            results = list(self.pool.map(_raw_evaluate, jobs))
        else:
            results = [_raw_evaluate(j) for j in jobs]
        self.evaluations += len(jobs)
        for key, res in zip(todo, results):
            self.cache[key] = res
        for key in keys:
            tracker.observe(self.cache[key][2])
        for ind, key in zip(inds, keys):
            _assign(ind, self.cache[key], tracker, self.cap)
        return list(inds)


# -- NSGA-II building blocks -------------------------------------------------------

def dominates(a: Sequence[float], b: Sequence[float]) -> bool:
    return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))


def non_dominated_sort(fitnesses: Sequence[Sequence[float]]) -> list[list[int]]:
    """Fronts as lists of indices; each front keeps ascending input order."""
    n = len(fitnesses)
    F = np.asarray(fitnesses, dtype=float).reshape(n, -1)
    dominated_by = [[] for _ in range(n)]
    count = np.zeros(n, dtype=int)
    for i in range(n):
        le = np.all(F[i] <= F, axis=1) & np.any(F[i] < F, axis=1)
        ge = np.all(F <= F[i], axis=1) & np.any(F < F[i], axis=1)
        dominated_by[i] = np.flatnonzero(le).tolist()
        count[i] = int(ge.sum())
    fronts = []
    current = [i for i in range(n) if count[i] == 0]
    while current:
        fronts.append(current)
        nxt = set()
        for i in current:
            for j in dominated_by[i]:
                count[j] -= 1
                if count[j] == 0:
                    nxt.add(j)
        current = sorted(nxt)
    return fronts


def crowding_distance(front: Sequence[Sequence[float]]) -> np.ndarray:
    """Crowding distance within one front.

    The first and last point of every objective (stable order) get ``inf``;
    interior points add neighbour gaps normalised by the objective's range, and
    an objective whose values are all equal adds nothing to them.
    """
    n = len(front)
    dist = np.zeros(n)
    if n == 0:
        return dist
    F = np.asarray(front, dtype=float).reshape(n, -1)
    for m in range(F.shape[1]):
        order = np.argsort(F[:, m], kind="stable")
        vals = F[order, m]
        span = vals[-1] - vals[0]
        dist[order[0]] = np.inf
        dist[order[-1]] = np.inf
        if n > 2 and span > 0:
            gaps = (vals[2:] - vals[:-2]) / span
            dist[order[1:-1]] += gaps
    return dist


def assign_rank_and_crowding(pop: Sequence[Individual]) -> list[list[int]]:
    fronts = non_dominated_sort([ind.fitness for ind in pop])
    for r, front in enumerate(fronts):
        cd = crowding_distance([pop[i].fitness for i in front])
        for i, d in zip(front, cd):
            pop[i].rank = r
            pop[i].crowding = float(d)
    return fronts


def tournament_select(pop: Sequence[Individual], rng) -> Individual:
    """Binary tournament: lower rank wins, then larger crowding, then a coin flip."""
    if len(pop) == 1:
        return pop[0]
    i, j = rng.integers(len(pop), size=2)
    a, b = pop[int(i)], pop[int(j)]
    if a.rank != b.rank:
        return a if a.rank < b.rank else b
    if a.crowding != b.crowding:
        return a if a.crowding > b.crowding else b
    return a if rng.random() < 0.5 else b


def select_indices(fitnesses: Sequence[Sequence[float]], mu: int) -> list[int]:
    """Indices kept by NSGA-II environmental selection (fronts first, then crowding)."""
    if len(fitnesses) < mu:
        raise ValueError(f"cannot select {mu} from {len(fitnesses)}")
    chosen: list[int] = []
    for front in non_dominated_sort(fitnesses):
        if len(chosen) + len(front) <= mu:
            chosen.extend(front)
            if len(chosen) == mu:
                break
            continue
        cd = crowding_distance([fitnesses[i] for i in front])
        order = sorted(range(len(front)), key=lambda t: (-cd[t], t))
        chosen.extend(front[t] for t in order[:mu - len(chosen)])
        break
    return chosen


def environmental_select(combined: Sequence[Individual], mu: int) -> list[Individual]:
    keep = select_indices([ind.fitness for ind in combined], mu)
    pop = [combined[i] for i in keep]
    assign_rank_and_crowding(pop)
    return pop


class ParetoArchive:
    """Mutually non-dominated individuals, one per distinct (fitness, genotype)."""

    def __init__(self, members: Iterable[Individual] = ()):
        self.members: list[Individual] = []
        self.add(members)

    def add(self, inds: Iterable[Individual]) -> None:
        for ind in inds:
            if ind.fitness is None:
                raise ValueError("cannot archive an unevaluated individual")
            if any(dominates(m.fitness, ind.fitness) for m in self.members):
                continue
            if any(m.fitness == ind.fitness and m.genotype.root == ind.genotype.root
                   for m in self.members):
                continue
            self.members = [m for m in self.members if not dominates(ind.fitness, m.fitness)]
            self.members.append(ind)

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)


def front_of(pop: Sequence[Individual], convergent_only: bool = False) -> list[Individual]:
    """First non-dominated front, sorted by (iterations, cost, digest)."""
    cand = [ind for ind in pop if ind.convergent or not convergent_only]
    if not cand:
        return []
    fronts = non_dominated_sort([ind.fitness for ind in cand])
    members = [cand[i] for i in fronts[0]]
    uniq = {}
    for ind in members:
        uniq.setdefault((ind.fitness, ind.digest), ind)
    return sorted(uniq.values(), key=lambda ind: (ind.fitness, ind.digest))


# -- search loop -------------------------------------------------------------------

@dataclass
class Snapshot:
    generation: int
    k: float
    fitness: list[tuple[float, float]]
    convergent: list[bool]
    digests: list[str]

    def to_json(self) -> str:
        return json.dumps({"generation": self.generation, "k": self.k,
                           "fitness": [list(f) for f in self.fitness],
                           "convergent": self.convergent, "digests": self.digests},
                          separators=(",", ":"))


@dataclass
class RunRecord:
    config: SearchConfig
    snapshots: list[Snapshot] = field(default_factory=list)
    population: list[Individual] = field(default_factory=list)
    instances: list[float] = field(default_factory=list)
    archives: dict = field(default_factory=dict)
    evaluations: int = 0
    # (k before, k after, genotypes before, genotypes after) per difficulty step
    adaptations: list[tuple] = field(default_factory=list)

    @property
    def final_k(self) -> float:
        return self.instances[-1]

    def front(self, convergent_only: bool = True) -> list[Individual]:
        return front_of(self.population, convergent_only)


def _snapshot(gen: int, p: ProblemInstance, pop: Sequence[Individual]) -> Snapshot:
    return Snapshot(gen, p.k, [tuple(ind.fitness) for ind in pop],
                    [ind.convergent for ind in pop], [ind.digest for ind in pop])


def generate_offspring(pop: Sequence[Individual], g: Grammar, cfg: SearchConfig, rng) -> list[Individual]:
    children: list[Individual] = []
    while len(children) < cfg.lam:
        if rng.random() < cfg.p_crossover:
            a = tournament_select(pop, rng)
            b = tournament_select(pop, rng)
            ca, cb = crossover(a.genotype, b.genotype, rng, height_limit=cfg.height_limit)
            children.append(Individual(ca))
            if len(children) < cfg.lam:
                children.append(Individual(cb))
        else:
            parent = tournament_select(pop, rng)
            child = mutate(parent.genotype, g, cfg.p_terminal, rng,
                           min_height=1, max_height=cfg.max_height,
                           height_limit=cfg.height_limit)
            children.append(Individual(child))
    return children


def initial_population(g: Grammar, cfg: SearchConfig, rng) -> list[Individual]:
    return [Individual(grow(g, cfg.min_height, cfg.max_height, rng)) for _ in range(cfg.init_pool)]


def run_search(cfg: SearchConfig, progress: Optional[Callable[[Snapshot], None]] = None,
               evaluator: Optional[Evaluator] = None) -> RunRecord:
    """Evolutionary search with difficulty doubling every ``difficulty_period`` generations."""
    cfg.validate()
    menu = ComponentMenu()
    p = build_instance(cfg.initial_k, depth=cfg.depth, min_level=cfg.depth)
    g = make_grammar(p, menu)
    record = RunRecord(cfg, instances=[p.k])
    own = evaluator is None
    ev = evaluator or Evaluator(cfg.workers, cfg.max_iterations, cfg.mode)
    try:
        tracker = PenaltyTracker()
        init_rng = np.random.default_rng([cfg.seed, 0, 0])
        pool = ev.evaluate(initial_population(g, cfg, init_rng), p, tracker)
        pop = environmental_select(pool, cfg.mu)
        archive = ParetoArchive(front_of(pool, convergent_only=True))
        record.archives[p.k] = archive
        record.snapshots.append(_snapshot(0, p, pop))
        if progress:
            progress(record.snapshots[-1])
        for i in range(cfg.generations):
            if i > 0 and cfg.difficulty_period and i % cfg.difficulty_period == 0:
                p = next_difficulty(p)
                g = make_grammar(p, menu)
                tracker = PenaltyTracker()
                old = [ind.genotype for ind in pop]
                pop = [Individual(translate(t, g)) for t in old]
                record.adaptations.append((record.final_k, p.k, old,
                                           [ind.genotype for ind in pop]))
                for ind in pop:
                    validate(ind.genotype, g)
                pop = ev.evaluate(pop, p, tracker)
                assign_rank_and_crowding(pop)
                record.instances.append(p.k)
                archive = ParetoArchive(front_of(pop, convergent_only=True))
                record.archives[p.k] = archive
            rng = np.random.default_rng([cfg.seed, i + 1, 1])
            offspring = ev.evaluate(generate_offspring(pop, g, cfg, rng), p, tracker)
            refresh_penalties(pop, tracker, cfg.max_iterations)
            archive.add(front_of(offspring, convergent_only=True))
            pop = environmental_select(pop + offspring, cfg.mu)
            record.snapshots.append(_snapshot(i + 1, p, pop))
            if progress:
                progress(record.snapshots[-1])
        record.population = pop
        record.evaluations = ev.evaluations
    finally:
        if own:
            ev.close()
    return record


# -- final evaluation ----------------------------------------------------------------

@dataclass
class BenchmarkRow:
    name: str
    reports: dict  # k -> SolveReport


def rank_by_product(front: Sequence[Individual]) -> list[Individual]:
    return sorted(front, key=lambda ind: (ind.fitness[0] * ind.fitness[1], ind.digest))


def final_evaluation(front: Iterable[Individual], ks: Sequence[float], repeats: int = 1,
                     mode: str = "work-units", top: int = 10,
                     cap: int = BENCHMARK_CAP) -> list[BenchmarkRow]:
    """Benchmark the ``top`` front members by iterations x cost on every ``k``."""
    chosen = rank_by_product(list(front))[:top]
    rows = []
    for idx, ind in enumerate(chosen, 1):
        reports = {}
        for k in ks:
            p = build_instance(k, depth=ind.genotype.depth, min_level=ind.genotype.depth)
            tree = translate(ind.genotype, make_grammar(p, ind.genotype.menu))
            reports[k] = solve_instance(tree, p, mode=mode, repeats=repeats, cap=cap)
        rows.append(BenchmarkRow(f"EP-{idx}", reports))
    return rows
