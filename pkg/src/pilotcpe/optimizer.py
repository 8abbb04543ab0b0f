"""
Genetic-algorithm search for pilot distributions minimizing the smoothed
phase-error objective ``sum_k tr(M_{k|N})``.

Two integer encodings are supported:

* unstructured -- ``L`` linear positions in ``[1, MN]``; duplicates are
  repaired by re-sampling unused slots;
* structured -- ``[delta_1, tau_1, ..., delta_M, tau_M]`` subject to
  ``delta_i >= 2``, ``tau_i >= 1`` and a span bound on the last pilot
  (see :func:`optimize_structured`); infeasible spacings are clamped.

Every individual is feasible at all times (repair, no penalties), so the
fitness is the plain objective. Fitness values are cached per rendered
mask.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .model import SystemConfig
from .patterns import (
    PilotMask,
    StructuredDistribution,
    UnstructuredDistribution,
    structured_to_mask,
    unstructured_to_mask,
    validate,
)
from .rng import GA, derive_rng
from .smoother import mask_objective, mask_objective_batch


@dataclass
class GaConfig:
    population_size: int = 200
    generations: int = 300
    tournament_size: int = 4
    crossover_rate: float = 0.9
    mutation_rate: float | None = None  # None -> 1 / genome length
    elitism_count: int = 2
    stall_generations: int = 50
    rng_seed: int = 0
    local_search: bool = True  # integer hill-climb on the GA winner

    def __post_init__(self):
        for name in ("population_size", "generations", "tournament_size", "stall_generations"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.elitism_count < 0 or self.elitism_count > self.population_size:
            raise ValueError("elitism_count must lie in [0, population_size]")
        rates = [self.crossover_rate] + ([] if self.mutation_rate is None else [self.mutation_rate])
        if any(not 0.0 <= r <= 1.0 for r in rates):
            raise ValueError("rates must lie in [0, 1]")


@dataclass
class Encoding:
    """Integer genome layout: bounds and feasibility repair."""

    lower: np.ndarray
    upper: np.ndarray
    repair: Callable[[np.ndarray, np.random.Generator], np.ndarray]
    render: Callable[[np.ndarray], np.ndarray]  # (P, G) -> (P, M, N) bool
    neighbors: Callable[[np.ndarray], np.ndarray]  # (G,) -> (K, G), all feasible

    @property
    def length(self) -> int:
        return self.lower.size

    def random(self, n: int, rng: np.random.Generator) -> np.ndarray:
        pop = rng.integers(self.lower, self.upper + 1, size=(n, self.length))
        return self.repair(pop, rng)


@dataclass
class OptimizationResult:
    kind: str
    best_distribution: object
    best_mask: PilotMask
    best_J: float
    history: list
    evaluations: int
    generations_run: int
    config: SystemConfig
    ga_config: GaConfig
    wall_time_s: float = 0.0
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        if isinstance(self.best_distribution, UnstructuredDistribution):
            dist = {"type": "unstructured", "positions": list(self.best_distribution.positions)}
        else:
            dist = {"type": "structured", **self.best_distribution.to_dict()}
        return {
            "kind": self.kind,
            "config": self.config.to_dict(),
            "ga_config": asdict(self.ga_config),
            "best_distribution": dist,
            "best_J": self.best_J,
            "history": list(self.history),
            "evaluations": self.evaluations,
            "generations_run": self.generations_run,
            "seed": self.ga_config.rng_seed,
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def _tournament(fitness: np.ndarray, size: int, count: int, rng: np.random.Generator) -> np.ndarray:
    contenders = rng.integers(0, fitness.size, size=(count, size))
    return contenders[np.arange(count), np.argmin(fitness[contenders], axis=1)]


def ga_step(population: np.ndarray, fitness: np.ndarray, ga: GaConfig, encoding: Encoding,
            rng: np.random.Generator) -> np.ndarray:
    """One generation: elitism, tournament selection, uniform crossover,
    uniform-reset mutation, repair."""
    population = np.asarray(population)
    fitness = np.asarray(fitness, dtype=float)
    if population.shape[0] == 0:
        raise ValueError("empty population")
    P, G = population.shape
    n_elite = min(ga.elitism_count, P)
    elite = population[np.argsort(fitness, kind="stable")[:n_elite]]
    n_child = P - n_elite
    if n_child == 0:
        return elite.copy()

    # all random draws for the generation happen here, in a fixed order
    pa = population[_tournament(fitness, ga.tournament_size, n_child, rng)]
    pb = population[_tournament(fitness, ga.tournament_size, n_child, rng)]
    do_cross = rng.random(n_child) < ga.crossover_rate
    take_b = rng.random((n_child, G)) < 0.5
    rate = (1.0 / G) if ga.mutation_rate is None else ga.mutation_rate
    mutate = rng.random((n_child, G)) < rate
    fresh = rng.integers(encoding.lower, encoding.upper + 1, size=(n_child, G))

    children = np.where(do_cross[:, None] & take_b, pb, pa)
    children = np.where(mutate, fresh, children)
    children = encoding.repair(children, rng)
    return np.vstack([elite, children])


def run_ga(encoding: Encoding, config: SystemConfig, ga: GaConfig):
    """Generic GA loop. Returns (best genome, best J, history, evaluations, generations)."""
    rng = derive_rng(ga.rng_seed, GA)
    Q = config.process_noise_cov().matrix
    cache: dict[bytes, float] = {}

    def evaluate(pop):
        grids = encoding.render(pop)
        keys = [np.packbits(g).tobytes() for g in grids]
        todo = {}
        for key, g in zip(keys, grids):
            if key not in cache and key not in todo:
                todo[key] = g
        if todo:
            values = mask_objective_batch(np.stack(list(todo.values())), config, Q)
            cache.update(zip(todo.keys(), values.tolist()))
        return np.array([cache[k] for k in keys])

    pop = encoding.random(ga.population_size, rng)
    fit = evaluate(pop)
    best_idx = int(np.argmin(fit))
    best, best_J = pop[best_idx].copy(), float(fit[best_idx])
    history = [best_J]
    stall = 0
    gen = 0
    for gen in range(1, ga.generations + 1):
        pop = ga_step(pop, fit, ga, encoding, rng)
        fit = evaluate(pop)
        i = int(np.argmin(fit))
        if fit[i] < best_J:
            best, best_J = pop[i].copy(), float(fit[i])
            stall = 0
        else:
            stall += 1
        history.append(best_J)
        if stall >= ga.stall_generations:
            break
    if ga.local_search:
        best, best_J = _hill_climb(best, best_J, encoding, evaluate)
    return best, best_J, history, len(cache), gen


def _hill_climb(best, best_J, encoding, evaluate):
    # steepest descent over the encoding's unit moves; deterministic
    while True:
        cand = encoding.neighbors(best)
        if cand.shape[0] == 0:
            return best, best_J
        fit = evaluate(cand)
        i = int(np.argmin(fit))
        if fit[i] >= best_J:
            return best, best_J
        best, best_J = cand[i].copy(), float(fit[i])


def unstructured_encoding(M: int, N: int, L: int) -> Encoding:
    size = M * N

    def repair(pop, rng):
        pop = np.clip(pop, 1, size)
        out = np.empty_like(pop)
        for r, row in enumerate(pop):
            used, seen = set(), []
            dup = 0
            for p in row:
                if p in used:
                    dup += 1
                else:
                    used.add(int(p))
                    seen.append(int(p))
            if dup:
                free = np.setdiff1d(np.arange(1, size + 1), np.fromiter(used, int))
                seen += rng.choice(free, size=dup, replace=False).tolist()
            out[r] = np.sort(seen)
        return out

    def render(pop):
        grids = np.zeros((pop.shape[0], M, N), dtype=bool)
        p = pop - 1
        b = np.repeat(np.arange(pop.shape[0]), pop.shape[1])
        grids[b, (p % M).ravel(), (p // M).ravel()] = True
        return grids

    def neighbors(g):
        # move one pilot to an adjacent slot in time (+-M) or channel (+-1)
        taken = set(g.tolist())
        out = []
        for j, p in enumerate(g):
            i = (p - 1) % M
            for step, ok in ((M, True), (-M, True), (1, i < M - 1), (-1, i > 0)):
                q = p + step
                if ok and 1 <= q <= size and q not in taken:
                    c = g.copy()
                    c[j] = q
                    out.append(np.sort(c))
        return np.array(out, dtype=int).reshape(-1, L)

    return Encoding(np.ones(L, dtype=int), np.full(L, size, dtype=int), repair, render, neighbors)


def structured_encoding(M: int, N: int, kappa: int, span: str = "block") -> Encoding:
    """Genome ``[delta_1, tau_1, ...]``.

    ``span="strict"`` enforces ``delta + tau (kappa - 1) <= N``; ``span="block"``
    only requires the last pilot ``delta + tau (kappa - 2)`` to lie in the block.
    """
    if span not in SPAN_MODES:
        raise ValueError(f"span must be one of {SPAN_MODES}")
    reach = span_terms(kappa, span)
    d_hi = N - reach if kappa >= 2 else N
    t_hi = max((N - 2) // max(reach, 1), 1)
    lower = np.tile([2, 1], M)
    upper = np.tile([d_hi, t_hi], M)

    def repair(pop, rng):
        pop = np.clip(pop, lower, upper)
        if kappa >= 2 and reach >= 1:
            d = pop[:, 0::2]
            pop[:, 1::2] = np.clip((N - d) // reach, 1, None).clip(None, pop[:, 1::2])
        return pop

    tail = np.arange(max(kappa - 1, 0))

    def render(pop):
        P = pop.shape[0]
        grids = np.zeros((P, M, N), dtype=bool)
        if kappa == 0:
            return grids
        grids[:, :, 0] = True
        if kappa >= 2:
            pos = pop[:, 0::2, None] + pop[:, 1::2, None] * tail  # (P, M, kappa-1), 1-based
            b = np.broadcast_to(np.arange(P)[:, None, None], pos.shape)
            c = np.broadcast_to(np.arange(M)[None, :, None], pos.shape)
            grids[b, c, pos - 1] = True
        return grids

    # per-channel moves (d_delta, d_tau): shift, respace, respace keeping
    # the last pilot fixed, respace keeping the first tail pilot fixed
    k2 = max(kappa - 2, 0)
    moves = [(1, 0), (-1, 0), (0, 1), (0, -1), (-k2, 1), (k2, -1)]

    def neighbors(g):
        out = []
        for ch in range(M):
            for dd, dt in moves:
                c = g.copy()
                c[2 * ch] += dd
                c[2 * ch + 1] += dt
                if np.all((lower <= c) & (c <= upper)):
                    c = repair(c[None], None)[0]
                    if not np.array_equal(c, g):
                        out.append(c)
        if not out:
            return np.empty((0, g.size), dtype=int)
        return np.unique(np.array(out, dtype=int), axis=0)

    return Encoding(lower, upper, repair, render, neighbors)


SPAN_MODES = ("strict", "block")


def span_terms(kappa: int, span: str) -> int:
    """Number of spacings between ``delta`` and the bound ``N``."""
    return max(kappa - 1, 0) if span == "strict" else max(kappa - 2, 0)


def optimize_unstructured(config: SystemConfig, L: int, ga: GaConfig | None = None) -> OptimizationResult:
    """GA over ``L`` free pilot positions."""
    ga = ga or GaConfig()
    M, N = config.num_channels, config.block_length
    if not 1 <= L <= M * N:
        raise ValueError(f"L must lie in [1, {M * N}], got {L}")
    start = time.perf_counter()
    enc = unstructured_encoding(M, N, L)
    best, best_J, history, evals, gens = run_ga(enc, config, ga)
    dist = UnstructuredDistribution(best.tolist())
    mask = unstructured_to_mask(dist, M, N)
    return _finish("unstructured", dist, mask, best_J, history, evals, gens, config, ga, start)


def optimize_structured(config: SystemConfig, kappa: int, ga: GaConfig | None = None,
                        span: str = "block") -> OptimizationResult:
    """GA over per-channel offsets and spacings with ``kappa`` pilots per channel.

    The search space is ``delta_i >= 2``, ``tau_i >= 1`` and, with the default
    ``span="block"``, ``delta_i + tau_i (kappa - 2) <= N``: every integer
    pattern whose pilots all fall inside the block. ``span="strict"`` uses the
    tighter ``delta_i + tau_i (kappa - 1) <= N``, which keeps a gap of at
    least ``tau_i`` after the last pilot and excludes S1-S4-like patterns.
    """
    ga = ga or GaConfig()
    M, N = config.num_channels, config.block_length
    if kappa < 1 or kappa > N or (kappa >= 2 and 2 + span_terms(kappa, span) > N):
        raise ValueError(
            f"no feasible structured distribution for kappa={kappa}, N={N} "
            f"(need delta_i >= 2, tau_i >= 1, delta_i + tau_i * {span_terms(kappa, span)} <= N)"
        )
    start = time.perf_counter()
    enc = structured_encoding(M, N, kappa, span)
    best, best_J, history, evals, gens = run_ga(enc, config, ga)
    dist = StructuredDistribution.from_genome(best, kappa)
    mask = structured_to_mask(dist, M, N)
    res = _finish("structured", dist, mask, best_J, history, evals, gens, config, ga, start, span)
    res.metadata["span"] = span
    return res


def _finish(kind, dist, mask, best_J, history, evals, gens, config, ga, start, span="block"):
    problems = [v for v in validate(dist, config.num_channels, config.block_length, strict=True, span=span)
                if v.severity == "error"]
    if problems:
        raise RuntimeError(f"optimizer produced an infeasible distribution: {problems}")
    check = mask_objective(mask, config)
    if abs(check - best_J) > 1e-9 * max(1.0, abs(best_J)):
        raise RuntimeError(f"objective mismatch on re-evaluation: {check} vs {best_J}")
    return OptimizationResult(kind, dist, mask, best_J, history, evals, gens, config, ga,
                              time.perf_counter() - start)
