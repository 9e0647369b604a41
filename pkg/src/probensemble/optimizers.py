"""Search over the fusion-weight simplex by genetic algorithm and particle
swarm, both maximizing validation accuracy of the weighted ensemble.

Every candidate is repaired onto the probability simplex after each operator
(clip negatives, renormalize, uniform fallback on all-zero), so any vector
ever evaluated is a valid weight vector. Both searches are deterministic
given their config seed, and both report a trace whose best-so-far column is
non-decreasing by construction.
"""

from __future__ import annotations

import dataclasses
import logging

import numpy as np

from .aggregation import AlignedProbabilities, weighted_fuse
from .core import uniform_simplex
from .errors import BadCutError, EmptyContextError, LengthMismatchError

log = logging.getLogger(__name__)

STREAM_GA = 11
STREAM_PSO = 12


@dataclasses.dataclass(frozen=True)
class GaConfig:
    population_size: int = 40
    generations: int = 100
    elite_count: int = 5
    mutation_prob: float = 0.3
    mutation_sigma: float = 0.1
    diversity_period: int = 10
    diversity_count: int = 5
    rng_seed: int = 0

    def __post_init__(self):
        if self.population_size < 2:
            raise ValueError("population_size must be at least 2")
        if not 0 <= self.elite_count < self.population_size:
            raise ValueError("elite_count must be smaller than population_size")
        if not 0.0 <= self.mutation_prob <= 1.0:
            raise ValueError("mutation_prob must lie in [0, 1]")
        if self.mutation_sigma < 0 or self.generations < 0:
            raise ValueError("mutation_sigma and generations must be non-negative")
        if self.diversity_period < 0 or self.diversity_count < 0:
            raise ValueError("diversity settings must be non-negative")


@dataclasses.dataclass(frozen=True)
class PsoConfig:
    swarm_size: int = 20
    iterations: int = 100
    inertia: float = 0.7
    cognitive: float = 1.5
    social: float = 1.5
    rng_seed: int = 0

    def __post_init__(self):
        if self.swarm_size < 2:
            raise ValueError("swarm_size must be at least 2")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if min(self.inertia, self.cognitive, self.social) < 0:
            raise ValueError("inertia and attraction coefficients must be non-negative")


@dataclasses.dataclass(frozen=True)
class OptimizerResult:
    weights: np.ndarray
    fitness: float
    # rows of (step, best_so_far, population_mean); row 0 is the initial
    # population before any update
    trace: tuple[tuple[int, float, float], ...]


class FitnessContext:
    """Validation alignment plus labels; fitness of a weight vector is the
    accuracy of the argmax of the weighted fusion."""

    def __init__(self, aligned: AlignedProbabilities, labels_by_id: dict[int, int]):
        if aligned.n_samples == 0 or aligned.n_models == 0:
            raise EmptyContextError("fitness context needs samples and models")
        missing = [int(s) for s in aligned.sample_ids if int(s) not in labels_by_id]
        if missing:
            raise EmptyContextError(f"no labels for sample ids {missing[:5]}")
        self.aligned = aligned
        self.labels = np.array([labels_by_id[int(s)] for s in aligned.sample_ids],
                               dtype=np.int64)

    @property
    def dim(self) -> int:
        return self.aligned.n_models

    def evaluate(self, weights: np.ndarray) -> float:
        fused = weighted_fuse(self.aligned, weights)
        preds = np.argmax(fused, axis=1)
        return float(np.mean(preds == self.labels))


def project_to_simplex(v: np.ndarray) -> np.ndarray:
    """Clip negatives to zero and renormalize; uniform on total collapse."""
    v = np.maximum(np.asarray(v, dtype=np.float64), 0.0)
    total = v.sum()
    if total <= 0.0:
        log.debug("projection collapsed to zero, substituting uniform")
        return uniform_simplex(len(v))
    return v / total


def ga_crossover(a: np.ndarray, b: np.ndarray, cut: int) -> np.ndarray:
    """One-point crossover: a's prefix up to cut, b's suffix, renormalized."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise LengthMismatchError(f"parent lengths differ: {a.shape} vs {b.shape}")
    m = len(a)
    if m < 2:
        raise BadCutError("crossover needs at least 2 coordinates")
    if not 1 <= cut < m:
        raise BadCutError(f"cut {cut} outside [1, {m - 1}]")
    child = np.concatenate([a[:cut], b[cut:]])
    return project_to_simplex(child)


def _mutate(child: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    idx = int(rng.integers(len(child)))
    out = child.copy()
    out[idx] += rng.normal(0.0, sigma)
    return project_to_simplex(out)


def ga_optimize(ctx: FitnessContext, cfg: GaConfig) -> OptimizerResult:
    """Elitist genetic search: Dirichlet init, one-point crossover between
    parents drawn uniformly from the surviving pool, single-coordinate
    Gaussian mutation, periodic replacement of the worst by fresh draws."""
    m = ctx.dim
    if m < 2:
        raise ValueError("weight search needs at least 2 models")
    rng = np.random.default_rng([cfg.rng_seed, STREAM_GA])
    pop = rng.dirichlet(np.ones(m), size=cfg.population_size)
    fit = np.array([ctx.evaluate(p) for p in pop])
    best_i = int(np.argmax(fit))  # argmax keeps the earliest index on ties
    best_w = pop[best_i].copy()
    best_f = float(fit[best_i])
    trace = [(0, best_f, float(fit.mean()))]
    for gen in range(1, cfg.generations + 1):
        elite = np.argsort(-fit, kind="stable")[:cfg.elite_count]
        children = [pop[i].copy() for i in elite]
        while len(children) < cfg.population_size:
            pa = pop[int(rng.integers(cfg.population_size))]
            pb = pop[int(rng.integers(cfg.population_size))]
            cut = int(rng.integers(1, m))
            child = ga_crossover(pa, pb, cut)
            if rng.random() < cfg.mutation_prob:
                child = _mutate(child, cfg.mutation_sigma, rng)
            children.append(child)
        pop = np.stack(children)
        fit = np.array([ctx.evaluate(p) for p in pop])
        if cfg.diversity_period > 0 and gen % cfg.diversity_period == 0 and cfg.diversity_count:
            worst = np.argsort(fit, kind="stable")[:cfg.diversity_count]
            for i in worst:
                pop[i] = rng.dirichlet(np.ones(m))
                fit[i] = ctx.evaluate(pop[i])
        gen_best = int(np.argmax(fit))
        if fit[gen_best] > best_f:
            best_f = float(fit[gen_best])
            best_w = pop[gen_best].copy()
        trace.append((gen, best_f, float(fit.mean())))
    return OptimizerResult(weights=best_w, fitness=best_f, trace=tuple(trace))


def pso_velocity(velocity: np.ndarray, position: np.ndarray, pbest: np.ndarray,
                 gbest: np.ndarray, inertia: float, cognitive: float, social: float,
                 r1: float, r2: float) -> np.ndarray:
    """v' = inertia * v + cognitive * r1 * (pbest - x) + social * r2 * (gbest - x).

    r1 and r2 are scalars applied to the whole particle, one independent pair
    per particle per iteration.
    """
    velocity = np.asarray(velocity, dtype=np.float64)
    position = np.asarray(position, dtype=np.float64)
    return (inertia * velocity
            + cognitive * r1 * (np.asarray(pbest, dtype=np.float64) - position)
            + social * r2 * (np.asarray(gbest, dtype=np.float64) - position))


def pso_optimize(ctx: FitnessContext, cfg: PsoConfig) -> OptimizerResult:
    """Global-best particle swarm on the simplex with synchronous updates.

    Positions start from Dirichlet(1,...,1) draws with zero velocity; each
    iteration moves every particle, projects back to the simplex, then
    refreshes personal and global bests on strict improvement only, so the
    earliest finder of a tied fitness keeps the record.
    """
    m = ctx.dim
    if m < 2:
        raise ValueError("weight search needs at least 2 models")
    rng = np.random.default_rng([cfg.rng_seed, STREAM_PSO])
    pos = rng.dirichlet(np.ones(m), size=cfg.swarm_size)
    vel = np.zeros_like(pos)
    fit = np.array([ctx.evaluate(p) for p in pos])
    pbest = pos.copy()
    pbest_fit = fit.copy()
    g_i = int(np.argmax(fit))
    gbest = pos[g_i].copy()
    gbest_fit = float(fit[g_i])
    trace = [(0, gbest_fit, float(fit.mean()))]
    for it in range(1, cfg.iterations + 1):
        for i in range(cfg.swarm_size):
            r1 = float(rng.random())
            r2 = float(rng.random())
            vel[i] = pso_velocity(vel[i], pos[i], pbest[i], gbest, cfg.inertia,
                                  cfg.cognitive, cfg.social, r1, r2)
            pos[i] = project_to_simplex(pos[i] + vel[i])
        fit = np.array([ctx.evaluate(p) for p in pos])
        improved = fit > pbest_fit
        pbest[improved] = pos[improved]
        pbest_fit[improved] = fit[improved]
        cand = int(np.argmax(pbest_fit))
        if pbest_fit[cand] > gbest_fit:
            gbest_fit = float(pbest_fit[cand])
            gbest = pbest[cand].copy()
        trace.append((it, gbest_fit, float(fit.mean())))
    return OptimizerResult(weights=gbest, fitness=gbest_fit, trace=tuple(trace))
