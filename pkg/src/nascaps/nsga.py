"""Multi-objective evolutionary search over architecture genotypes.

Implements the standard fast non-dominated sort with crowding-distance
truncation (NSGA-II) on four objectives: accuracy is maximized, energy,
latency and memory are minimized. Variation is one-point tail-swap crossover
plus single-parameter mutation, both followed by shape repair so every
candidate that reaches evaluation is structurally valid.
"""

from __future__ import annotations

import math
import random
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Set, Tuple

from . import genotype as gt
from .genotype import Genotype, LayerKind, SearchSpace


class CrossoverFailure(Exception):
    """No structurally valid cut pair was found within the retry budget."""


@dataclass(frozen=True)
class FitnessVector:
    """One point in objective space. Accuracy is a fraction in [0, 1]."""

    accuracy: float
    energy_mj: float
    latency_ms: float
    memory_kib: float

    def minimized(self) -> Tuple[float, float, float, float]:
        """All four objectives oriented for minimization."""
        return (-self.accuracy, self.energy_mj, self.latency_ms, self.memory_kib)


@dataclass(frozen=True)
class Individual:
    genotype: Genotype
    id: str
    generation_born: int
    fitness: Optional[FitnessVector] = None

    @staticmethod
    def from_genotype(g: Genotype, generation_born: int = 0) -> "Individual":
        return Individual(g, gt.genotype_id(g), generation_born)


Front = List[Individual]


@dataclass(frozen=True)
class SearchConfig:
    parent_size: int = 10
    offspring_size: int = 10
    generations: int = 20
    mutation_prob: float = 0.10
    wall_clock_limit_s: Optional[float] = None
    seed: int = 0
    crossover_retries: int = 32
    duplicate_retries: int = 8

    @staticmethod
    def from_file(path: str) -> "SearchConfig":
        from .hwmodel import _parse_kv_file

        return SearchConfig(**_parse_kv_file(path, SearchConfig()))


@dataclass
class SearchResult:
    front: Front
    population: Front
    log: List[dict]
    generations_run: int
    truncated: bool


def dominates(a: FitnessVector, b: FitnessVector) -> bool:
    """True when a is no worse than b everywhere and better somewhere."""
    av, bv = a.minimized(), b.minimized()
    return all(x <= y for x, y in zip(av, bv)) and any(x < y for x, y in zip(av, bv))


def _require_fitness(pop: Sequence[Individual]) -> None:
    for ind in pop:
        if ind.fitness is None:
            raise ValueError(f"individual {ind.id} has no fitness; evaluate first")


def non_dominated_sort(pop: Sequence[Individual]) -> List[Front]:
    """Partition a population into successive non-dominated fronts."""
    _require_fitness(pop)
    n = len(pop)
    dominated_by: List[List[int]] = [[] for _ in range(n)]
    domination_count = [0] * n

    for i in range(n):
        for j in range(i + 1, n):
            if dominates(pop[i].fitness, pop[j].fitness):
                dominated_by[i].append(j)
                domination_count[j] += 1
            elif dominates(pop[j].fitness, pop[i].fitness):
                dominated_by[j].append(i)
                domination_count[i] += 1

    fronts: List[List[int]] = [[i for i in range(n) if domination_count[i] == 0]]
    current = fronts[0]
    while current:
        nxt: List[int] = []
        for i in current:
            for j in dominated_by[i]:
                domination_count[j] -= 1
                if domination_count[j] == 0:
                    nxt.append(j)
        if nxt:
            fronts.append(sorted(nxt))
        current = nxt

    return [[pop[i] for i in front] for front in fronts]


def crowding_distance(front: Sequence[Individual]) -> Dict[str, float]:
    """Crowding distance per individual id within one front.

    Boundary individuals on any objective get infinity; interior ones sum the
    normalized gap between their neighbours over all objectives. An objective
    with zero range contributes nothing.
    """
    _require_fitness(front)
    dist: Dict[str, float] = {ind.id: 0.0 for ind in front}
    n_objectives = 4
    for m in range(n_objectives):
        ranked = sorted(front, key=lambda ind: ind.fitness.minimized()[m])
        lo = ranked[0].fitness.minimized()[m]
        hi = ranked[-1].fitness.minimized()[m]
        dist[ranked[0].id] = math.inf
        dist[ranked[-1].id] = math.inf
        if hi == lo:
            continue
        for pos in range(1, len(ranked) - 1):
            ind = ranked[pos]
            if dist[ind.id] == math.inf:
                continue
            prev_v = ranked[pos - 1].fitness.minimized()[m]
            next_v = ranked[pos + 1].fitness.minimized()[m]
            dist[ind.id] += (next_v - prev_v) / (hi - lo)
    return dist


# ---------------------------------------------------------------------------
# variation operators


def crossover(
    pa: Genotype,
    pb: Genotype,
    space: SearchSpace,
    rng: random.Random,
    retries: int = 32,
) -> Tuple[Genotype, Genotype]:
    """Tail-swap two parents at independent cut points and repair.

    Cut points are drawn from [1, len-1] of each parent. A candidate child is
    kept only when its kind sequence satisfies the structural rules and repair
    succeeds; otherwise a fresh cut pair is drawn. After ``retries`` failed
    attempts CrossoverFailure is raised (callers typically fall back to
    cloning the parents).

    The head parent donates the genome-level terms: resize always, the skip
    position when its merge pair lies entirely inside the head slice. A skip
    lying entirely in the tail slice is remapped; anything else is dropped.
    """
    for _ in range(retries):
        cut_a = rng.randint(1, len(pa.layers) - 1)
        cut_b = rng.randint(1, len(pb.layers) - 1)
        child_one = _assemble_child(pa, pb, cut_a, cut_b)
        child_two = _assemble_child(pb, pa, cut_b, cut_a)
        if gt.structural_violations(child_one.layers) or gt.structural_violations(
            child_two.layers
        ):
            continue
        try:
            return gt.repair(child_one, space), gt.repair(child_two, space)
        except gt.RejectedConfiguration:
            continue
    raise CrossoverFailure(
        f"no valid cut pair within {retries} attempts "
        f"(parents of {len(pa.layers)} and {len(pb.layers)} layers)"
    )


def _assemble_child(head: Genotype, tail: Genotype, cut_head: int, cut_tail: int) -> Genotype:
    layers = head.layers[:cut_head] + tail.layers[cut_tail:]
    skip: Optional[int] = None
    if head.skip_position is not None and head.skip_position + 1 < cut_head:
        skip = head.skip_position
    elif tail.skip_position is not None and tail.skip_position >= cut_tail:
        skip = tail.skip_position - cut_tail + cut_head
    return Genotype(layers, skip, head.resize_flag)


_MUTABLE_PARAMS = {
    LayerKind.CONV: ("kernel_size", "stride_size"),
    LayerKind.CONV_CAPS: ("kernel_size", "stride_size", "caps_out"),
    LayerKind.CONV_CAPS_3D: ("kernel_size", "stride_size", "caps_out"),
    LayerKind.CAPS_CELL: ("kernel_size", "stride_size", "caps_out"),
    LayerKind.CLASS_CAPS: ("caps_out",),
    LayerKind.FLAT_CAPS: (),
}


def _resample_excluding(current, pool: Sequence, rng: random.Random):
    options = [v for v in pool if v != current]
    return rng.choice(options) if options else current


def mutate(
    g: Genotype, p_m: float, space: SearchSpace, rng: random.Random
) -> Genotype:
    """With probability p_m, resample one parameter of one layer and repair.

    Candidate fields — every parameter a layer's kind exposes, plus the
    genome-level skip position — are visited in random order until one
    yields a repaired genotype that differs from the input. Resampling
    always excludes the current value, so each attempt differs from the
    input in exactly one field before repair; repair may then rechain the
    downstream shapes. A kernel that cannot fit its input or a skip with no
    shape-matching partner is undone by repair, so such draws fall through
    to the next candidate instead of silently diluting the mutation rate.
    Only when no candidate survives (degenerate spaces) is the input
    returned unmutated.
    """
    if rng.random() >= p_m:
        return g

    candidates: List[Tuple[int, str]] = [(-1, "skip_position")]
    for li, layer in enumerate(g.layers):
        candidates.extend((li, p) for p in _MUTABLE_PARAMS[layer.kind])
    rng.shuffle(candidates)

    for li, param in candidates:
        if param == "skip_position":
            domain: List[Optional[int]] = [None] + list(range(len(g.layers) - 1))
            new_skip = _resample_excluding(g.skip_position, domain, rng)
            mutated = Genotype(g.layers, new_skip, g.resize_flag)
        else:
            layer = g.layers[li]
            if param == "kernel_size":
                pool: Sequence[int] = space.kernel_choices
            elif param == "stride_size":
                pool = space.stride_choices
            else:
                lo, hi = space.caps_out_range
                pool = range(lo, hi + 1)
            new_value = _resample_excluding(getattr(layer, param), pool, rng)
            new_layer = replace(layer, **{param: new_value})
            mutated = Genotype(
                g.layers[:li] + (new_layer,) + g.layers[li + 1 :],
                g.skip_position,
                g.resize_flag,
            )

        if mutated == g:
            continue
        try:
            repaired = gt.repair(mutated, space)
        except gt.RejectedConfiguration:
            continue
        if repaired != g:
            return repaired
    return g


# ---------------------------------------------------------------------------
# generational loop


def _select(pool: Front, size: int) -> Front:
    """Whole-front filling, crowding-distance truncation on the split front."""
    chosen: Front = []
    for front in non_dominated_sort(pool):
        if len(chosen) + len(front) <= size:
            chosen.extend(front)
            continue
        dist = crowding_distance(front)
        ranked = sorted(front, key=lambda ind: -dist[ind.id])  # stable: pool order breaks ties
        chosen.extend(ranked[: size - len(chosen)])
        break
    return chosen


def _draw_candidate(
    parents: Front, space: SearchSpace, cfg: SearchConfig, rng: random.Random
) -> Genotype:
    if len(parents) >= 2:
        pa, pb = rng.sample(parents, 2)
    else:
        pa = pb = parents[0]
    try:
        child, _ = crossover(
            pa.genotype, pb.genotype, space, rng, retries=cfg.crossover_retries
        )
    except CrossoverFailure:
        child = pa.genotype
    return mutate(child, cfg.mutation_prob, space, rng)


def _make_offspring(
    parents: Front,
    space: SearchSpace,
    cfg: SearchConfig,
    rng: random.Random,
    known_ids: Set[str],
    generation: int,
) -> Front:
    out: Front = []
    batch_ids: Set[str] = set()
    while len(out) < cfg.offspring_size:
        child = _draw_candidate(parents, space, cfg, rng)
        for _ in range(cfg.duplicate_retries):
            cid = gt.genotype_id(child)
            if cid not in known_ids and cid not in batch_ids:
                break
            child = _draw_candidate(parents, space, cfg, rng)
        ind = Individual.from_genotype(child, generation)
        batch_ids.add(ind.id)
        out.append(ind)
    return out


def run_search(
    space: SearchSpace,
    cfg: SearchConfig,
    evaluator,
    hw=None,
) -> SearchResult:
    """Run the generational loop and return the final front and run log.

    ``evaluator`` must expose ``evaluate_batch(individuals, hw, generation)``
    returning the same individuals with fitness attached, a ``log`` list of
    run-log records, and ``known_ids()`` with every id seen so far (used to
    steer offspring away from duplicates). The wall-clock limit is checked at
    generation boundaries; exceeding it stops the search early and marks the
    result truncated.
    """
    from .hwmodel import HardwareConfig

    hw = hw or HardwareConfig()
    rng = random.Random(cfg.seed)
    started = time.monotonic()

    parents: Front = []
    seen: Set[str] = set()
    for _ in range(cfg.parent_size):
        g = gt.random_genotype(space, rng)
        for _ in range(cfg.duplicate_retries):
            if gt.genotype_id(g) not in seen:
                break
            g = gt.random_genotype(space, rng)
        ind = Individual.from_genotype(g, 0)
        seen.add(ind.id)
        parents.append(ind)
    parents = evaluator.evaluate_batch(parents, hw, generation=0)

    truncated = False
    generations_run = 0
    for gen in range(1, cfg.generations + 1):
        if (
            cfg.wall_clock_limit_s is not None
            and time.monotonic() - started > cfg.wall_clock_limit_s
        ):
            truncated = True
            break
        offspring = _make_offspring(
            parents, space, cfg, rng, evaluator.known_ids(), gen
        )
        offspring = evaluator.evaluate_batch(offspring, hw, generation=gen)
        parents = _select(parents + offspring, cfg.parent_size)
        generations_run = gen

    front = sorted(non_dominated_sort(parents)[0], key=lambda ind: ind.id)
    return SearchResult(
        front=front,
        population=parents,
        log=list(evaluator.log),
        generations_run=generations_run,
        truncated=truncated,
    )
