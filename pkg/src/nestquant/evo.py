"""Budget-aware (1+lambda) elitist search over per-layer bit-widths.

Mutations are level switches: drop one layer to a lower ladder level and
spend the freed parameter-bits raising other layers until the budget is
hit exactly, so every candidate stays at the same total size in bits.
Offspring pass through a staged filter (small token subset first, the
full subset only for finalists); the parent is replaced only on strict
improvement, making the best fitness non-increasing by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .harness import ToyModel, kl_divergence
from .slicing import BitConfig, slice_layer


class SearchError(ValueError):
    pass


@dataclass
class SearchParams:
    generations: int = 100
    offspring: int = 64
    # (survivors, tokens) per stage; paper-style 1:8:64 token ramp at desk scale
    stages: tuple[tuple[int, int], ...] = ((16, 32), (4, 256), (1, 2048))
    initial_candidates: int = 10
    max_mutation_retries: int = 10
    seed: int = 0

    def __post_init__(self):
        survivors = [s for s, _ in self.stages]
        tokens = [t for _, t in self.stages]
        if survivors != sorted(survivors, reverse=True):
            raise SearchError("stage survivors must be non-increasing")
        if tokens != sorted(tokens):
            raise SearchError("stage tokens must be non-decreasing")
        if survivors[-1] != 1:
            raise SearchError("final stage must keep a single survivor")


@dataclass
class Candidate:
    config: BitConfig
    fitness: float | None = None


def mutate_level_switch(config: BitConfig, sizes: dict[str, int],
                        rng: np.random.Generator,
                        max_retries: int = 10) -> tuple[BitConfig, bool]:
    """One budget-preserving mutation; returns (config, stagnant flag).

    Lowers one random layer a random number of ladder levels, then raises
    other layers until the freed parameter-bits are exactly consumed.
    Attempts that cannot close the budget are retried; on exhaustion the
    input comes back unchanged with the stagnant flag set.
    """
    names = sorted(config.assignment)
    if len(names) < 2:
        raise SearchError("mutation impossible")
    ladder = config.ladder
    for _ in range(max_retries):
        work = dict(config.assignment)
        down_options = [n for n in names if any(l < work[n] for l in ladder)]
        if not down_options:
            break
        pick = down_options[rng.integers(len(down_options))]
        lower = [l for l in ladder if l < work[pick]]
        new_level = lower[rng.integers(len(lower))]
        freed = (work[pick] - new_level) * sizes[pick]
        work[pick] = new_level
        while freed > 0:
            moves = [
                (n, lvl)
                for n in names
                if n != pick
                for lvl in ladder
                if lvl > work[n] and (lvl - work[n]) * sizes[n] <= freed
            ]
            if not moves:
                break
            n, lvl = moves[rng.integers(len(moves))]
            freed -= (lvl - work[n]) * sizes[n]
            work[n] = lvl
        if freed == 0:
            return (
                BitConfig(assignment=work, ladder=ladder,
                          budget_bits=config.budget_bits),
                False,
            )
    return config, True


def fitness_kl(fp_model: ToyModel, checkpoint: Checkpoint, config,
               tokens: np.ndarray) -> float:
    """Mean output KL of the sliced model against the fp teacher."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise SearchError("need at least one calibration token")
    from .harness import eval_kl

    return eval_kl(fp_model, checkpoint, config, tokens)


class _ModelBank:
    """Dequantized layer cache + memoized fitness evaluations."""

    def __init__(self, fp_model: ToyModel, checkpoint: Checkpoint,
                 ladder, calib: np.ndarray):
        self.fp_model = fp_model
        self.calib = calib
        self.dense = {
            (ly.name, r): slice_layer(ly, r).dense()
            for ly in checkpoint.layers
            for r in ladder
        }
        self._teacher: dict[int, np.ndarray] = {}
        self._memo: dict[tuple, float] = {}

    def fitness(self, config: BitConfig, n_tokens: int) -> float:
        n = min(n_tokens, self.calib.shape[0])
        key = (config.key(), n)
        if key not in self._memo:
            data = self.calib[:n]
            if n not in self._teacher:
                self._teacher[n] = self.fp_model.forward(data)
            weights = dict(self.fp_model.weights)
            for name, r in config.assignment.items():
                weights[name] = self.dense[(name, r)]
            student = self.fp_model.forward(data, weights)
            self._memo[key] = kl_divergence(self._teacher[n], student)
        return self._memo[key]


def _feasible_ladder(ladder, master_bits: int) -> tuple[int, ...]:
    usable = tuple(l for l in sorted(set(ladder)) if l <= master_bits)
    if not usable:
        raise SearchError("infeasible budget")
    return usable


def _uniform_completed(budget: int, sizes: dict[str, int], ladder,
                       rng: np.random.Generator) -> BitConfig:
    """Closest uniform config, topped up to the exact budget if needed."""
    names = sorted(sizes)
    total = sum(sizes.values())
    base_level = max((l for l in ladder if l * total <= budget), default=None)
    if base_level is None:
        raise SearchError("infeasible budget")
    for _ in range(64):
        work = {n: base_level for n in names}
        slack = budget - base_level * total
        while slack > 0:
            moves = [
                (n, lvl)
                for n in names
                for lvl in ladder
                if lvl > work[n] and (lvl - work[n]) * sizes[n] <= slack
            ]
            if not moves:
                break
            n, lvl = moves[rng.integers(len(moves))]
            slack -= (lvl - work[n]) * sizes[n]
            work[n] = lvl
        if slack == 0:
            return BitConfig(assignment=work, ladder=ladder, budget_bits=budget)
    raise SearchError("infeasible budget")


def search(checkpoint: Checkpoint, fp_model: ToyModel, budget_avg_bits: float,
           params: SearchParams, calib: np.ndarray,
           ladder=(2, 3, 4, 6, 8)) -> tuple[Candidate, list[dict]]:
    """Evolve a per-layer bit-width config at the given average-bit budget.

    Returns the best candidate (fitness at the final-stage token count)
    and a per-generation log of the incumbent.
    """
    sizes = checkpoint.layer_sizes()
    total = sum(sizes.values())
    ladder = _feasible_ladder(ladder, checkpoint.master_bits)
    budget = int(round(budget_avg_bits * total))
    if budget < ladder[0] * total or budget > ladder[-1] * total:
        raise SearchError("infeasible budget")

    rng = np.random.default_rng(params.seed)
    bank = _ModelBank(fp_model, checkpoint, ladder, np.asarray(calib))
    final_tokens = params.stages[-1][1]

    population = [_uniform_completed(budget, sizes, ladder, rng)]
    for _ in range(params.initial_candidates):
        cfg = population[0]
        for _ in range(3):
            cfg, _stag = mutate_level_switch(cfg, sizes, rng,
                                             params.max_mutation_retries)
        population.append(cfg)

    scored = [(bank.fitness(cfg, final_tokens), i, cfg)
              for i, cfg in enumerate(population)]
    scored.sort(key=lambda t: (t[0], t[1]))
    parent_fit, _, parent = scored[0]
    log = [{"generation": 0, "best_fitness": parent_fit,
            "config": dict(parent.assignment)}]

    for gen in range(1, params.generations + 1):
        pool = []
        for _ in range(params.offspring):
            child, _stagnant = mutate_level_switch(parent, sizes, rng,
                                                   params.max_mutation_retries)
            if child.total_bits(sizes) != budget:
                raise SearchError("budget violated by mutation")
            pool.append(child)
        for survivors, tokens in params.stages:
            ranked = sorted(
                ((bank.fitness(cfg, tokens), i, cfg) for i, cfg in enumerate(pool)),
                key=lambda t: (t[0], t[1]),
            )
            pool = [cfg for _, _, cfg in ranked[:survivors]]
            champion_fit = ranked[0][0]
        if champion_fit < parent_fit:
            parent, parent_fit = pool[0], champion_fit
        log.append({"generation": gen, "best_fitness": parent_fit,
                    "config": dict(parent.assignment)})

    return Candidate(config=parent, fitness=parent_fit), log
