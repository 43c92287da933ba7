"""NSGA-II search over Qcolor channel ratios (two minimised objectives)."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .attacks import QCOLOR_BOX

log = logging.getLogger(__name__)

N_GENES = 3
WORST_FITNESS = (2.0, 2.0)


@dataclass
class Individual:
    genes: np.ndarray
    fitness: tuple | None = None
    rank: int = -1
    crowding: float = 0.0

    def __post_init__(self):
        self.genes = np.asarray(self.genes, dtype=np.float64)
        if self.genes.shape != (N_GENES,):
            raise ValueError(f"genes must have {N_GENES} entries")


@dataclass
class NsgaConfig:
    population: int = 20
    generations: int = 10
    tournament: int = 2
    eta_c: float = 15.0  # math.inf makes crossover copy the parents
    sigma_m: float = 0.05
    mutation_prob: float = 1.0 / 3.0
    crossover_prob: float = 1.0
    seed: int = 0
    n_jobs: int = 1
    box: tuple = QCOLOR_BOX

    def __post_init__(self):
        if self.population < 4 or self.population % 2:
            raise ValueError("population must be an even integer >= 4")
        if self.generations < 1:
            raise ValueError("generations must be >= 1")
        if self.tournament < 1:
            raise ValueError("tournament size must be >= 1")
        for name in ("mutation_prob", "crossover_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.eta_c < 0 or self.sigma_m < 0:
            raise ValueError("eta_c and sigma_m must be non-negative")


def dominates(a, b) -> bool:
    """Pareto dominance for minimisation."""
    return a[0] <= b[0] and a[1] <= b[1] and (a[0] < b[0] or a[1] < b[1])


def _fitness_array(pop) -> np.ndarray:
    if isinstance(pop, np.ndarray):
        return np.asarray(pop, dtype=np.float64)
    out = []
    for ind in pop:
        fit = ind.fitness if isinstance(ind, Individual) else ind
        if fit is None:
            raise ValueError("individual has not been evaluated")
        out.append(fit)
    return np.asarray(out, dtype=np.float64).reshape(len(out), 2)


def fast_nondominated_sort(pop) -> list:
    """Fronts as lists of indices; front 0 is the non-dominated set."""
    f = _fitness_array(pop)
    n = len(f)
    le = np.all(f[:, None, :] <= f[None, :, :], axis=2)
    lt = np.any(f[:, None, :] < f[None, :, :], axis=2)
    dom = le & lt  # dom[i, j]: i dominates j
    counts = dom.sum(axis=0)
    fronts = []
    current = [i for i in range(n) if counts[i] == 0]
    while current:
        fronts.append(current)
        nxt = []
        for i in current:
            for j in np.flatnonzero(dom[i]):
                counts[j] -= 1
                if counts[j] == 0:
                    nxt.append(int(j))
        current = sorted(nxt)
    return fronts


def crowding_distance(front) -> np.ndarray:
    """Crowding distance per member of one front (boundaries get +inf)."""
    f = _fitness_array(front)
    n = len(f)
    if n == 0:
        raise ValueError("crowding distance of an empty front")
    dist = np.zeros(n)
    if n <= 2:
        return np.full(n, math.inf)
    for m in range(f.shape[1]):
        order = np.argsort(f[:, m], kind="stable")
        vals = f[order, m]
        dist[order[0]] = dist[order[-1]] = math.inf
        span = vals[-1] - vals[0]
        if span == 0:
            continue
        dist[order[1:-1]] += (vals[2:] - vals[:-2]) / span
    return dist


def assign_rank_and_crowding(pop: list) -> list:
    fronts = fast_nondominated_sort(pop)
    for r, front in enumerate(fronts):
        d = crowding_distance([pop[i] for i in front])
        for i, di in zip(front, d):
            pop[i].rank = r
            pop[i].crowding = float(di)
    return fronts


def _better(a: Individual, b: Individual) -> bool:
    return a.rank < b.rank or (a.rank == b.rank and a.crowding > b.crowding)


def tournament_select(pop: list, size: int, rng) -> Individual:
    picks = rng.choice(len(pop), size=size, replace=False) if size <= len(pop) else rng.integers(len(pop), size=size)
    best = pop[picks[0]]
    for i in picks[1:]:
        if _better(pop[i], best):
            best = pop[i]
    return best


def sbx_crossover(p1: np.ndarray, p2: np.ndarray, eta: float, rng, box) -> tuple:
    """Simulated binary crossover per gene; ``eta = inf`` returns copies."""
    if math.isinf(eta):
        return p1.copy(), p2.copy()
    u = rng.uniform(size=p1.shape)
    beta = np.where(u <= 0.5, (2 * u) ** (1 / (eta + 1)), (1 / (2 * (1 - u))) ** (1 / (eta + 1)))
    c1 = 0.5 * ((1 + beta) * p1 + (1 - beta) * p2)
    c2 = 0.5 * ((1 - beta) * p1 + (1 + beta) * p2)
    lo, hi = box
    return np.clip(c1, lo, hi), np.clip(c2, lo, hi)


def gaussian_mutation(genes: np.ndarray, sigma: float, prob: float, rng, box) -> np.ndarray:
    hit = rng.uniform(size=genes.shape) < prob
    noise = rng.normal(0.0, sigma, size=genes.shape) if sigma > 0 else np.zeros_like(genes)
    lo, hi = box
    return np.clip(np.where(hit, genes + noise, genes), lo, hi)


def evolve_generation(pop: list, cfg: NsgaConfig, rng) -> list:
    """Offspring of size N by tournament selection, SBX and Gaussian mutation."""
    children = []
    for _ in range(cfg.population // 2):
        a = tournament_select(pop, cfg.tournament, rng)
        b = tournament_select(pop, cfg.tournament, rng)
        if rng.uniform() < cfg.crossover_prob:
            c1, c2 = sbx_crossover(a.genes, b.genes, cfg.eta_c, rng, cfg.box)
        else:
            c1, c2 = a.genes.copy(), b.genes.copy()
        for c in (c1, c2):
            children.append(Individual(gaussian_mutation(c, cfg.sigma_m, cfg.mutation_prob, rng, cfg.box)))
    return children


def select_survivors(combined: list, n: int) -> list:
    """Fill with whole fronts, then the most crowded-apart members of the next front."""
    fronts = assign_rank_and_crowding(combined)
    survivors = []
    for front in fronts:
        if len(survivors) + len(front) <= n:
            survivors.extend(combined[i] for i in front)
            continue
        rest = sorted(front, key=lambda i: -combined[i].crowding)
        survivors.extend(combined[i] for i in rest[:n - len(survivors)])
        break
    assign_rank_and_crowding(survivors)
    return survivors


def individual_seed(seed: int, generation: int, index: int) -> int:
    """Independent RNG stream for one fitness evaluation."""
    return int(np.random.SeedSequence([seed, generation, index]).generate_state(1)[0])


def _evaluate_all(inds: list, evaluator, cfg: NsgaConfig, generation: int) -> None:
    todo = [(k, ind) for k, ind in enumerate(inds) if ind.fitness is None]
    if not todo:
        return
    seeds = [individual_seed(cfg.seed, generation, k) for k, _ in todo]
    if cfg.n_jobs == 1:
        results = [evaluator(ind.genes, s) for (_, ind), s in zip(todo, seeds)]
    else:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=cfg.n_jobs)(delayed(evaluator)(ind.genes, s) for (_, ind), s in zip(todo, seeds))
    for (_, ind), fit in zip(todo, results):
        ind.fitness = (float(fit[0]), float(fit[1]))
        if not all(np.isfinite(ind.fitness)):
            raise ValueError(f"non-finite fitness {ind.fitness} for genes {ind.genes}")


@dataclass
class NsgaResult:
    best: Individual
    front: list
    population: list
    history: list = field(default_factory=list)  # per generation: list of front-0 fitness tuples
    records: list = field(default_factory=list)  # per generation, per individual: dump rows


def _dump(pop: list, generation: int) -> list:
    return [dict(generation=generation, r1=ind.genes[0], r2=ind.genes[1], r3=ind.genes[2],
                 f1=ind.fitness[0], f2=ind.fitness[1], rank=ind.rank, crowding=ind.crowding) for ind in pop]


def nsga2_run(cfg: NsgaConfig, evaluator) -> NsgaResult:
    """Evolve Qcolor ratios; ``evaluator(genes, seed) -> (f1, f2)``, both minimised."""
    rng = np.random.default_rng(cfg.seed)
    lo, hi = cfg.box
    pop = [Individual(rng.uniform(lo, hi, size=N_GENES)) for _ in range(cfg.population)]
    _evaluate_all(pop, evaluator, cfg, 0)
    fronts = assign_rank_and_crowding(pop)
    history = [[pop[i].fitness for i in fronts[0]]]
    records = _dump(pop, 0)
    for gen in range(1, cfg.generations + 1):
        children = evolve_generation(pop, cfg, rng)
        _evaluate_all(children, evaluator, cfg, gen)
        pop = select_survivors(pop + children, cfg.population)
        front0 = [ind for ind in pop if ind.rank == 0]
        history.append([ind.fitness for ind in front0])
        records.extend(_dump(pop, gen))
        log.info("generation %d: front-0 size %d, best f1 %.4f", gen, len(front0), min(f[0] for f in history[-1]))
    front0 = [ind for ind in pop if ind.rank == 0]
    best = min(front0, key=lambda ind: (ind.fitness[0] + ind.fitness[1], ind.fitness[0]))
    return NsgaResult(best, front0, pop, history, records)


def hypervolume_2d(points, ref) -> float:
    """Area dominated by ``points`` and bounded by the reference point (minimisation)."""
    pts = np.asarray([p for p in points if p[0] < ref[0] and p[1] < ref[1]], dtype=np.float64)
    if len(pts) == 0:
        return 0.0
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]
    area, best_f2 = 0.0, ref[1]
    for f1, f2 in pts:
        if f2 < best_f2:
            area += (ref[0] - f1) * (best_f2 - f2)
            best_f2 = f2
    return float(area)


@dataclass
class SurrogateFitness:
    """Fitness of Qcolor genes from a short poisoned training run.

    ``f1 = 1 - ASR`` of a surrogate model trained for a few epochs on a
    poisoned slice of ``train_set``; ``f2 = 1 - mean SSIM`` of the trigger on a
    fixed probe set. Both lie in [0, 2] and are minimised.
    """

    train_set: object
    holdout: object
    arch: object
    poison_rate: float = 0.1
    target_label: int = 0
    epochs: int = 2
    n_train: int = 2000
    n_probe: int = 32
    batch_size: int = 64
    learning_rate: float = 5e-3

    def __call__(self, genes, seed: int) -> tuple:
        from .attacks import PoisonConfig, Qcolor, poison_dataset
        from .metrics import attack_success_rate, mean_ssim
        from .model import HybridModel, TrainConfig, TrainingDivergence, train

        spec = Qcolor(*(float(g) for g in genes))
        f2 = 1.0 - mean_ssim(self.holdout.images[:self.n_probe], spec)
        subset = self.train_set.head(self.n_train)
        poisoned = poison_dataset(subset, spec, PoisonConfig(self.poison_rate, self.target_label, seed))
        model = HybridModel.initialize(self.arch, seed)
        cfg = TrainConfig(self.epochs, self.batch_size, self.learning_rate, "adam", seed, True)
        try:
            train(model, poisoned, cfg)
        except TrainingDivergence as exc:
            log.warning("surrogate training diverged for genes %s: %s", np.round(genes, 4), exc)
            return WORST_FITNESS
        asr = attack_success_rate(model, self.holdout, spec, self.target_label)
        return 1.0 - asr / 100.0, f2
