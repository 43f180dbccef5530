"""Score-only genetic search over masked style channels.

Fitness is the detector's fake probability (lower is fitter). Each generation
is filtered for plausibility (semantic loss) and identity before scoring; the
previous elite bypasses the filter so the best score can never get worse.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .detectors import QueryLedger, cosine
from .errors import ConfigurationError, InvalidInputError, QueryBudgetError
from .latent import ChannelMask, StyleCode
from .semdisc import semantic_loss
from .whitebox import AttackResult

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GAConfig:
    population: int = 32
    threshold: float = 0.5            # stop once the elite scores below this
    max_generations: int = 100
    mutation_rate: float = 0.2
    mutation_scale: float = 0.1       # in channel standard deviations
    crossover_rate: float = 0.7
    tournament_size: int = 3
    semantic_threshold: float = float(np.log(2.0))
    identity_threshold: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.population < 4:
            raise ConfigurationError("population must be >= 4")
        if not 0 < self.threshold < 1:
            raise ConfigurationError("threshold must lie in (0, 1)")
        for name in ("mutation_rate", "crossover_rate"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigurationError(f"{name} must lie in [0, 1]")
        if self.max_generations < 1 or self.tournament_size < 1 or self.mutation_scale < 0:
            raise ConfigurationError("max_generations and tournament_size must be >= 1, mutation_scale >= 0")


@dataclass
class Population:
    genomes: np.ndarray               # (n, C) float32
    layout: tuple[int, ...]
    scores: dict[str, float] = field(default_factory=dict)   # genome digest -> detector score

    def __len__(self):
        return len(self.genomes)

    def styles(self) -> list[StyleCode]:
        return [StyleCode(g, self.layout) for g in self.genomes]

    @staticmethod
    def genome_digest(genome: np.ndarray) -> str:
        return hashlib.sha256(np.ascontiguousarray(genome, dtype=np.float32).tobytes()).hexdigest()

    def digests(self) -> list[str]:
        return [self.genome_digest(g) for g in self.genomes]

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.genomes).tobytes()).hexdigest()

    def subset(self, keep) -> "Population":
        return Population(self.genomes[np.asarray(keep, dtype=int)], self.layout, self.scores)


def _noise(rng, shape, mask_bool, std, scale):
    return (scale * std * rng.standard_normal(shape)).astype(np.float32) * mask_bool


def init_population(s: StyleCode, mask: ChannelMask, n: int, seed: int, channel_std=None,
                    scale: float = 0.1) -> Population:
    """``n`` genomes: the seed code itself followed by ``n - 1`` Gaussian
    perturbations of its masked channels (``scale`` channel stds)."""
    if n < 4:
        raise ConfigurationError("population must be >= 4")
    mask.check_matches(s)
    if mask.count == 0:
        raise ConfigurationError("mask selects no channels")
    on = mask.as_bool()
    std = np.ones(s.num_channels, np.float32) if channel_std is None else np.asarray(channel_std, np.float32)
    rng = np.random.default_rng(seed)
    base = np.broadcast_to(s.flat, (n, s.num_channels))
    moved = base + _noise(rng, base.shape, on, std, scale)
    genomes = np.where(on, moved, base).astype(np.float32)
    genomes[0] = s.flat
    return Population(genomes, s.layout)


def select_inconspicuous(pop: Population, ds, identity_model, reference, generator, cfg: GAConfig,
                         images=None, semantic_floor: float | None = None, exempt=()):
    """Keep genomes whose semantic loss and identity similarity pass the thresholds.

    ``reference`` is the image (or its embedding) identity is compared with.
    The effective semantic threshold is ``max(cfg.semantic_threshold,
    semantic_floor)``. Indices in ``exempt`` are kept unconditionally. If no
    genome survives, the one with the lowest semantic loss is kept. Returns
    ``(kept_indices, semantic_losses, similarities)``.
    """
    n = len(pop)
    if n == 0:
        raise InvalidInputError("empty population")
    sem = np.zeros(n) if ds is None else semantic_loss(ds, pop.genomes)
    sem_limit = cfg.semantic_threshold if semantic_floor is None else max(cfg.semantic_threshold, semantic_floor)
    ok = sem <= sem_limit
    if identity_model is not None:
        if images is None:
            images = generator.synthesize(pop.genomes)
        ref = np.asarray(reference)
        ref_emb = identity_model.embed(ref)[0] if ref.ndim == 3 else ref
        sim = cosine(identity_model.embed(images), ref_emb[None])
        ok &= sim >= cfg.identity_threshold
    else:
        sim = np.ones(n)
    ok[list(exempt)] = True
    kept = np.flatnonzero(ok)
    if len(kept) == 0:
        kept = np.array([int(np.argmin(sem))])
    return kept, sem, sim


def _tournament(rng, fitness: np.ndarray, k: int) -> int:
    picks = rng.integers(0, len(fitness), size=k)
    return int(picks[np.argmin(fitness[picks])])


def evolve(pop: Population, scores, cfg: GAConfig, seed, mask: ChannelMask, channel_std=None,
           n: int | None = None) -> Population:
    """Next generation of size ``n``: the elite copied unchanged, the rest bred
    by tournament selection, uniform crossover and Gaussian mutation, all on
    masked channels only. ``seed`` may be an int or a ``numpy`` Generator."""
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != len(pop):
        raise InvalidInputError("scores must align with genomes")
    n = cfg.population if n is None else n
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    on = mask.as_bool()
    c = pop.genomes.shape[1]
    std = np.ones(c, np.float32) if channel_std is None else np.asarray(channel_std, np.float32)
    elite = int(np.argmin(scores))
    children = [pop.genomes[elite].copy()]
    while len(children) < n:
        a = pop.genomes[_tournament(rng, scores, cfg.tournament_size)]
        b = pop.genomes[_tournament(rng, scores, cfg.tournament_size)]
        if rng.random() < cfg.crossover_rate:
            child = np.where(rng.random(c) < 0.5, a, b)
        else:
            child = a.copy()
        hit = (rng.random(c) < cfg.mutation_rate) & on
        mutated = child + (cfg.mutation_scale * std * rng.standard_normal(c)).astype(np.float32)
        child = np.where(hit, mutated, child)
        # parents agree with the seed off-mask, so this keeps those bits intact
        children.append(np.where(on, child, pop.genomes[elite]).astype(np.float32))
    return Population(np.stack(children), pop.layout, pop.scores)


def _score_cached(pop: Population, images: np.ndarray, keep: np.ndarray, detector, ledger: QueryLedger):
    """Scores for genomes ``keep``; only digests not already cached are queried."""
    digests = pop.digests()
    todo, seen = [], set()
    for i in keep:
        d = digests[i]
        if d not in pop.scores and d not in seen:
            todo.append(i)
            seen.add(d)
    if todo:
        fresh = detector.score(images[todo], ledger)
        for i, v in zip(todo, fresh):
            pop.scores[digests[i]] = float(v)
    return np.array([pop.scores[digests[i]] for i in keep]), len(todo)


def ga_optimize(s0: StyleCode, generator, detector, ds, identity_model, mask: ChannelMask, cfg: GAConfig,
                channel_std=None, query_budget: int | None = None, reference=None) -> AttackResult:
    """GA loop from a seed style code. ``reference`` defaults to ``G(s0)``."""
    mask.check_matches(s0)
    ledger = QueryLedger(query_budget)
    rng = np.random.default_rng([cfg.seed, 1])
    pop = init_population(s0, mask, cfg.population, cfg.seed, channel_std, cfg.mutation_scale)
    ref_img = generator.synthesize(s0) if reference is None else np.asarray(reference)
    ref_emb = identity_model.embed(ref_img)[0] if identity_model is not None else None
    floor = None if ds is None else semantic_loss(ds, s0)

    elite_scores, gen_queries = [], []
    best, best_score = s0.flat, np.inf
    exempt = [0]                       # seed genome first, then each carried elite
    success = exhausted = False
    for gen in range(cfg.max_generations):
        images = generator.synthesize(pop.genomes)
        keep, _, _ = select_inconspicuous(pop, ds, identity_model, ref_emb, generator, cfg,
                                          images=images, semantic_floor=floor, exempt=exempt)
        try:
            scores, fresh = _score_cached(pop, images, keep, detector, ledger)
        except QueryBudgetError:
            exhausted = True
            break
        gen_queries.append(fresh)
        e = int(np.argmin(scores))
        if scores[e] < best_score:
            best, best_score = pop.genomes[keep[e]].copy(), float(scores[e])
        elite_scores.append(best_score)
        if best_score < cfg.threshold:
            success = True
            break
        if gen == cfg.max_generations - 1:
            break
        pop = evolve(pop.subset(keep), scores, cfg, rng, mask, channel_std, cfg.population)
        exempt = [0]
    style = StyleCode(best, s0.layout)
    final = best_score if np.isfinite(best_score) else float("nan")
    return AttackResult(
        success=success, image=generator.synthesize(style), style=style, initial_style=s0,
        iterations=len(elite_scores), queries=ledger.count, trajectory=list(elite_scores),
        final_score=final, budget_exhausted=exhausted, elite_scores=list(elite_scores),
        generation_queries=gen_queries,
    )


def blackbox_attack(x_fake, generator, encoder, detector, ds, identity_model, mask: ChannelMask, stats,
                    cfg: GAConfig, metric, channel_std=None, inversion=None,
                    query_budget: int | None = None) -> list[AttackResult]:
    """Invert each image, then run the GA on its style code (image ``i`` uses seed ``cfg.seed + i``)."""
    from .inversion import InversionConfig, fine_tune_latent

    x = np.asarray(x_fake, dtype=np.float32)
    batch = x if x.ndim == 4 else x[None]
    inv = fine_tune_latent(batch, generator, encoder, stats, inversion or InversionConfig(), metric)
    styles = generator.affine_to_style(inv.wplus)
    results = []
    for i, flat in enumerate(styles):
        cfg_i = replace(cfg, seed=cfg.seed + i)
        results.append(ga_optimize(StyleCode(flat, generator.layout), generator, detector, ds, identity_model,
                                   mask, cfg_i, channel_std, query_budget))
    return results
