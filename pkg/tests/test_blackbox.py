import numpy as np
import pytest

from semattack.attributes import build_mask
from semattack.blackbox import GAConfig, Population, evolve, ga_optimize, init_population, select_inconspicuous
from semattack.errors import ConfigurationError
from semattack.latent import ChannelMask, StyleCode

from helpers import ConstantDetector

LAYOUT = (4, 4)


def seed_code():
    return StyleCode(np.arange(8, dtype=np.float32) / 10, LAYOUT)


def half_mask():
    return ChannelMask(np.array([1, 0, 1, 0, 1, 0, 1, 0]), LAYOUT)


def test_init_population_contract():
    s, mask = seed_code(), half_mask()
    pop = init_population(s, mask, 8, seed=1)
    assert len(pop) == 8
    assert pop.genomes[0].tobytes() == s.flat.tobytes()
    off = ~mask.as_bool()
    for g in pop.genomes:
        assert g[off].tobytes() == s.flat[off].tobytes()
    assert init_population(s, mask, 8, seed=1).digest() == pop.digest()
    assert init_population(s, mask, 8, seed=2).digest() != pop.digest()


def test_init_population_rejects_empty_mask():
    with pytest.raises(ConfigurationError):
        init_population(seed_code(), ChannelMask.zeros(LAYOUT), 8, seed=0)


def test_evolve_keeps_elite_and_size():
    s, mask = seed_code(), half_mask()
    pop = init_population(s, mask, 8, seed=0)
    scores = np.linspace(0.9, 0.2, 8)
    nxt = evolve(pop.subset([0, 3, 7]), scores[[0, 3, 7]], GAConfig(population=8), 0, mask)
    assert len(nxt) == 8
    assert nxt.genomes[0].tobytes() == pop.genomes[7].tobytes()
    off = ~mask.as_bool()
    assert all(g[off].tobytes() == s.flat[off].tobytes() for g in nxt.genomes)


def test_evolve_identical_parents_without_mutation():
    s, mask = seed_code(), half_mask()
    pop = Population(np.stack([s.flat] * 4), LAYOUT)
    cfg = GAConfig(population=6, mutation_rate=0.0, crossover_rate=1.0)
    nxt = evolve(pop, np.full(4, 0.7), cfg, 3, mask)
    assert all(g.tobytes() == s.flat.tobytes() for g in nxt.genomes)


def test_select_keeps_seed_and_drops_strangers(stack):
    g = stack.generator
    s = StyleCode(g.sample_styles(1, 3).numpy()[0], g.layout)
    other = g.sample_styles(1, 4).numpy()[0]
    pop = Population(np.stack([s.flat, other]), g.layout)
    images = g.synthesize(pop.genomes)
    # a stranger with similarity below tau_id is removed; the seed passes its own semantic floor
    ref = stack.identity.embed(images[0])[0]
    cfg = GAConfig(identity_threshold=0.999)
    kept, sem, sim = select_inconspicuous(pop, stack.semdisc, stack.identity, ref, g, cfg, images=images,
                                          semantic_floor=float(sem_of(stack, s)))
    assert 0 in kept and sim[0] == pytest.approx(1.0, abs=1e-6)
    assert 1 not in kept


def sem_of(stack, s):
    from semattack.semdisc import semantic_loss
    return semantic_loss(stack.semdisc, s)


def test_select_refills_with_best_semantic(stack):
    g = stack.generator
    pop = Population(g.sample_styles(4, 8).numpy(), g.layout)
    cfg = GAConfig(semantic_threshold=-1.0)         # nothing can pass
    kept, sem, _ = select_inconspicuous(pop, stack.semdisc, None, None, g, cfg)
    assert kept.tolist() == [int(np.argmin(sem))]


def test_seed_already_below_threshold(stack):
    g = stack.generator
    s = StyleCode(g.sample_styles(1, 3).numpy()[0], g.layout)
    mask = build_mask(stack.catalog, ["earring"])
    res = ga_optimize(s, g, ConstantDetector(-3.0), stack.semdisc, stack.identity, mask,
                      GAConfig(population=8))
    assert res.success and len(res.elite_scores) == 1 and res.queries <= 8


def test_budget_exhaustion_gives_partial_result(stack):
    g = stack.generator
    s = StyleCode(g.sample_styles(1, 3).numpy()[0], g.layout)
    mask = build_mask(stack.catalog, ["earring"])
    res = ga_optimize(s, g, ConstantDetector(3.0), None, None, mask, GAConfig(population=8, max_generations=50),
                      stack.channel_std, query_budget=20)
    assert not res.success and res.budget_exhausted and res.queries <= 20
    assert res.unmasked_violations(mask) == 0


def test_ga_is_deterministic_and_cached(stack):
    g = stack.generator
    s = StyleCode(g.sample_styles(1, 5).numpy()[0], g.layout)
    mask = build_mask(stack.catalog, stack.catalog.names)
    cfg = GAConfig(population=8, max_generations=4, threshold=0.01)
    a = ga_optimize(s, g, stack.detector, stack.semdisc, stack.identity, mask, cfg, stack.channel_std)
    b = ga_optimize(s, g, stack.detector, stack.semdisc, stack.identity, mask, cfg, stack.channel_std)
    assert a.digest() == b.digest()
    assert a.queries == sum(a.generation_queries)
    # the carried elite is never re-queried
    assert all(q < cfg.population for q in a.generation_queries[1:])
