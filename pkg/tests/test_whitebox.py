import numpy as np
import pytest

from semattack.attributes import AttributeCatalog, build_mask
from semattack.detectors import LinearProbeDetector, QueryLedger, external_detector_adapter
from semattack.errors import ConfigurationError, ContractError
from semattack.latent import ChannelMask, StyleCode
from semattack.whitebox import (
    WhiteboxConfig, fgsm_attack, pgd_attack, random_sampling_restart, whitebox_attack, whitebox_optimize,
)

from helpers import ConstantDetector, RecordingGenerator, ScriptedDetector, probe_direction


@pytest.fixture(scope="module")
def styles(stack):
    return stack.generator.sample_styles(3, 55).numpy()


def test_config_validation():
    with pytest.raises(ConfigurationError):
        WhiteboxConfig(max_iters=0)
    with pytest.raises(ConfigurationError):
        WhiteboxConfig(rollback=300)
    with pytest.raises(ConfigurationError):
        WhiteboxConfig(target=2)


def test_already_on_target_needs_no_steps(stack, styles):
    mask = build_mask(stack.catalog, stack.catalog.names)
    res = whitebox_optimize(styles, stack.generator, ConstantDetector(-5.0), None, mask,
                            WhiteboxConfig(), stack.channel_std)
    assert all(r.success and r.iterations == 0 and r.queries == 1 for r in res)


def test_empty_mask_leaves_code_unchanged(stack, styles):
    cfg = WhiteboxConfig(max_iters=5, rollback=0)
    res = whitebox_optimize(styles, stack.generator, ConstantDetector(5.0), stack.semdisc,
                            ChannelMask.zeros(stack.generator.layout), cfg, stack.channel_std,
                            stack.catalog, stack.catalog.names)
    for r, s in zip(res, styles):
        assert not r.success and r.iterations == 5
        assert r.style.flat.tobytes() == s.tobytes()


def test_requires_gradients(stack, styles):
    det = external_detector_adapter("http://127.0.0.1:9/")
    mask = build_mask(stack.catalog, ["mouth_open"])
    with pytest.raises(ContractError):
        whitebox_optimize(styles, stack.generator, det, None, mask, WhiteboxConfig(), stack.channel_std)
    with pytest.raises(ContractError):
        fgsm_attack(np.zeros((32, 32, 3), np.float32), det, 0.1)


def test_masked_steps_only(stack, styles):
    mask = build_mask(stack.catalog, ["earring", "eyeglasses"])
    res = whitebox_optimize(styles, stack.generator, stack.detector, stack.semdisc, mask,
                            WhiteboxConfig(max_iters=10, rollback=0), stack.channel_std)
    for r in res:
        assert r.unmasked_violations(mask) == 0
        assert r.queries == len(r.trajectory)


def test_batch_matches_single(stack, styles):
    mask = build_mask(stack.catalog, stack.catalog.names)
    cfg = WhiteboxConfig(max_iters=20, rollback=0)
    batch = whitebox_optimize(styles, stack.generator, stack.detector, stack.semdisc, mask, cfg,
                              stack.channel_std)
    single = whitebox_optimize(styles[1:2], stack.generator, stack.detector, stack.semdisc, mask, cfg,
                               stack.channel_std)
    assert batch[1].iterations == single[0].iterations
    assert np.allclose(batch[1].style.flat, single[0].style.flat, atol=1e-5)


def test_restart_population_size_and_guard():
    cat = AttributeCatalog((4, 4), {n: ((0, i),) for i, n in enumerate("abcd")})
    s = StyleCode(np.zeros(8), (4, 4))
    ledger = QueryLedger()
    elite, best, size = random_sampling_restart(
        s, cat, list("abcd"), ScriptedDetector([0.9] * 12), ledger, RecordingGenerator(), 0.5,
        np.ones(8), np.random.default_rng(0))
    assert size == 12 and ledger.count == 12
    assert elite is None and best == 0.9


def test_restart_returns_lower_scoring_code():
    cat = AttributeCatalog((4, 4), {"a": ((0, 1), (1, 0)), "b": ((0, 2),)})
    s = StyleCode(np.zeros(8), (4, 4))
    scores = [0.9] * 6
    scores[4] = 0.3
    gen = RecordingGenerator()
    elite, best, _ = random_sampling_restart(
        s, cat, ["a", "b"], ScriptedDetector(scores), QueryLedger(), gen, 0.5, np.ones(8),
        np.random.default_rng(0))
    assert best == 0.3
    assert np.array_equal(elite.flat, gen.calls[0][4])
    # candidate 4 perturbs attribute b only
    assert np.flatnonzero(elite.flat).tolist() == cat.indices("b")


def test_restarts_roll_back_and_count(stack, styles):
    g = stack.generator
    direction, c = probe_direction(g, 5, 16)
    det = LinearProbeDetector(direction, bias=-1e6, gain=1.0)     # always fake
    mask = build_mask(stack.catalog, stack.catalog.names)
    cfg = WhiteboxConfig(max_iters=3, rollback=0, max_restarts=2)
    res = whitebox_optimize(styles[:1], g, det, None, mask, cfg, stack.channel_std, stack.catalog,
                            stack.catalog.names)[0]
    # saturated scores never improve strictly, so the first restart gives up
    assert not res.success and res.restarts == 1 and res.iterations == 3


def test_fgsm_and_pgd_contracts(stack, rng):
    x = stack.fakes(4, 7)
    assert np.array_equal(fgsm_attack(x, stack.detector, 0.0), x)
    adv = pgd_attack(x, stack.detector, 8 / 255, 2 / 255, 5)
    assert np.abs(adv - x).max() <= 8 / 255 + 1e-6
    assert adv.min() >= 0 and adv.max() <= 1
    one = pgd_attack(x, stack.detector, 4 / 255, 4 / 255, 1)
    assert np.array_equal(one, fgsm_attack(x, stack.detector, 4 / 255))


def test_random_start_pgd_is_seeded(stack):
    x = stack.fakes(2, 8)
    a = pgd_attack(x, stack.detector, 8 / 255, 2 / 255, 3, random_start=True, seed=1)
    b = pgd_attack(x, stack.detector, 8 / 255, 2 / 255, 3, random_start=True, seed=1)
    assert np.array_equal(a, b)
    assert np.abs(a - x).max() <= 8 / 255 + 1e-6


def test_whitebox_attack_pipeline(stack):
    x = stack.fakes(2, 1000)
    mask = build_mask(stack.catalog, stack.catalog.names)
    res = whitebox_attack(x, stack.generator, stack.encoder, stack.detector, stack.semdisc, mask,
                          stack.stats, WhiteboxConfig(), stack.metric, stack.channel_std,
                          catalog=stack.catalog, selection=stack.catalog.names)
    for r in res:
        assert r.success and r.final_score < 0.5
        assert r.image.shape == (32, 32, 3)
        assert r.unmasked_violations(mask) == 0
