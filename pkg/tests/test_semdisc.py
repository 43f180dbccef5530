import math

import numpy as np
import pytest
import torch

from semattack.errors import ConfigurationError, InvalidInputError
from semattack.latent import StyleCode
from semattack.semdisc import (
    SemanticDiscriminator, SemDiscTrainConfig, semantic_loss, separation_auc, torch_semantic_loss,
    train_semantic_discriminator, uniform_style_codes,
)
from semattack.toyfaces import generate_toy_dataset


def constant_logit(layout, value):
    d = SemanticDiscriminator(layout)
    with torch.no_grad():
        for p in d.net.parameters():
            p.zero_()
        d.net[-1].bias.fill_(value)
    return d.eval()


def test_loss_at_zero_logit_is_ln2():
    d = constant_logit((4, 4), 0.0)
    assert semantic_loss(d, StyleCode(np.zeros(8), (4, 4))) == pytest.approx(math.log(2), abs=1e-12)


def test_loss_vanishes_for_large_logit():
    d = constant_logit((4, 4), 50.0)
    assert semantic_loss(d, StyleCode(np.zeros(8), (4, 4))) < 1e-20
    d = constant_logit((4, 4), -50.0)
    assert semantic_loss(d, StyleCode(np.zeros(8), (4, 4))) == pytest.approx(50.0)


def test_torch_and_numpy_losses_agree(rng):
    d = SemanticDiscriminator((4, 4)).eval()
    s = rng.normal(size=(6, 8)).astype(np.float32)
    a = semantic_loss(d, s)
    b = torch_semantic_loss(d, torch.from_numpy(s)).detach().numpy()
    assert np.allclose(a, b, atol=1e-6)


def test_layout_mismatch_rejected():
    d = SemanticDiscriminator((4, 4))
    with pytest.raises(InvalidInputError):
        d.logits(StyleCode(np.zeros(8), (2, 6)))


def test_auc_helper():
    assert separation_auc([2, 3], [0, 1]) == 1.0
    assert separation_auc([0, 1], [2, 3]) == 0.0
    assert separation_auc([1, 1], [1, 1]) == 0.5


@pytest.fixture(scope="module")
def tiny_training(stack):
    images, _ = generate_toy_dataset(64, 9)
    return stack, images


def test_zero_gamma_records_zero_penalty(tiny_training):
    stack, images = tiny_training
    cfg = SemDiscTrainConfig(gamma=0.0, steps=5, batch_size=8, log_every=0)
    _, hist = train_semantic_discriminator(stack.generator, stack.encoder, images, cfg, seed=0,
                                           return_history=True)
    assert hist["penalty"] == [0.0] * 5


def test_training_deterministic_and_encoder_untouched(tiny_training):
    stack, images = tiny_training
    before = stack.encoder.digest()
    cfg = SemDiscTrainConfig(steps=4, batch_size=8, log_every=0)
    a = train_semantic_discriminator(stack.generator, stack.encoder, images, cfg, seed=2)
    b = train_semantic_discriminator(stack.generator, stack.encoder, images, cfg, seed=2)
    assert a.digest() == b.digest()
    assert stack.encoder.digest() == before
    assert a.meta["gamma"] == 10.0 and a.meta["seed"] == 2


def test_invalid_config(tiny_training):
    stack, images = tiny_training
    with pytest.raises(ConfigurationError):
        train_semantic_discriminator(stack.generator, stack.encoder, images, SemDiscTrainConfig(gamma=-1))


def test_save_load_round_trip(stack, tmp_path):
    stack.semdisc.save(tmp_path / "ds", seed=0)
    back = SemanticDiscriminator.load(tmp_path / "ds")
    assert back.digest() == stack.semdisc.digest()
    assert back.meta == stack.semdisc.meta


def test_trained_discriminator_prefers_mapped_codes(stack):
    g, d = stack.generator, stack.semdisc
    mapped = g.sample_styles(1000, 777).numpy()
    uniform = uniform_style_codes(g, 1000, 778)
    pos, neg = d.logits(mapped), d.logits(uniform)
    assert pos.mean() > neg.mean()
    assert separation_auc(pos, neg) > 0.9
