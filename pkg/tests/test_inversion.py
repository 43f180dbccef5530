import numpy as np
import pytest

from semattack.errors import InvalidInputError, OptimizationError
from semattack.inversion import InversionConfig, fine_tune_latent, reconstruction_loss
from semattack.toyfaces import generate_toy_dataset


@pytest.fixture(scope="module")
def faces():
    images, _ = generate_toy_dataset(40, 321)
    return images


def test_reconstruction_loss_identity_and_symmetry(stack, faces):
    m = stack.metric
    x, y = faces[0], faces[1]
    assert reconstruction_loss(x, x, m) == 0.0
    assert reconstruction_loss(x, y, m) == pytest.approx(reconstruction_loss(y, x, m), rel=1e-6)
    with pytest.raises(InvalidInputError):
        reconstruction_loss(x, x[:16], m)


def test_reconstruction_loss_grows_with_noise(stack, faces):
    noise = np.random.default_rng(0).normal(size=faces[0].shape).astype(np.float32)
    losses = [reconstruction_loss(faces[0], faces[0] + eps * noise, stack.metric) for eps in (0.01, 0.05, 0.1)]
    assert losses[0] < losses[1] < losses[2]


def test_encode_deterministic(stack, faces):
    a = stack.encoder.encode(faces[:3])
    assert a.shape == (3, 6, 16)
    assert np.array_equal(a, stack.encoder.encode(faces[:3]))


def test_encoder_beats_random_codes(stack, faces):
    g, m = stack.generator, stack.metric
    wp = stack.encoder.encode(faces)
    rand = g.map_latent(np.random.default_rng(1).normal(size=(len(faces), 6, 16)).reshape(-1, 16)
                        .astype(np.float32)).reshape(len(faces), 6, 16)
    enc_img = g.synthesize(g.affine_to_style(wp))
    rand_img = g.synthesize(g.affine_to_style(rand))
    wins = [reconstruction_loss(x, a, m) < reconstruction_loss(x, b, m)
            for x, a, b in zip(faces, enc_img, rand_img)]
    assert np.mean(wins) >= 0.95


def test_zero_iterations_returns_encoder_output(stack, faces):
    res = fine_tune_latent(faces[:2], stack.generator, stack.encoder, stack.stats,
                           InversionConfig(iterations=0), stack.metric)
    assert np.array_equal(res.wplus, stack.encoder.encode(faces[:2]))
    assert res.trajectory.shape == (1, 2)


def test_best_iterate_never_worse(stack, faces):
    res = fine_tune_latent(faces[:4], stack.generator, stack.encoder, stack.stats,
                           InversionConfig(iterations=20, lambda_prior=1e-3), stack.metric)
    assert np.all(res.final_objective <= res.initial_objective)
    assert np.allclose(res.final_objective, res.trajectory.min(0))
    assert res.trajectory.shape == (21, 4)


def test_non_finite_loss_raises_with_trajectory(stack, faces):
    bad = faces[:1].copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(OptimizationError) as info:
        fine_tune_latent(bad, stack.generator, stack.encoder, stack.stats,
                         InversionConfig(iterations=3), stack.metric)
    assert info.value.trajectory == []    # failed on the encoder iterate itself
