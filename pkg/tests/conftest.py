"""Shared fixtures: the cached toy stack is built once (about 6 min) and reused."""

import numpy as np
import pytest
import torch

from semattack.generator import ToyGenerator, ToyGeneratorConfig
from semattack.harness.stack import cached_stack


@pytest.fixture(scope="session")
def stack():
    torch.set_num_threads(1)
    return cached_stack()


@pytest.fixture(scope="session")
def fakes(stack):
    return stack.fakes(20, 1000)


@pytest.fixture(scope="session")
def small_generator():
    """Untrained toy generator; enough for shape and determinism checks."""
    torch.manual_seed(0)
    return ToyGenerator(ToyGeneratorConfig()).eval().requires_grad_(False)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
