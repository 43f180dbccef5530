"""Small stand-ins shared by the attack tests."""

import numpy as np
import torch

from semattack.detectors import Detector, TorchDetector
from semattack.latent import StyleCode


class ConstantDetector(TorchDetector):
    """Differentiable detector with a fixed logit."""

    def __init__(self, logit):
        super().__init__()
        self.logit = float(logit)

    def forward(self, x):
        return x.flatten(1).sum(1) * 0.0 + self.logit


class ScriptedDetector(Detector):
    """Gradient-free detector that returns queued scores in order."""

    def __init__(self, scores):
        self.queue = list(scores)

    def score(self, images, ledger=None):
        n = len(images)
        if ledger is not None:
            ledger.charge(n)
        out, self.queue = self.queue[:n], self.queue[n:]
        return np.asarray(out, dtype=np.float64)


class RecordingGenerator:
    """Generator stand-in that remembers the codes it was asked to render."""

    layout = (4, 4)

    def __init__(self):
        self.calls = []

    def synthesize(self, s):
        flat = s.flat if isinstance(s, StyleCode) else np.asarray(s)
        self.calls.append(flat.copy())
        shape = (32, 32, 3) if flat.ndim == 1 else (len(flat), 32, 32, 3)
        return np.zeros(shape, np.float32)


def probe_direction(generator, layer, channel):
    """Pixel direction read out by a linear probe for one last-layer shift channel.

    Returns ``(direction, flat_index)``; ``direction`` is the RGB projection of
    that feature map broadcast over every pixel, negated so that raising the
    channel lowers the probe's logit.
    """
    f = generator.config.features
    j = channel - f
    w = generator.to_rgb.weight[:, j, 0, 0].detach()
    direction = -w[:, None, None].expand(3, 32, 32).reshape(-1)
    return direction.clone(), sum(generator.layout[:layer]) + channel


def images_of(generator, styles):
    with torch.no_grad():
        return generator.torch_synthesize(torch.as_tensor(np.asarray(styles, np.float32)))
