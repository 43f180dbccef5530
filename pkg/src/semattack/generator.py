"""Style-based generator contract and a small trainable toy implementation.

The toy network mirrors StyleGAN's structure at 32x32: a mapping MLP ending in
LeakyReLU(0.2), one affine per synthesis layer producing the style code, and
a synthesis stack that modulates instance-normalised feature maps with
per-channel scale and shift.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_state, parameter_digest, read_manifest, save_checkpoint, seeded_generator
from .errors import ConfigurationError, InvalidInputError, TrainingError
from .imaging import to_numpy, to_tensor
from .latent import StyleCode

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ToyGeneratorConfig:
    d_z: int = 16
    d_w: int = 16
    num_layers: int = 6
    style_channels: int = 32
    image_size: int = 32
    mapping_depth: int = 3
    features: int = 16

    def __post_init__(self):
        if self.style_channels != 2 * self.features:
            raise ConfigurationError("style_channels must equal 2*features (scale + shift)")
        if self.image_size != 4 * 2 ** self._upsamples():
            raise ConfigurationError("image_size must be 4 * 2**k for the layer plan")

    def _upsamples(self):
        return sum(self.upsample_plan())

    def upsample_plan(self) -> tuple[bool, ...]:
        # 4x4 const, then upsample on layers 1, 3, 5 for six layers -> 32x32
        plan = [False, True, False, True, False, True]
        if self.num_layers != len(plan):
            raise ConfigurationError("toy synthesis plan is defined for 6 layers")
        return tuple(plan)


class GeneratorContract:
    """What the attack and inversion code needs from a generator.

    Numpy-facing methods are convenience wrappers around the ``torch_*`` ones.
    Implementations must keep synthesis deterministic for a given style code.
    """

    d_z: int
    d_w: int
    num_layers: int
    layout: tuple[int, ...]
    has_gradients: bool = True

    @property
    def num_channels(self) -> int:
        return int(sum(self.layout))

    def torch_map(self, z: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def torch_affine(self, wp: torch.Tensor) -> torch.Tensor:
        """``(N, L, d_w) -> (N, C)`` flat style codes."""
        raise NotImplementedError

    def torch_synthesize(self, s: torch.Tensor) -> torch.Tensor:
        """``(N, C) -> (N, 3, H, W)`` images in [0, 1]."""
        raise NotImplementedError

    def map_latent(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float32)
        single = z.ndim == 1
        z2 = z[None] if single else z
        if z2.ndim != 2 or z2.shape[1] != self.d_z:
            raise InvalidInputError(f"z must have dimension {self.d_z}, got shape {z.shape}")
        with torch.no_grad():
            w = self.torch_map(torch.from_numpy(z2)).numpy()
        return w[0] if single else w

    def affine_to_style(self, wp):
        """W+ ``(L, d_w)`` -> :class:`StyleCode`; batched ``(N, L, d_w)`` -> ``(N, C)`` array."""
        wp = np.asarray(wp, dtype=np.float32)
        single = wp.ndim == 2
        wp3 = wp[None] if single else wp
        if wp3.ndim != 3 or wp3.shape[1:] != (self.num_layers, self.d_w):
            raise InvalidInputError(f"w+ must be (L={self.num_layers}, d_w={self.d_w}), got {wp.shape}")
        with torch.no_grad():
            s = self.torch_affine(torch.from_numpy(wp3)).numpy()
        return StyleCode(s[0], self.layout) if single else s

    def synthesize(self, s):
        """StyleCode -> ``(H, W, 3)`` image; ``(N, C)`` array -> ``(N, H, W, 3)``."""
        if isinstance(s, StyleCode):
            if s.layout != self.layout:
                raise InvalidInputError(f"style layout {s.layout} != generator layout {self.layout}")
            flat, single = s.flat[None], True
        else:
            flat, single = np.asarray(s, dtype=np.float32), False
            if flat.ndim != 2 or flat.shape[1] != self.num_channels:
                raise InvalidInputError(f"style batch must be (N, {self.num_channels})")
        with torch.no_grad():
            img = to_numpy(self.torch_synthesize(torch.from_numpy(np.ascontiguousarray(flat))))
        return img[0] if single else img

    def sample_styles(self, n: int, seed: int) -> torch.Tensor:
        """Style codes of freshly mapped z, one w broadcast to all layers."""
        z = torch.randn(n, self.d_z, generator=seeded_generator(seed))
        with torch.no_grad():
            w = self.torch_map(z)
            return self.torch_affine(w[:, None, :].expand(-1, self.num_layers, -1))


class _Mapping(nn.Module):
    def __init__(self, d_z, d_w, depth):
        super().__init__()
        dims = [d_z] + [d_w] * depth
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, z):
        x = z
        for layer in self.layers:
            x = F.leaky_relu(layer(x), 0.2)
        return x


class ToyGenerator(nn.Module, GeneratorContract):
    def __init__(self, config: ToyGeneratorConfig = ToyGeneratorConfig()):
        nn.Module.__init__(self)
        self.config = config
        self.d_z, self.d_w, self.num_layers = config.d_z, config.d_w, config.num_layers
        self.layout = (config.style_channels,) * config.num_layers
        self.mapping = _Mapping(config.d_z, config.d_w, config.mapping_depth)
        self.affines = nn.ModuleList(nn.Linear(config.d_w, config.style_channels)
                                     for _ in range(config.num_layers))
        for a in self.affines:
            nn.init.normal_(a.weight, std=0.5 / config.d_w ** 0.5)
            nn.init.zeros_(a.bias)
        f = config.features
        self.const = nn.Parameter(torch.randn(1, f, 4, 4))
        # the full-resolution layer uses a 1x1 conv; 3x3 at 32x32 dominates CPU cost
        last = config.num_layers - 1
        self.convs = nn.ModuleList(nn.Conv2d(f, f, 1 if i == last else 3, padding=0 if i == last else 1)
                                   for i in range(config.num_layers))
        self.to_rgb = nn.Conv2d(f, 3, 1)
        self.plan = config.upsample_plan()

    def torch_map(self, z):
        return self.mapping(z)

    def torch_affine(self, wp):
        return torch.cat([aff(wp[:, i]) for i, aff in enumerate(self.affines)], dim=1)

    def torch_synthesize(self, s):
        f = self.config.features
        styles = s.split(self.config.style_channels, dim=1)
        x = self.const.expand(s.shape[0], -1, -1, -1)
        for conv, up, style in zip(self.convs, self.plan, styles):
            if up:
                x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = F.instance_norm(conv(x))
            scale, shift = style[:, :f, None, None], style[:, f:, None, None]
            x = F.leaky_relu(x * (1.0 + scale) + shift, 0.2)
        return torch.sigmoid(self.to_rgb(x))

    def forward(self, z):
        w = self.torch_map(z)
        return self.torch_synthesize(self.torch_affine(w[:, None, :].expand(-1, self.num_layers, -1)))

    def digest(self) -> str:
        return parameter_digest(self)

    def save(self, directory, seed=None, extra=None):
        return save_checkpoint(self, directory, "toy_generator", asdict(self.config), seed, extra)

    @classmethod
    def load(cls, directory) -> "ToyGenerator":
        manifest = read_manifest(directory)
        g = cls(ToyGeneratorConfig(**manifest["config"]))
        g.load_state_dict(load_state(directory))
        return g.eval().requires_grad_(False)


class _GanCritic(nn.Module):
    def __init__(self, width=32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 2 * width, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Flatten(), nn.Linear(2 * width * 16, 1),
        )

    def forward(self, x):
        return self.net(x).squeeze(1)


@dataclass(frozen=True)
class GanTrainConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 2e-3
    r1_gamma: float = 1.0
    r1_every: int = 4
    log_every: int = 500


def train_toy_generator(images, config: ToyGeneratorConfig = ToyGeneratorConfig(),
                        seed: int = 0, train: GanTrainConfig = GanTrainConfig()) -> ToyGenerator:
    """Non-saturating GAN with an R1 penalty on real images.

    ``train.steps == 0`` returns the seeded initialisation untouched.
    """
    images = to_tensor(images)
    if images.shape[0] == 0:
        raise ConfigurationError("empty dataset")
    torch.manual_seed(seed)
    gen = ToyGenerator(config)
    critic = _GanCritic()
    rng = seeded_generator(seed + 1)
    opt_g = torch.optim.Adam(gen.parameters(), lr=train.lr, betas=(0.0, 0.99))
    opt_d = torch.optim.Adam(critic.parameters(), lr=train.lr, betas=(0.0, 0.99))
    n = images.shape[0]
    for step in range(train.steps):
        real = images[torch.randint(n, (train.batch_size,), generator=rng)]
        z = torch.randn(train.batch_size, config.d_z, generator=rng)

        lazy_r1 = train.r1_gamma > 0 and step % train.r1_every == 0
        real.requires_grad_(lazy_r1)
        real_logit = critic(real)
        fake_logit = critic(gen(z).detach())
        d_loss = F.softplus(fake_logit).mean() + F.softplus(-real_logit).mean()
        total = d_loss
        if lazy_r1:
            (grad,) = torch.autograd.grad(real_logit.sum(), real, create_graph=True)
            r1 = grad.pow(2).sum(dim=(1, 2, 3)).mean()
            total = total + 0.5 * train.r1_gamma * train.r1_every * r1
        opt_d.zero_grad()
        total.backward()
        opt_d.step()
        real.requires_grad_(False)

        z = torch.randn(train.batch_size, config.d_z, generator=rng)
        g_loss = F.softplus(-critic(gen(z))).mean()
        opt_g.zero_grad()
        g_loss.backward()
        opt_g.step()

        if not (torch.isfinite(d_loss) and torch.isfinite(g_loss)):
            raise TrainingError(f"GAN diverged at step {step}")
        if train.log_every and step % train.log_every == 0:
            log.info("gan step %d d_loss %.4f g_loss %.4f", step, d_loss.item(), g_loss.item())
    return gen.eval().requires_grad_(False)
