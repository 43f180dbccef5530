"""Discriminator over flat style codes and the semantic loss it supplies.

Real samples are style codes of mapped Gaussian latents; fakes are style codes
of encoder embeddings of training images. Encoder-side realism updates run on
a private copy of the encoder, so the caller's encoder is never modified.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.stats import rankdata

from .checkpoint import load_state, parameter_digest, read_manifest, save_checkpoint, seeded_generator
from .errors import ConfigurationError, InvalidInputError, TrainingError
from .imaging import to_tensor
from .latent import StyleCode

log = logging.getLogger(__name__)


class SemanticDiscriminator(nn.Module):
    """Three linear layers over the concatenated per-layer style vectors.

    Inputs are standardised with per-channel moments of mapped samples, which
    are stored as buffers so scoring needs nothing but the checkpoint.
    """

    def __init__(self, layout: tuple[int, ...], hidden: int = 128):
        super().__init__()
        self.layout = tuple(int(c) for c in layout)
        self.hidden = hidden
        c = sum(self.layout)
        self.net = nn.Sequential(
            nn.Linear(c, hidden), nn.LeakyReLU(0.2),
            nn.Linear(hidden, hidden // 2), nn.LeakyReLU(0.2),
            nn.Linear(hidden // 2, 1),
        )
        self.register_buffer("center", torch.zeros(c))
        self.register_buffer("scale", torch.ones(c))
        self.meta: dict = {}

    @property
    def num_channels(self) -> int:
        return sum(self.layout)

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        return self.net((s - self.center) / self.scale).squeeze(1)

    def logits(self, s) -> np.ndarray:
        """Logits for an ``(N, C)`` array (or one :class:`StyleCode`)."""
        flat = self._flat(s)
        with torch.no_grad():
            return self(torch.from_numpy(flat)).double().numpy()

    def _flat(self, s) -> np.ndarray:
        if isinstance(s, StyleCode):
            if s.layout != self.layout:
                raise InvalidInputError(f"style layout {s.layout} != discriminator layout {self.layout}")
            return s.flat[None]
        flat = np.ascontiguousarray(np.asarray(s, dtype=np.float32))
        if flat.ndim != 2 or flat.shape[1] != self.num_channels:
            raise InvalidInputError(f"style batch must be (N, {self.num_channels}), got {flat.shape}")
        return flat

    def digest(self) -> str:
        return parameter_digest(self)

    def save(self, directory, seed=None):
        cfg = {"layout": list(self.layout), "hidden": self.hidden}
        return save_checkpoint(self, directory, "semantic_discriminator", cfg, seed, {"training": self.meta})

    @classmethod
    def load(cls, directory) -> "SemanticDiscriminator":
        manifest = read_manifest(directory)
        cfg = manifest["config"]
        d = cls(tuple(cfg["layout"]), cfg["hidden"])
        d.load_state_dict(load_state(directory))
        d.meta = manifest.get("training", {})
        return d.eval().requires_grad_(False)


def torch_semantic_loss(d: SemanticDiscriminator, s: torch.Tensor) -> torch.Tensor:
    """Per-sample ``softplus(-logit)``; differentiable in ``s``."""
    return F.softplus(-d(s))


def semantic_loss(d: SemanticDiscriminator, s):
    """``softplus(-logit)``: low when the code looks like a mapped sample.

    Returns a float for a single :class:`StyleCode`, an array for a batch.
    """
    logit = d.logits(s)
    loss = np.logaddexp(0.0, -logit)
    return float(loss[0]) if isinstance(s, StyleCode) else loss


@dataclass(frozen=True)
class SemDiscTrainConfig:
    gamma: float = 10.0
    steps: int = 20_000
    batch_size: int = 64
    lr: float = 1e-3
    encoder_lr: float = 1e-4
    encoder_every: int = 1
    recon_weight: float = 1.0
    hidden: int = 128
    log_every: int = 1000


def train_semantic_discriminator(generator, encoder, images, cfg: SemDiscTrainConfig = SemDiscTrainConfig(),
                                 seed: int = 0, metric=None, return_history: bool = False):
    """Alternate discriminator and encoder-realism updates.

    Discriminator loss per step is ``softplus(-D(real)) + softplus(D(fake))``
    plus ``gamma/2 * E|grad_s D(real)|^2``. The encoder copy is pushed toward
    codes the discriminator accepts, anchored by a reconstruction term when a
    ``metric`` is given; ``encoder_every=0`` keeps the encoder frozen.
    Returns the frozen discriminator (and the per-step
    loss components when ``return_history``).
    """
    if cfg.steps < 1:
        raise ConfigurationError("steps must be >= 1")
    if cfg.gamma < 0:
        raise ConfigurationError("gamma must be >= 0")
    x_all = to_tensor(images)
    if x_all.shape[0] == 0:
        raise ConfigurationError("no training images")
    torch.manual_seed(seed)
    rng = seeded_generator(seed)
    d = SemanticDiscriminator(generator.layout, cfg.hidden)
    with torch.no_grad():
        ref = generator.sample_styles(4096, seed + 1)
        d.center.copy_(ref.mean(0))
        d.scale.copy_(ref.std(0).clamp_min(1e-6))
    enc = copy.deepcopy(encoder).train().requires_grad_(True)
    opt_d = torch.optim.Adam(d.parameters(), lr=cfg.lr, betas=(0.5, 0.99))
    opt_e = torch.optim.Adam(enc.parameters(), lr=cfg.encoder_lr)
    L, n = generator.num_layers, x_all.shape[0]
    history = {"d_real": [], "d_fake": [], "penalty": [], "e_adv": []}
    for step in range(cfg.steps):
        z = torch.randn(cfg.batch_size, generator.d_z, generator=rng)
        x = x_all[torch.randint(n, (cfg.batch_size,), generator=rng)]
        with torch.no_grad():
            real = generator.torch_affine(generator.torch_map(z)[:, None, :].expand(-1, L, -1))
            fake = generator.torch_affine(enc.torch_encode(x))
        real.requires_grad_(cfg.gamma > 0)
        real_logit = d(real)
        l_real = F.softplus(-real_logit).mean()
        l_fake = F.softplus(d(fake)).mean()
        loss = l_real + l_fake
        penalty = 0.0
        if cfg.gamma > 0:
            (grad,) = torch.autograd.grad(real_logit.sum(), real, create_graph=True)
            gp = grad.pow(2).sum(1).mean()
            loss = loss + 0.5 * cfg.gamma * gp
            penalty = 0.5 * cfg.gamma * gp.item()
        if not torch.isfinite(loss):
            raise TrainingError(f"semantic discriminator diverged at step {step}")
        opt_d.zero_grad()
        loss.backward()
        opt_d.step()

        e_adv = float("nan")
        if cfg.encoder_every and step % cfg.encoder_every == 0:
            d.requires_grad_(False)
            wp = enc.torch_encode(x)
            s = generator.torch_affine(wp)
            adv = F.softplus(-d(s)).mean()
            e_loss = adv
            if metric is not None and cfg.recon_weight:
                e_loss = e_loss + cfg.recon_weight * metric(generator.torch_synthesize(s), x).mean()
            if not torch.isfinite(e_loss):
                raise TrainingError(f"encoder realism update diverged at step {step}")
            opt_e.zero_grad()
            e_loss.backward()
            opt_e.step()
            d.requires_grad_(True)
            e_adv = adv.item()

        history["d_real"].append(l_real.item())
        history["d_fake"].append(l_fake.item())
        history["penalty"].append(penalty)
        history["e_adv"].append(e_adv)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("semdisc step %d real %.4f fake %.4f gp %.4f", step, l_real.item(), l_fake.item(), penalty)
    d.eval().requires_grad_(False)
    d.meta = {**asdict(cfg), "seed": seed}
    return (d, history) if return_history else d


def uniform_style_codes(generator, n: int, seed: int, reference=None) -> np.ndarray:
    """Codes with each channel drawn uniformly over the range seen in mapped samples."""
    ref = generator.sample_styles(4096, seed + 7).numpy() if reference is None else np.asarray(reference)
    lo, hi = ref.min(0), ref.max(0)
    rng = np.random.default_rng(seed)
    return (lo + (hi - lo) * rng.random((n, ref.shape[1]))).astype(np.float32)


def separation_auc(positive, negative) -> float:
    """Probability a positive outranks a negative (ties count half)."""
    pos = np.asarray(positive, dtype=np.float64)
    neg = np.asarray(negative, dtype=np.float64)
    ranks = rankdata(np.concatenate([pos, neg]))
    r_pos = ranks[: len(pos)].sum()
    return float((r_pos - len(pos) * (len(pos) + 1) / 2) / (len(pos) * len(neg)))
