"""Image -> W+ embedding and prior-regularised latent fine-tuning.

The fine-tuning objective is ``recon(x, G(w+)) + lambda * energy(p+)`` where
``p+`` is the layerwise P-space image of ``w+`` and the energy is the Gaussian
prior's Mahalanobis term. The iterate with the lowest objective is returned.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import load_state, parameter_digest, read_manifest, save_checkpoint, seeded_generator
from .errors import InvalidInputError, OptimizationError, TrainingError
from .imaging import to_tensor
from .latent import GaussianStats, torch_gaussian_energy, torch_w_to_p

log = logging.getLogger(__name__)


class PerceptualLoss(nn.Module):
    """Pixel MSE plus ``feature_weight`` x mean squared distance of frozen conv features.

    ``features`` is any module returning a tuple of feature maps; the toy
    detector's first two blocks are the default source.
    """

    def __init__(self, features: nn.Module | None, feature_weight: float = 0.5):
        super().__init__()
        self.features = features
        self.feature_weight = feature_weight
        if features is not None:
            self.features.requires_grad_(False)

    @classmethod
    def from_detector(cls, detector, feature_weight: float = 0.5):
        return cls(_DetectorFeatures(detector), feature_weight)

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        """Per-sample loss ``(N,)`` for NCHW tensors."""
        loss = (x - y).pow(2).flatten(1).mean(1)
        if self.features is not None and self.feature_weight:
            for fx, fy in zip(self.features(x), self.features(y)):
                loss = loss + self.feature_weight * (fx - fy).pow(2).flatten(1).mean(1)
        return loss


class _DetectorFeatures(nn.Module):
    def __init__(self, detector):
        super().__init__()
        self.block1 = detector.block1
        self.block2 = detector.block2

    def forward(self, x):
        f1 = self.block1(x)
        return f1, self.block2(f1)


def reconstruction_loss(x, y, metric: PerceptualLoss) -> float:
    """Perceptual reconstruction loss between two HWC images."""
    x, y = np.asarray(x, dtype=np.float32), np.asarray(y, dtype=np.float32)
    if x.shape != y.shape:
        raise InvalidInputError(f"image shapes differ: {x.shape} vs {y.shape}")
    with torch.no_grad():
        return float(metric(to_tensor(x), to_tensor(y))[0])


class EncoderContract:
    num_layers: int
    d_w: int
    image_size: int

    def torch_encode(self, x: torch.Tensor) -> torch.Tensor:
        """``(N, 3, H, W) -> (N, L, d_w)``."""
        raise NotImplementedError

    def encode(self, images) -> np.ndarray:
        """HWC image -> ``(L, d_w)``; NHWC batch -> ``(N, L, d_w)``."""
        arr = np.asarray(images, dtype=np.float32)
        single = arr.ndim == 3
        x = to_tensor(arr)
        if x.shape[-2:] != (self.image_size, self.image_size):
            raise InvalidInputError(f"encoder expects {self.image_size}x{self.image_size} images")
        with torch.no_grad():
            w = self.torch_encode(x).numpy()
        return w[0] if single else w


class ToyEncoder(nn.Module, EncoderContract):
    """Conv trunk predicting per-layer offsets from a learned average latent."""

    def __init__(self, num_layers: int = 6, d_w: int = 16, image_size: int = 32, width: int = 32):
        nn.Module.__init__(self)
        self.num_layers, self.d_w, self.image_size, self.width = num_layers, d_w, image_size, width
        self.trunk = nn.Sequential(
            nn.Conv2d(3, width, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 2 * width, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Flatten(),
        )
        self.head = nn.Linear(2 * width * (image_size // 8) ** 2, num_layers * d_w)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.register_buffer("w_avg", torch.zeros(d_w))
        self.provenance: dict = {}

    def torch_encode(self, x):
        delta = self.head(self.trunk(x)).view(-1, self.num_layers, self.d_w)
        return self.w_avg + delta

    def digest(self):
        return parameter_digest(self)

    def save(self, directory, seed=None):
        cfg = {"num_layers": self.num_layers, "d_w": self.d_w, "image_size": self.image_size, "width": self.width}
        return save_checkpoint(self, directory, "toy_encoder", cfg, seed, {"provenance": self.provenance})

    @classmethod
    def load(cls, directory) -> "ToyEncoder":
        manifest = read_manifest(directory)
        e = cls(**manifest["config"])
        e.load_state_dict(load_state(directory))
        e.provenance = manifest.get("provenance", {})
        return e.eval().requires_grad_(False)


@dataclass(frozen=True)
class EncoderTrainConfig:
    steps: int = 1200
    batch_size: int = 32
    lr: float = 1e-3
    latent_weight: float = 1.0
    recon_weight: float = 1.0


def train_encoder(generator, metric: PerceptualLoss, seed: int = 0,
                  cfg: EncoderTrainConfig = EncoderTrainConfig(), real_images=None) -> ToyEncoder:
    """Fit the encoder on generated faces (known latents) and, optionally, real renders.

    Generated batches use latent regression plus reconstruction; real renders
    only have the reconstruction term.
    """
    torch.manual_seed(seed)
    rng = seeded_generator(seed)
    enc = ToyEncoder(generator.num_layers, generator.d_w)
    with torch.no_grad():
        enc.w_avg.copy_(generator.torch_map(torch.randn(4096, generator.d_z, generator=rng)).mean(0))
    real = None if real_images is None else to_tensor(real_images)
    opt = torch.optim.Adam(enc.parameters(), lr=cfg.lr)
    L = generator.num_layers
    for step in range(cfg.steps):
        z = torch.randn(cfg.batch_size, generator.d_z, generator=rng)
        with torch.no_grad():
            w = generator.torch_map(z)[:, None, :].expand(-1, L, -1)
            x = generator.torch_synthesize(generator.torch_affine(w))
        if real is not None:
            idx = torch.randint(real.shape[0], (cfg.batch_size // 2,), generator=rng)
            x_all = torch.cat([x, real[idx]])
        else:
            x_all = x
        pred = enc.torch_encode(x_all)
        recon = metric(generator.torch_synthesize(generator.torch_affine(pred)), x_all).mean()
        latent = (pred[: len(x)] - w).pow(2).mean()
        loss = cfg.recon_weight * recon + cfg.latent_weight * latent
        if not torch.isfinite(loss):
            raise TrainingError(f"encoder training diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 200 == 0:
            log.info("encoder step %d recon %.5f latent %.5f", step, recon.item(), latent.item())
    enc.provenance = {"trained_on": "generated" if real is None else "generated+real",
                      "steps": cfg.steps, "seed": seed}
    return enc.eval().requires_grad_(False)


@dataclass(frozen=True)
class InversionConfig:
    # energy is ~L*d_w (about 96 for the toy generator) against reconstruction ~1e-2
    lambda_prior: float = 1e-4
    iterations: int = 300
    lr: float = 0.01
    feature_weight: float = 0.5

    def __post_init__(self):
        if self.iterations < 0 or self.lambda_prior < 0:
            raise InvalidInputError("iterations and lambda_prior must be >= 0")


@dataclass
class InversionResult:
    wplus: np.ndarray               # (N, L, d_w), best iterate per image
    initial_wplus: np.ndarray
    trajectory: np.ndarray          # (n + 1, N) objective of each iterate
    best_iteration: np.ndarray      # (N,)
    initial_objective: np.ndarray
    final_objective: np.ndarray
    initial_recon: np.ndarray
    final_recon: np.ndarray
    initial_energy: np.ndarray
    final_energy: np.ndarray

    def single(self, i: int = 0) -> dict:
        return {
            "wplus": self.wplus[i].tolist(),
            "trajectory": self.trajectory[:, i].tolist(),
            "best_iteration": int(self.best_iteration[i]),
            "initial_objective": float(self.initial_objective[i]),
            "final_objective": float(self.final_objective[i]),
            "initial_energy": float(self.initial_energy[i]),
            "final_energy": float(self.final_energy[i]),
        }


def fine_tune_latent(images, generator, encoder: EncoderContract, stats: GaussianStats,
                     cfg: InversionConfig, metric: PerceptualLoss) -> InversionResult:
    """Encode then refine W+ codes with Adam on the prior-regularised objective.

    ``images`` may be one HWC image or an NHWC batch; images are optimised
    jointly but independently (Adam's update is elementwise). Every iterate's
    objective is recorded and the lowest one per image is returned, so the
    result never scores worse than the encoder output.
    """
    x = to_tensor(images)
    with torch.no_grad():
        w0 = encoder.torch_encode(x)
    if w0.shape[1:] != (generator.num_layers, generator.d_w):
        raise InvalidInputError("encoder output does not match generator layer layout")
    if stats.dim != generator.d_w:
        raise InvalidInputError("stats dimension does not match d_w")
    mean = torch.as_tensor(stats.mean, dtype=torch.float32)
    precision = torch.as_tensor(stats.precision, dtype=torch.float32)
    lam = cfg.lambda_prior

    def terms(w):
        recon = metric(generator.torch_synthesize(generator.torch_affine(w)), x)
        energy = torch_gaussian_energy(torch_w_to_p(w), mean, precision)
        return recon, energy, recon + lam * energy

    w = w0.clone().requires_grad_(True)
    opt = torch.optim.Adam([w], lr=cfg.lr)
    best_w = w0.clone()
    best_obj = best_r = best_e = None
    best_it = torch.zeros(len(w0), dtype=torch.long)
    traj = []
    for j in range(cfg.iterations + 1):
        last = j == cfg.iterations
        with torch.set_grad_enabled(not last):
            recon, energy, obj = terms(w)
        if not torch.isfinite(obj).all():
            raise OptimizationError("non-finite objective during latent fine-tuning", traj)
        obj_d, r_d, e_d = obj.detach(), recon.detach(), energy.detach()
        traj.append(obj_d.numpy().copy())
        if best_obj is None:
            r0, e0, obj0 = r_d.clone(), e_d.clone(), obj_d.clone()
            best_obj, best_r, best_e = obj0.clone(), r0.clone(), e0.clone()
        else:
            better = obj_d < best_obj
            if better.any():
                best_w[better] = w.detach()[better]
                best_obj = torch.where(better, obj_d, best_obj)
                best_r = torch.where(better, r_d, best_r)
                best_e = torch.where(better, e_d, best_e)
                best_it[better] = j
        if last:
            break
        opt.zero_grad()
        obj.sum().backward()
        if not torch.isfinite(w.grad).all():
            raise OptimizationError("non-finite gradient during latent fine-tuning", traj)
        opt.step()
    return InversionResult(
        wplus=best_w.numpy(), initial_wplus=w0.numpy(), trajectory=np.stack(traj),
        best_iteration=best_it.numpy(), initial_objective=obj0.numpy(), final_objective=best_obj.numpy(),
        initial_recon=r0.numpy(), final_recon=best_r.numpy(),
        initial_energy=e0.numpy(), final_energy=best_e.numpy(),
    )
