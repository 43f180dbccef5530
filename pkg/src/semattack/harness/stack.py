"""Train, save and reload the full toy model stack.

Build order: renders -> GAN -> detector -> encoder (perceptual features from
the detector) -> semantic discriminator -> identity model -> P-space stats ->
attribute catalog. Each artefact lands in its own checkpoint directory under
one stack directory; ``stack.json`` holds the config and digests.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..checkpoint import parameter_digest
from ..attributes import AttributeCatalog, discover_channels
from ..detectors import (DetectorTrainConfig, IdentityModel, IdentityTrainConfig, ToyDetector,
                         train_identity_model, train_toy_detector)
from ..generator import GanTrainConfig, ToyGenerator, ToyGeneratorConfig, train_toy_generator
from ..inversion import EncoderTrainConfig, PerceptualLoss, ToyEncoder, train_encoder
from ..latent import GaussianStats, estimate_gaussian_stats
from ..semdisc import SemanticDiscriminator, SemDiscTrainConfig, train_semantic_discriminator
from ..toyfaces import generate_toy_dataset, region_masks
from ..whitebox import style_channel_std
from .configs import from_dict

log = logging.getLogger(__name__)

STACK_FILE = "stack.json"


@dataclass(frozen=True)
class StackConfig:
    seed: int = 0
    num_real: int = 4000
    num_fake: int = 4000
    generator: ToyGeneratorConfig = ToyGeneratorConfig()
    gan: GanTrainConfig = GanTrainConfig(steps=1500)
    detector: DetectorTrainConfig = DetectorTrainConfig()
    encoder: EncoderTrainConfig = EncoderTrainConfig()
    # frozen encoder: joint updates left the critic blind to off-manifold codes
    semdisc: SemDiscTrainConfig = SemDiscTrainConfig(steps=3000, encoder_every=0, log_every=500)
    identity: IdentityTrainConfig = IdentityTrainConfig()
    identity_threshold: float = 0.8
    stats_samples: int = 100_000
    probes: int = 64
    overlap_threshold: float = 0.5

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "StackConfig":
        return from_dict(cls, doc)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Stack:
    """Frozen toy models plus the derived statistics the attacks need."""

    config: StackConfig
    generator: ToyGenerator
    detector: ToyDetector
    encoder: ToyEncoder
    semdisc: SemanticDiscriminator
    identity: IdentityModel
    stats: GaussianStats
    catalog: AttributeCatalog
    channel_std: np.ndarray
    directory: Path | None = None
    digests: dict = field(default_factory=dict)

    @property
    def metric(self) -> PerceptualLoss:
        return PerceptualLoss.from_detector(self.detector)

    def fakes(self, n: int, seed: int) -> np.ndarray:
        """Fresh generator samples (NHWC)."""
        with torch.no_grad():
            s = self.generator.sample_styles(n, seed)
        return self.generator.synthesize(s.numpy())


def build_stack(cfg: StackConfig, directory) -> Stack:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    seed = cfg.seed

    real, _ = generate_toy_dataset(cfg.num_real, seed)
    log.info("rendered %d faces (%.0fs)", len(real), time.time() - t0)

    gen = train_toy_generator(real, cfg.generator, seed, cfg.gan)
    gen.save(directory / "generator", seed)
    log.info("generator trained (%.0fs)", time.time() - t0)

    with torch.no_grad():
        fake = gen.synthesize(gen.sample_styles(cfg.num_fake, seed + 101).numpy())
    det = train_toy_detector(real, fake, seed, cfg.detector)
    det.save(directory / "detector", seed)
    log.info("detector held-out accuracy %.3f (%.0fs)", det.heldout_accuracy, time.time() - t0)

    metric = PerceptualLoss.from_detector(det)
    enc = train_encoder(gen, metric, seed, cfg.encoder)
    enc.save(directory / "encoder", seed)
    log.info("encoder trained (%.0fs)", time.time() - t0)

    ds = train_semantic_discriminator(gen, enc, real, cfg.semdisc, seed, metric)
    ds.save(directory / "semdisc", seed)
    log.info("semantic discriminator trained (%.0fs)", time.time() - t0)

    ident = train_identity_model(seed, cfg.identity, cfg.identity_threshold)
    ident.save(directory / "identity", seed)
    log.info("identity model trained (%.0fs)", time.time() - t0)

    stats = estimate_gaussian_stats(gen, cfg.stats_samples, seed)
    stats.save(directory / "stats.json")

    catalog = discover_channels(gen, region_masks(), cfg.probes, cfg.overlap_threshold, seed)
    catalog.save(directory / "catalog.json")
    std = style_channel_std(gen)
    np.save(directory / "channel_std.npy", std)
    log.info("stack complete (%.0fs)", time.time() - t0)

    stack = Stack(cfg, gen, det, enc, ds, ident, stats, catalog, std, directory)
    stack.digests = _digests(stack)
    (directory / STACK_FILE).write_text(json.dumps(
        {"config": cfg.to_dict(), "digests": stack.digests, "build_seconds": round(time.time() - t0, 1)},
        indent=2, sort_keys=True))
    return stack


def _digests(stack: Stack) -> dict:
    return {
        "generator": stack.generator.digest(),
        "detector": stack.detector.digest(),
        "encoder": stack.encoder.digest(),
        "semdisc": stack.semdisc.digest(),
        "identity": parameter_digest(stack.identity),
    }


def load_stack(directory) -> Stack:
    directory = Path(directory)
    doc = json.loads((directory / STACK_FILE).read_text())
    stack = Stack(
        StackConfig.from_dict(doc["config"]),
        ToyGenerator.load(directory / "generator"),
        ToyDetector.load(directory / "detector"),
        ToyEncoder.load(directory / "encoder"),
        SemanticDiscriminator.load(directory / "semdisc"),
        IdentityModel.load(directory / "identity"),
        GaussianStats.load(directory / "stats.json"),
        AttributeCatalog.load(directory / "catalog.json"),
        np.load(directory / "channel_std.npy"),
        directory,
    )
    stack.digests = doc.get("digests", {})
    return stack


def cache_root() -> Path:
    return Path(os.environ.get("SEMATTACK_CACHE", Path.home() / ".cache" / "semattack"))


def cached_stack(cfg: StackConfig = StackConfig(), root=None) -> Stack:
    """Load the stack for ``cfg`` from the cache, building it on first use."""
    directory = Path(root or cache_root()) / f"stack-{cfg.digest()}"
    if (directory / STACK_FILE).exists():
        return load_stack(directory)
    return build_stack(cfg, directory)
