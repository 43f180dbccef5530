"""Latent representations and the transforms between them.

Shape conventions (plain numpy arrays, float):

* ``z``  -- ``(d_z,)`` or batched ``(N, d_z)``
* ``w``  -- ``(d_w,)`` or ``(N, d_w)``
* ``w+`` / ``p+`` -- ``(L, d_w)`` or ``(N, L, d_w)``

Style codes and channel masks carry a per-layer layout and get small
dataclasses of their own.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigurationError, InvalidInputError

P_SLOPE = 5.0
W_SLOPE = 0.2
# ridge relative to the mean variance; the mapped codes are strongly anisotropic
STATS_RIDGE = 1e-9
STATS_SCHEMA = "semattack.gaussian_stats/1"


def _finite(x, name):
    x = np.asarray(x, dtype=np.float64) if not isinstance(x, np.ndarray) else x
    if not np.all(np.isfinite(x)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return x


def w_to_p(w):
    """Undo the mapping network's final LeakyReLU(0.2): negatives scale by 5."""
    w = _finite(w, "w")
    return np.where(w >= 0, w, w * P_SLOPE)


def p_to_w(p):
    """LeakyReLU with slope 0.2; exact inverse of :func:`w_to_p`.

    Division by 5 is used rather than multiplication by 0.2 because 0.2 is not
    representable and the round trip would pick up an extra rounding.
    """
    p = _finite(p, "p")
    return np.where(p >= 0, p, p / P_SLOPE)


def wplus_to_pplus(wp):
    wp = np.asarray(wp)
    if wp.ndim < 2:
        raise InvalidInputError(f"w+ must be (L, d_w) or (N, L, d_w), got shape {wp.shape}")
    return w_to_p(wp)


def torch_w_to_p(w: torch.Tensor) -> torch.Tensor:
    return torch.where(w >= 0, w, w * P_SLOPE)


def torch_p_to_w(p: torch.Tensor) -> torch.Tensor:
    return torch.where(p >= 0, p, p / P_SLOPE)


@dataclass(frozen=True)
class GaussianStats:
    """Empirical mean/covariance of P space shared by every layer.

    ``covariance`` already includes the ridge term so that ``precision`` is its
    inverse to machine precision.
    """

    mean: np.ndarray
    covariance: np.ndarray
    precision: np.ndarray
    sample_count: int
    seed: int | None = None

    def __post_init__(self):
        d = self.mean.shape[0]
        if self.covariance.shape != (d, d) or self.precision.shape != (d, d):
            raise InvalidInputError("mean/covariance/precision dimensions disagree")
        if not np.allclose(self.covariance, self.covariance.T, atol=1e-6):
            raise InvalidInputError("covariance is not symmetric")
        if self.sample_count < 10 * d:
            raise ConfigurationError(f"sample_count {self.sample_count} < 10*d_w ({10 * d})")

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])

    @classmethod
    def from_moments(cls, mean, covariance, sample_count, seed=None, ridge=STATS_RIDGE):
        mean = np.asarray(mean, dtype=np.float64)
        cov = np.asarray(covariance, dtype=np.float64)
        cov = 0.5 * (cov + cov.T)
        cov = cov + ridge * np.trace(cov) / mean.shape[0] * np.eye(mean.shape[0])
        precision = np.linalg.inv(cov)
        precision = 0.5 * (precision + precision.T)
        return cls(mean=mean, covariance=cov, precision=precision,
                   sample_count=int(sample_count), seed=seed)

    def to_dict(self) -> dict:
        return {
            "schema": STATS_SCHEMA,
            "dim": self.dim,
            "mean": self.mean.tolist(),
            "covariance": self.covariance.reshape(-1).tolist(),
            "sample_count": self.sample_count,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GaussianStats":
        if doc.get("schema") != STATS_SCHEMA:
            raise InvalidInputError(f"unsupported stats schema {doc.get('schema')!r}")
        d = int(doc["dim"])
        cov = np.asarray(doc["covariance"], dtype=np.float64).reshape(d, d)
        precision = np.linalg.inv(cov)
        return cls(mean=np.asarray(doc["mean"], dtype=np.float64), covariance=cov,
                   precision=0.5 * (precision + precision.T),
                   sample_count=int(doc["sample_count"]), seed=doc.get("seed"))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "GaussianStats":
        return cls.from_dict(json.loads(Path(path).read_text()))


def gaussian_energy(pp, stats: GaussianStats):
    """Sum over layers of the Mahalanobis energy ``(p_i - mu)^T Sigma^-1 (p_i - mu)``.

    Equivalent to the quadratic form with ``I_L (x) Sigma`` but evaluated layer by
    layer. Accepts ``(L, d)`` (returns a float) or ``(N, L, d)`` (returns ``(N,)``).
    """
    pp = np.asarray(pp, dtype=np.float64)
    if pp.ndim not in (2, 3) or pp.shape[-1] != stats.dim:
        raise InvalidInputError(f"p+ shape {pp.shape} does not match stats dim {stats.dim}")
    diff = pp - stats.mean
    energy = np.einsum("...ld,de,...le->...", diff, stats.precision, diff)
    return float(energy) if pp.ndim == 2 else energy


def torch_gaussian_energy(pp: torch.Tensor, mean: torch.Tensor, precision: torch.Tensor) -> torch.Tensor:
    """Batched ``(N, L, d) -> (N,)`` energy for use inside autograd."""
    diff = pp - mean
    return torch.einsum("nld,de,nle->n", diff, precision, diff)


def estimate_gaussian_stats(generator, num_samples: int = 100_000, seed: int = 0,
                            batch_size: int = 10_000) -> GaussianStats:
    """Fit mean/covariance of P space by pushing standard-normal z through the mapping."""
    d_w = generator.d_w
    if num_samples < 10 * d_w:
        raise ConfigurationError(f"num_samples must be >= 10*d_w = {10 * d_w}")
    rng = np.random.default_rng(seed)
    total = np.zeros(d_w)
    outer = np.zeros((d_w, d_w))
    done = 0
    while done < num_samples:
        n = min(batch_size, num_samples - done)
        z = rng.standard_normal((n, generator.d_z)).astype(np.float32)
        p = w_to_p(np.asarray(generator.map_latent(z), dtype=np.float64))
        total += p.sum(axis=0)
        outer += p.T @ p
        done += n
    mean = total / num_samples
    cov = (outer - num_samples * np.outer(mean, mean)) / (num_samples - 1)
    return GaussianStats.from_moments(mean, cov, num_samples, seed=seed)


@dataclass(frozen=True)
class StyleCode:
    """Per-layer style vectors, stored flat with the layer layout alongside."""

    flat: np.ndarray
    layout: tuple[int, ...]

    def __post_init__(self):
        flat = np.asarray(self.flat, dtype=np.float32)
        if flat.ndim != 1 or flat.shape[0] != sum(self.layout):
            raise InvalidInputError(f"style vector of length {flat.shape} does not fit layout {self.layout}")
        object.__setattr__(self, "flat", flat)
        object.__setattr__(self, "layout", tuple(int(c) for c in self.layout))

    @property
    def num_channels(self) -> int:
        return int(self.flat.shape[0])

    @property
    def layers(self) -> list[np.ndarray]:
        return np.split(self.flat, np.cumsum(self.layout)[:-1])

    @classmethod
    def from_layers(cls, layers) -> "StyleCode":
        layers = [np.asarray(v, dtype=np.float32).reshape(-1) for v in layers]
        return cls(np.concatenate(layers), tuple(len(v) for v in layers))

    def digest(self) -> str:
        return hashlib.sha256(self.flat.tobytes()).hexdigest()

    def to_dict(self) -> dict:
        return {"layout": list(self.layout), "channels": [v.tolist() for v in self.layers]}

    @classmethod
    def from_dict(cls, doc) -> "StyleCode":
        return cls.from_layers(doc["channels"])


def flat_index(layout, layer: int, channel: int) -> int:
    if not 0 <= layer < len(layout) or not 0 <= channel < layout[layer]:
        raise InvalidInputError(f"(layer={layer}, channel={channel}) outside layout {tuple(layout)}")
    return int(sum(layout[:layer]) + channel)


def layer_channel(layout, index: int) -> tuple[int, int]:
    offsets = np.cumsum((0,) + tuple(layout))
    layer = int(np.searchsorted(offsets, index, side="right") - 1)
    if not 0 <= layer < len(layout):
        raise InvalidInputError(f"flat index {index} outside layout")
    return layer, int(index - offsets[layer])


@dataclass(frozen=True)
class ChannelMask:
    """Editability bits over style channels (1 = the attack may change it)."""

    bits: np.ndarray
    layout: tuple[int, ...] = field(default=())

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 1:
            raise InvalidInputError("mask must be a vector")
        if not np.isin(bits, (0, 1)).all():
            raise InvalidInputError("mask entries must be 0 or 1")
        if self.layout and sum(self.layout) != bits.shape[0]:
            raise InvalidInputError("mask length does not match layout")
        object.__setattr__(self, "bits", bits.astype(np.uint8))

    @property
    def num_channels(self) -> int:
        return int(self.bits.shape[0])

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    def as_bool(self) -> np.ndarray:
        return self.bits.astype(bool)

    def check_matches(self, style: StyleCode):
        if self.num_channels != style.num_channels:
            raise InvalidInputError(
                f"mask has {self.num_channels} channels, style code has {style.num_channels}")

    @classmethod
    def zeros(cls, layout) -> "ChannelMask":
        return cls(np.zeros(sum(layout), dtype=np.uint8), tuple(layout))
