"""Map style channels to attributes and build editability masks.

Discovery averages, over probe style codes, each channel's spatial map of
squared image gradients (summed over RGB). Each probe's maps are divided by
that probe's total over all channels, so probes weigh equally while channels
keep their relative strength. A channel's overlap with an attribute is the
energy falling inside the attribute's region; its lift is the share of its
energy inside the region divided by the region's share of the image.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.func import jacfwd, vmap

from .errors import ConfigurationError, InvalidInputError
from .latent import ChannelMask, StyleCode, flat_index, layer_channel

CATALOG_SCHEMA = "semattack.attribute_catalog/1"


@dataclass(frozen=True)
class AttributeCatalog:
    """Attribute name -> sorted tuple of (layer, channel) pairs."""

    layout: tuple[int, ...]
    channels: dict[str, tuple[tuple[int, int], ...]]
    overlap: dict[str, list[float]] = field(default_factory=dict)
    lift: dict[str, list[float]] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        seen = {}
        for name, pairs in self.channels.items():
            for layer, ch in pairs:
                if not (0 <= layer < len(self.layout) and 0 <= ch < self.layout[layer]):
                    raise InvalidInputError(f"({layer}, {ch}) outside layout for {name!r}")
                if (layer, ch) in seen:
                    raise InvalidInputError(f"({layer}, {ch}) listed under {seen[(layer, ch)]!r} and {name!r}")
                seen[(layer, ch)] = name

    @property
    def names(self) -> list[str]:
        return list(self.channels)

    def indices(self, name: str) -> list[int]:
        return [flat_index(self.layout, l, c) for l, c in self.channels[name]]

    def to_dict(self) -> dict:
        return {
            "schema": CATALOG_SCHEMA,
            "layout": list(self.layout),
            "attributes": {k: [list(p) for p in v] for k, v in self.channels.items()},
            "overlap": self.overlap,
            "lift": self.lift,
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "AttributeCatalog":
        if doc.get("schema") != CATALOG_SCHEMA:
            raise InvalidInputError(f"unexpected catalog schema {doc.get('schema')!r}")
        return cls(tuple(doc["layout"]),
                   {k: tuple(tuple(p) for p in v) for k, v in doc["attributes"].items()},
                   doc.get("overlap", {}), doc.get("lift", {}), doc.get("config", {}))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "AttributeCatalog":
        return cls.from_dict(json.loads(Path(path).read_text()))


def gradient_maps(generator, probes: int = 64, seed: int = 0, chunk: int = 16) -> np.ndarray:
    """``(C, H, W)`` average squared-gradient map per style channel."""
    styles = generator.sample_styles(probes, seed)

    def image(v):
        return generator.torch_synthesize(v[None])[0]

    total = None
    for start in range(0, probes, chunk):
        with torch.no_grad():
            jac = vmap(jacfwd(image))(styles[start:start + chunk])    # (n, 3, H, W, C)
        energy = jac.pow(2).sum(1).permute(0, 3, 1, 2).double()      # (n, C, H, W)
        mass = energy.sum((1, 2, 3), keepdim=True)
        energy = torch.where(mass > 0, energy / mass.clamp_min(1e-300), torch.zeros_like(energy))
        part = energy.sum(0)
        total = part if total is None else total + part
    return (total / probes).numpy()


def region_scores(maps: np.ndarray, regions: dict[str, np.ndarray]):
    """In-region energy and lift, each ``{name: (C,)}``."""
    size = maps.shape[1:]
    channel_total = maps.sum((1, 2))
    overlap, lift = {}, {}
    for name, mask in regions.items():
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != size:
            raise InvalidInputError(f"region {name!r} has shape {mask.shape}, images are {size}")
        raw = maps[:, mask].sum(1)
        overlap[name] = raw
        area = mask.mean()
        share = np.divide(raw, channel_total, out=np.zeros_like(raw), where=channel_total > 0)
        lift[name] = share / area if area > 0 else np.zeros_like(raw)
    return overlap, lift


def assign_channels(overlap: dict, lift: dict, threshold: float) -> dict[str, list[int]]:
    """Give each channel to the attribute where it is relatively strongest.

    A channel is eligible for an attribute when its lift exceeds 1 (its energy
    is concentrated in the region). Its strength there is its overlap divided
    by the largest eligible overlap of that attribute; it joins the attribute
    with the highest strength if that strength is at least ``threshold``.
    Ties go to the larger lift, then to the earlier attribute.
    """
    names = list(overlap)
    out = {n: [] for n in names}
    if not names:
        return out
    raw = np.stack([overlap[n] for n in names])       # (A, C)
    lifts = np.stack([lift[n] for n in names])
    eligible = lifts > 1.0
    best = np.where(eligible, raw, 0.0).max(1, keepdims=True)
    strength = np.divide(raw, best, out=np.zeros_like(raw), where=eligible & (best > 0))
    for c in range(raw.shape[1]):
        a = max(range(len(names)), key=lambda i: (strength[i, c], lifts[i, c], -i))
        if strength[a, c] > 0 and strength[a, c] >= threshold:
            out[names[a]].append(c)
    return out


def discover_channels(generator, regions: dict[str, np.ndarray], probes: int = 64,
                      threshold: float = 0.5, seed: int = 0) -> AttributeCatalog:
    """Gradient-energy channel discovery; unassigned channels stay non-editable."""
    if not regions:
        raise ConfigurationError("no attribute regions given")
    if probes < 1:
        raise ConfigurationError("probes must be >= 1")
    if not 0 <= threshold <= 1:
        raise ConfigurationError("threshold must lie in [0, 1]")
    maps = gradient_maps(generator, probes, seed)
    overlap, lift = region_scores(maps, regions)
    assigned = assign_channels(overlap, lift, threshold)
    layout = tuple(generator.layout)
    channels = {n: tuple(layer_channel(layout, c) for c in idx) for n, idx in assigned.items()}
    return AttributeCatalog(
        layout, channels,
        overlap={n: [float(v) for v in overlap[n]] for n in regions},
        lift={n: [float(v) for v in lift[n]] for n in regions},
        config={"probes": probes, "threshold": threshold, "seed": seed},
    )


def build_mask(catalog: AttributeCatalog, selection) -> ChannelMask:
    """Bits set exactly on the union of the selected attributes' channels."""
    selection = list(selection)
    unknown = [s for s in selection if s not in catalog.channels]
    if unknown:
        raise InvalidInputError(f"unknown attributes: {unknown}")
    bits = np.zeros(sum(catalog.layout), dtype=np.uint8)
    for name in selection:
        bits[catalog.indices(name)] = 1
    return ChannelMask(bits, catalog.layout)


def apply_masked_delta(s: StyleCode, mask: ChannelMask, delta) -> StyleCode:
    """``s + mask * delta`` with unmasked channels copied bit for bit."""
    mask.check_matches(s)
    delta = np.asarray(delta, dtype=np.float32)
    if delta.shape != s.flat.shape:
        raise InvalidInputError(f"delta shape {delta.shape} != style shape {s.flat.shape}")
    out = np.where(mask.as_bool(), s.flat + delta, s.flat)
    return StyleCode(out.astype(np.float32), s.layout)
