import numpy as np
import pytest
import torch

from semattack.attributes import (
    AttributeCatalog, apply_masked_delta, assign_channels, build_mask, discover_channels, region_scores,
)
from semattack.errors import ConfigurationError, InvalidInputError
from semattack.latent import ChannelMask, StyleCode
from semattack.toyfaces import region_masks

LAYOUT = (4, 4)


def small_catalog():
    return AttributeCatalog(LAYOUT, {"a": ((0, 1), (1, 2)), "b": ((0, 3),), "c": ()})


def test_build_mask_cases():
    cat = small_catalog()
    assert build_mask(cat, []).count == 0
    assert build_mask(cat, ["a"]).bits.tolist() == [0, 1, 0, 0, 0, 0, 1, 0]
    full = build_mask(cat, cat.names)
    assert np.flatnonzero(full.bits).tolist() == sorted(cat.indices("a") + cat.indices("b"))
    with pytest.raises(InvalidInputError):
        build_mask(cat, ["missing"])


def test_apply_masked_delta(rng):
    s = StyleCode(rng.normal(size=8), LAYOUT)
    delta = rng.normal(size=8).astype(np.float32)
    assert apply_masked_delta(s, ChannelMask.zeros(LAYOUT), delta).digest() == s.digest()
    full = apply_masked_delta(s, ChannelMask(np.ones(8), LAYOUT), delta)
    assert np.array_equal(full.flat, s.flat + delta)
    with pytest.raises(InvalidInputError):
        apply_masked_delta(s, ChannelMask(np.ones(8), LAYOUT), delta[:4])


def test_catalog_rejects_overlap_and_bounds():
    with pytest.raises(InvalidInputError):
        AttributeCatalog(LAYOUT, {"a": ((0, 1),), "b": ((0, 1),)})
    with pytest.raises(InvalidInputError):
        AttributeCatalog(LAYOUT, {"a": ((2, 0),)})


def test_catalog_round_trip(tmp_path):
    cat = small_catalog()
    cat.save(tmp_path / "cat.json")
    assert AttributeCatalog.load(tmp_path / "cat.json") == cat


def test_assignment_threshold_lift_and_ties():
    overlap = {"a": np.array([1.0, 0.4, 0.3, 0.9, 1.0]), "b": np.array([0.2, 0.1, 0.3, 0.9, 0.9])}
    lift = {"a": np.array([2.0, 2.0, 2.0, 0.5, 2.0]), "b": np.array([2.0, 2.0, 3.0, 2.0, 3.0])}
    out = assign_channels(overlap, lift, threshold=0.5)
    # 1 and 2 are below half of their attribute's best; 3 is diffuse for a so it goes to b;
    # 4 is the strongest channel of both and the larger lift decides
    assert out == {"a": [0], "b": [3, 4]}


def test_region_scores_energy_and_lift():
    maps = np.zeros((2, 4, 4))
    maps[0, 0, 0] = 1.0
    maps[1] = 1 / 16
    small = np.zeros((4, 4), bool)
    small[0, 0] = True
    overlap, lift = region_scores(maps, {"r": small, "empty": np.zeros((4, 4), bool)})
    assert overlap["r"].tolist() == [1.0, 1 / 16]
    assert lift["r"].tolist() == [16.0, 1.0]
    assert lift["empty"].tolist() == [0.0, 0.0]


def test_discover_needs_regions(small_generator):
    with pytest.raises(ConfigurationError):
        discover_channels(small_generator, {})


def test_empty_region_gets_no_channels(small_generator):
    regions = region_masks()
    regions = {"mouth_open": regions["mouth_open"], "nothing": np.zeros((32, 32), bool)}
    cat = discover_channels(small_generator, regions, probes=4)
    assert cat.channels["nothing"] == ()


def test_disjoint_regions_get_disjoint_channels(stack):
    regions = region_masks()
    a, b = regions["mouth_open"], regions["eyeglasses"]
    assert not (a & b).any()
    cat = discover_channels(stack.generator, {"mouth_open": a, "eyeglasses": b}, probes=16, threshold=0.5)
    assert not set(cat.indices("mouth_open")) & set(cat.indices("eyeglasses"))


def test_stack_catalog_is_disjoint(stack):
    seen = [i for n in stack.catalog.names for i in stack.catalog.indices(n)]
    assert len(seen) == len(set(seen))


def test_mouth_channels_match_finite_difference_oracle(stack):
    g = stack.generator
    region = torch.from_numpy(region_masks()["mouth_open"])
    styles = g.sample_styles(16, 99)
    h = 1e-2
    energy = np.zeros(g.num_channels)
    with torch.no_grad():
        for c in range(g.num_channels):
            e = torch.zeros(g.num_channels)
            e[c] = h
            diff = g.torch_synthesize(styles + e) - g.torch_synthesize(styles - e)
            energy[c] = diff.pow(2).sum(1)[:, region].sum().item()
    assert int(np.argmax(energy)) in stack.catalog.indices("mouth_open")
