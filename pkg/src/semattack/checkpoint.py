"""Checkpoint directories: ``manifest.json`` plus an opaque ``params.pt`` blob."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import torch

MANIFEST = "manifest.json"
PARAMS = "params.pt"


def parameter_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(module: torch.nn.Module, directory, kind: str, config: dict, seed,
                    extra: dict | None = None) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(module.state_dict(), directory / PARAMS)
    manifest = {
        "kind": kind,
        "config": config,
        "seed": seed,
        "digest": parameter_digest(module),
        **(extra or {}),
    }
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def read_manifest(directory) -> dict:
    return json.loads((Path(directory) / MANIFEST).read_text())


def load_state(directory) -> dict:
    return torch.load(Path(directory) / PARAMS, map_location="cpu", weights_only=True)


def seeded_generator(seed) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g
