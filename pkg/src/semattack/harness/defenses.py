"""Countermeasures: feature squeezing and PGD adversarial training."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from scipy.ndimage import median_filter

from ..detectors import DetectorTrainConfig, accuracy, ToyDetector, _split, fit_detector
from ..errors import ConfigurationError, InvalidInputError
from ..whitebox import pgd_attack, pgd_torch

log = logging.getLogger(__name__)

SQUEEZE_LEVELS = 31          # 5-bit depth
DEFAULT_FPRS = (0.05, 0.01, 0.0)


def reduce_bit_depth(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.rint(x * SQUEEZE_LEVELS) / SQUEEZE_LEVELS


def feature_squeeze(x) -> np.ndarray:
    """5-bit quantisation followed by a 2x2 median filter per colour plane.

    The window at ``(i, j)`` covers rows ``i-1, i`` and columns ``j-1, j`` with
    edge replication; of the four sorted values the upper middle one is taken.
    Accepts HWC or NHWC and returns float32 of the same shape.
    """
    arr = np.asarray(x)
    if arr.ndim not in (3, 4) or arr.shape[-1] != 3:
        raise InvalidInputError(f"expected HWC or NHWC RGB images, got {arr.shape}")
    q = reduce_bit_depth(arr)
    size = (2, 2, 1) if q.ndim == 3 else (1, 2, 2, 1)
    return median_filter(q, size=size, mode="nearest").astype(np.float32)


def squeeze_distance(detector, images) -> np.ndarray:
    """L1 distance between the (real, fake) score vectors of each image and its squeezed copy."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    p = detector.score(images)
    q = detector.score(feature_squeeze(images))
    return 2.0 * np.abs(p - q)


def calibrate_threshold(legit_distances, fpr: float) -> float:
    """Smallest threshold such that at most ``fpr`` of the legitimate distances exceed it."""
    if not 0 <= fpr < 1:
        raise ConfigurationError("fpr must lie in [0, 1)")
    d = np.sort(np.asarray(legit_distances, dtype=np.float64))[::-1]
    if len(d) == 0:
        raise InvalidInputError("no legitimate distances")
    k = int(np.floor(fpr * len(d)))
    return float(d[min(k, len(d) - 1)])


def squeeze_detect(detector, x, threshold: float):
    """True where the squeeze distance exceeds ``threshold`` (flagged adversarial)."""
    flags = squeeze_distance(detector, x) > threshold
    return bool(flags[0]) if np.asarray(x).ndim == 3 else flags


def evaluate_squeezing(detector, calibration, legit_eval, adversarial, fprs=DEFAULT_FPRS) -> list[dict]:
    """Calibrate on ``calibration`` images; report realised FPR and adversarial detection rate."""
    cal = squeeze_distance(detector, calibration)
    leg = squeeze_distance(detector, legit_eval)
    adv = squeeze_distance(detector, adversarial) if len(adversarial) else np.zeros(0)
    rows = []
    for fpr in fprs:
        t = calibrate_threshold(cal, fpr)
        rows.append({
            "target_fpr": fpr,
            "threshold": t,
            "calibration_fpr": float(np.mean(cal > t)),
            "heldout_fpr": float(np.mean(leg > t)),
            "detection_rate": float(np.mean(adv > t)) if len(adv) else float("nan"),
        })
    return rows


@dataclass(frozen=True)
class PGDConfig:
    epsilon: float = 9 / 255
    step: float = 1 / 255
    steps: int = 10


@dataclass(frozen=True)
class DefenseConfig:
    num_calibration: int = 1000       # legitimate fakes used to pick thresholds
    num_heldout: int = 1000           # separate legitimate fakes for realised FPR
    num_attack: int = 50              # images attacked per method
    image_seed: int = 5000
    fprs: tuple[float, ...] = DEFAULT_FPRS
    pgd: PGDConfig = PGDConfig()
    train: DetectorTrainConfig = DetectorTrainConfig()
    seed: int = 0


def adversarial_training(real, fake, seed: int = 0, cfg: DetectorTrainConfig = DetectorTrainConfig(),
                         pgd: PGDConfig = PGDConfig()) -> ToyDetector:
    """Train a toy detector where half of every batch is replaced by PGD examples
    crafted against the current weights (label-flipping target)."""
    x_tr, y_tr, x_te, y_te = _split(real, fake, seed, cfg.holdout)
    torch.manual_seed(seed)
    model = ToyDetector(cfg.width)

    def perturb(m, x, y):
        m.requires_grad_(False)
        adv = pgd_torch(m, x, 1.0 - y, pgd.epsilon, pgd.step, pgd.steps)
        m.requires_grad_(True)
        return adv

    fit_detector(model, x_tr, y_tr, seed, cfg, perturb=perturb)
    model.requires_grad_(False)
    if len(y_te):
        with torch.no_grad():
            model.heldout_accuracy = float(((model(x_te) > 0).float() == y_te).float().mean())
    return model


def pgd_examples(detector, images, labels, pgd: PGDConfig = PGDConfig()) -> np.ndarray:
    """PGD examples pushing each image toward the opposite label."""
    labels = np.asarray(labels)
    out = np.empty_like(np.asarray(images, dtype=np.float32))
    for t in (0, 1):
        idx = np.flatnonzero(labels != t)
        if len(idx):
            out[idx] = pgd_attack(np.asarray(images)[idx], detector, pgd.epsilon, pgd.step, pgd.steps, t=t)
    return out


def defense_table(detectors: dict, clean_images, clean_labels, attacks: dict) -> list[dict]:
    """Rows per detector: clean accuracy and accuracy on each named attack's examples.

    ``attacks`` maps a column name to ``(images, labels)``; attack examples
    are typically crafted against the undefended detector (transfer setting).
    """
    rows = []
    for name, det in detectors.items():
        row = {"detector": name, "clean": accuracy(det, clean_images, clean_labels)}
        for col, (imgs, labels) in attacks.items():
            row[col] = accuracy(det, imgs, labels) if len(imgs) else float("nan")
        rows.append(row)
    return rows

