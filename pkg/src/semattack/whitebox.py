"""Masked-gradient attack in style space, restarts, and pixel baselines.

Attacks run on a batch of style codes at once. Every image keeps its own
iteration counter, restart count, trajectory and ledger, so a batch gives the
same per-image results as running the images one at a time.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .detectors import QueryLedger
from .errors import ConfigurationError, ContractError, InvalidInputError, OptimizationError
from .imaging import to_numpy, to_tensor
from .latent import ChannelMask, StyleCode
from .semdisc import torch_semantic_loss


@dataclass(frozen=True)
class WhiteboxConfig:
    alpha: float = 0.5
    max_iters: int = 200
    target: int = 0
    step_scale: float = 0.05          # step per iteration, in channel standard deviations
    per_attribute: int = 3            # restart codes sampled per candidate attribute
    restart_scale: float = 1.0        # restart noise, in channel standard deviations
    rollback: int = 100
    max_restarts: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ConfigurationError("max_iters must be >= 1")
        if not 0 <= self.rollback <= self.max_iters:
            raise ConfigurationError("rollback must lie in [0, max_iters]")
        if self.alpha < 0 or self.step_scale <= 0:
            raise ConfigurationError("alpha must be >= 0 and step_scale > 0")
        if self.target not in (0, 1):
            raise ConfigurationError("target label must be 0 (real) or 1 (fake)")


@dataclass
class AttackResult:
    success: bool
    image: np.ndarray
    style: StyleCode
    initial_style: StyleCode
    iterations: int
    queries: int
    trajectory: list[float]
    restarts: int = 0
    final_score: float = float("nan")
    budget_exhausted: bool = False
    elite_scores: list[float] = field(default_factory=list)
    generation_queries: list[int] = field(default_factory=list)

    def unmasked_violations(self, mask: ChannelMask) -> int:
        """Channels outside the mask whose bits differ from the initial code."""
        off = ~mask.as_bool()
        a = self.style.flat[off].view(np.uint32)
        b = self.initial_style.flat[off].view(np.uint32)
        return int(np.count_nonzero(a != b))

    def record(self) -> dict:
        return {
            "success": bool(self.success),
            "final_score": float(self.final_score),
            "iterations": int(self.iterations),
            "queries": int(self.queries),
            "restarts": int(self.restarts),
            "budget_exhausted": bool(self.budget_exhausted),
            "trajectory": [float(v) for v in self.trajectory],
            "elite_scores": [float(v) for v in self.elite_scores],
            "generation_queries": [int(v) for v in self.generation_queries],
            "style_digest": self.style.digest(),
        }

    def digest(self) -> str:
        doc = self.record()
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def style_channel_std(generator, n: int = 4096, seed: int = 12345) -> np.ndarray:
    """Per-channel standard deviation of style codes of mapped samples."""
    return generator.sample_styles(n, seed).double().std(0).clamp_min(1e-6).float().numpy()


def _require_gradients(detector):
    if not getattr(detector, "has_gradients", False):
        raise ContractError(f"{type(detector).__name__} does not expose gradients")


def _predict(score: np.ndarray, threshold: float) -> np.ndarray:
    return (score >= threshold).astype(int)


def random_sampling_restart(s: StyleCode, catalog, selection, detector, ledger: QueryLedger,
                            generator, current_score: float, channel_std, rng: np.random.Generator,
                            per_attribute: int = 3, scale: float = 1.0):
    """Sample ``per_attribute`` codes per candidate attribute, each perturbing only
    that attribute's channels, and return ``(elite, elite_score, population_size)``.

    ``elite`` is None unless its score is strictly below ``current_score``.
    """
    selection = list(selection)
    if not selection:
        raise ConfigurationError("restart needs a nonempty selection")
    std = np.asarray(channel_std, dtype=np.float32)
    pop = []
    for name in selection:
        idx = np.asarray(catalog.indices(name), dtype=int)
        for _ in range(per_attribute):
            code = s.flat.copy()
            if len(idx):
                code[idx] = code[idx] + (scale * std[idx] * rng.standard_normal(len(idx))).astype(np.float32)
            pop.append(code)
    pop = np.stack(pop)
    scores = detector.score(generator.synthesize(pop), ledger)
    best = int(np.argmin(scores))
    if scores[best] < current_score:
        return StyleCode(pop[best], s.layout), float(scores[best]), len(pop)
    return None, float(scores[best]), len(pop)


def whitebox_optimize(styles, generator, detector, ds, mask: ChannelMask, cfg: WhiteboxConfig,
                      channel_std, catalog=None, selection=()) -> list[AttackResult]:
    """Run the masked signed-gradient loop on ``(N, C)`` style codes.

    Per image: evaluate; stop on the target label; at ``max_iters`` try a
    random-sampling restart (rolling the counter back by ``cfg.rollback``) or
    give up; otherwise step every masked channel by ``step_scale * std``
    against the gradient of ``BCE + alpha * semantic_loss``.
    """
    _require_gradients(detector)
    s0 = np.ascontiguousarray(np.asarray(styles, dtype=np.float32))
    if s0.ndim == 1:
        s0 = s0[None]
    n, c = s0.shape
    if mask.num_channels != c:
        raise InvalidInputError(f"mask has {mask.num_channels} channels, styles have {c}")
    layout = tuple(generator.layout)
    on = torch.from_numpy(mask.as_bool())
    step = torch.from_numpy(cfg.step_scale * np.asarray(channel_std, dtype=np.float32))
    threshold = getattr(detector, "threshold", 0.5)
    target = torch.full((n,), float(cfg.target))
    ledgers = [QueryLedger() for _ in range(n)]
    rngs = [np.random.default_rng([cfg.seed, i]) for i in range(n)]
    use_restarts = catalog is not None and len(selection) > 0 and cfg.max_restarts > 0

    s = torch.from_numpy(s0.copy())
    it = np.zeros(n, dtype=int)
    steps_taken = np.zeros(n, dtype=int)
    restarts = np.zeros(n, dtype=int)
    done = np.zeros(n, dtype=bool)
    success = np.zeros(n, dtype=bool)
    final = np.full(n, np.nan)
    traj = [[] for _ in range(n)]
    while not done.all():
        act = np.flatnonzero(~done)
        sa = s[act].clone().requires_grad_(True)
        logits = detector.torch_logits(generator.torch_synthesize(sa))
        loss = F.binary_cross_entropy_with_logits(logits, target[act], reduction="none")
        if cfg.alpha and ds is not None:
            loss = loss + cfg.alpha * torch_semantic_loss(ds, sa)
        if not torch.isfinite(loss).all():
            raise OptimizationError("non-finite attack loss", [traj[i] for i in act])
        (grad,) = torch.autograd.grad(loss.sum(), sa)
        scores = torch.sigmoid(logits.detach()).double().numpy()
        stepping = []
        for k, i in enumerate(act):
            ledgers[i].charge(1)
            traj[i].append(float(scores[k]))
            final[i] = scores[k]
            if _predict(scores[k], threshold) == cfg.target:
                done[i] = success[i] = True
                continue
            if it[i] >= cfg.max_iters:
                if use_restarts and restarts[i] < cfg.max_restarts:
                    cur = StyleCode(s[i].numpy(), layout)
                    elite, _, _ = random_sampling_restart(
                        cur, catalog, selection, detector, ledgers[i], generator, float(scores[k]),
                        channel_std, rngs[i], cfg.per_attribute, cfg.restart_scale)
                    restarts[i] += 1
                    if elite is not None:
                        s[i] = torch.where(on, torch.from_numpy(elite.flat), s[i])
                        it[i] -= cfg.rollback
                        continue
                done[i] = True
                continue
            stepping.append(k)
        if stepping:
            idx = torch.as_tensor(act[stepping])
            g = grad[stepping]
            moved = s[idx] - step * torch.sign(g)
            s[idx] = torch.where(on, moved, s[idx])
            it[act[stepping]] += 1
            steps_taken[act[stepping]] += 1
    images = generator.synthesize(s.numpy())
    return [
        AttackResult(
            success=bool(success[i]), image=images[i], style=StyleCode(s[i].numpy().copy(), layout),
            initial_style=StyleCode(s0[i], layout), iterations=int(steps_taken[i]), queries=ledgers[i].count,
            trajectory=traj[i], restarts=int(restarts[i]), final_score=float(final[i]),
        )
        for i in range(n)
    ]


def whitebox_attack(x_fake, generator, encoder, detector, ds, mask: ChannelMask, stats, cfg: WhiteboxConfig,
                    metric, channel_std, inversion=None, catalog=None, selection=()) -> list[AttackResult]:
    """Invert the image(s), then run :func:`whitebox_optimize` on the style codes."""
    from .inversion import InversionConfig, fine_tune_latent

    _require_gradients(detector)
    inv = fine_tune_latent(x_fake, generator, encoder, stats, inversion or InversionConfig(), metric)
    styles = generator.affine_to_style(inv.wplus)
    return whitebox_optimize(styles, generator, detector, ds, mask, cfg, channel_std, catalog, selection)


# -- pixel-space baselines --------------------------------------------------

def pgd_torch(detector, x: torch.Tensor, target: torch.Tensor, epsilon: float, step: float, steps: int,
              random_start: bool = False, seed: int = 0) -> torch.Tensor:
    """L-inf PGD pushing ``x`` toward label ``target`` (per sample)."""
    _require_gradients(detector)
    if epsilon < 0 or step < 0 or steps < 0:
        raise ConfigurationError("epsilon, step and steps must be >= 0")
    x = x.detach()
    adv = x.clone()
    if random_start and epsilon > 0:
        gen = torch.Generator().manual_seed(seed)
        adv = (adv + (torch.rand(adv.shape, generator=gen) * 2 - 1) * epsilon).clamp(0, 1)
    lo, hi = x - epsilon, x + epsilon
    for _ in range(steps):
        adv.requires_grad_(True)
        loss = F.binary_cross_entropy_with_logits(detector.torch_logits(adv), target, reduction="sum")
        (grad,) = torch.autograd.grad(loss, adv)
        adv = adv.detach() - step * grad.sign()
        adv = torch.minimum(torch.maximum(adv, lo), hi).clamp(0, 1)
    return adv.detach()


def fgsm_attack(x, detector, epsilon: float, t: int = 0) -> np.ndarray:
    """One signed-gradient step of size ``epsilon`` toward label ``t``."""
    _require_gradients(detector)
    xt = to_tensor(x)
    adv = xt.clone().requires_grad_(True)
    target = torch.full((xt.shape[0],), float(t))
    loss = F.binary_cross_entropy_with_logits(detector.torch_logits(adv), target, reduction="sum")
    (grad,) = torch.autograd.grad(loss, adv)
    out = (xt - epsilon * grad.sign()).clamp(0, 1)
    return _like(x, out)


def pgd_attack(x, detector, epsilon: float, step: float, steps: int, t: int = 0,
               random_start: bool = False, seed: int = 0) -> np.ndarray:
    xt = to_tensor(x)
    target = torch.full((xt.shape[0],), float(t))
    return _like(x, pgd_torch(detector, xt, target, epsilon, step, steps, random_start, seed))


def _like(x, out: torch.Tensor) -> np.ndarray:
    arr = to_numpy(out)
    return arr[0] if np.asarray(x).ndim == 3 else arr
