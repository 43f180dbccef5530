"""Attack campaigns, ablations and attribute ranking over a toy stack.

A campaign is fully described by its :class:`CampaignConfig`; the run
directory keeps that snapshot next to the per-image JSONL, so ``replay``
can recompute and compare the aggregates.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from ..attributes import build_mask
from ..blackbox import GAConfig, ga_optimize
from ..detectors import ToyDetector
from ..errors import ConfigurationError
from ..imaging import save_png
from ..inversion import InversionConfig, fine_tune_latent
from ..latent import StyleCode
from ..whitebox import WhiteboxConfig, whitebox_optimize
from .configs import from_dict
from .defenses import DefenseConfig
from .metrics import CampaignReport, ProxyQuality, compute_metrics
from .stack import Stack, StackConfig, cached_stack, load_stack

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CampaignConfig:
    mode: str = "whitebox"
    selection: tuple[str, ...] | None = None      # None = every cataloged attribute
    num_images: int = 20
    image_seed: int = 1000
    detector: str | None = None                   # checkpoint dir; None = the stack's detector
    query_budget: int | None = None
    inversion: InversionConfig = InversionConfig()
    whitebox: WhiteboxConfig = WhiteboxConfig()
    blackbox: GAConfig = GAConfig()
    defense: DefenseConfig = DefenseConfig()
    stack: StackConfig = StackConfig()
    stack_dir: str | None = None
    output_root: str = "runs"

    def __post_init__(self):
        if self.mode not in ("whitebox", "blackbox"):
            raise ConfigurationError("mode must be 'whitebox' or 'blackbox'")
        if self.num_images < 1:
            raise ConfigurationError("num_images must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "CampaignConfig":
        return from_dict(cls, doc)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


def open_stack(cfg: CampaignConfig) -> Stack:
    return load_stack(cfg.stack_dir) if cfg.stack_dir else cached_stack(cfg.stack)


def resolve_detector(stack: Stack, path: str | None):
    return stack.detector if path is None else ToyDetector.load(path)


def invert(stack: Stack, images, cfg: InversionConfig = InversionConfig()) -> np.ndarray:
    """``(N, C)`` style codes of the fine-tuned inversions."""
    inv = fine_tune_latent(images, stack.generator, stack.encoder, stack.stats, cfg, stack.metric)
    return stack.generator.affine_to_style(inv.wplus)


def selection_of(stack: Stack, selection) -> list[str]:
    return list(stack.catalog.names) if selection is None else list(selection)


def attack_styles(stack: Stack, styles, selection, mode: str, detector, wb: WhiteboxConfig = WhiteboxConfig(),
                  ga: GAConfig = GAConfig(), query_budget=None):
    """Run one attack per style code; returns the list of AttackResults."""
    mask = build_mask(stack.catalog, selection)
    if mode == "whitebox":
        return whitebox_optimize(styles, stack.generator, detector, stack.semdisc, mask, wb,
                                 stack.channel_std, stack.catalog, selection)
    if mask.count == 0:
        raise ConfigurationError("selection has no editable channels")
    out = []
    for i, flat in enumerate(styles):
        out.append(ga_optimize(StyleCode(flat, stack.generator.layout), stack.generator, detector,
                               stack.semdisc, stack.identity, mask, replace(ga, seed=ga.seed + i),
                               stack.channel_std, query_budget))
    return out


def summarize(stack: Stack, results, images, detector, config=None, seeds=None) -> CampaignReport:
    clean = detector.score(images)
    quality = ProxyQuality(stack.metric, stack.semdisc)
    return compute_metrics(results, clean, detector.threshold, quality, images, config, seeds)


def run_campaign(cfg: CampaignConfig, stack: Stack | None = None, detector=None):
    """Fresh fakes -> inversion -> attack -> report. Returns ``(report, results, images)``."""
    stack = stack or open_stack(cfg)
    detector = detector or resolve_detector(stack, cfg.detector)
    images = stack.fakes(cfg.num_images, cfg.image_seed)
    styles = invert(stack, images, cfg.inversion)
    selection = selection_of(stack, cfg.selection)
    results = attack_styles(stack, styles, selection, cfg.mode, detector, cfg.whitebox, cfg.blackbox,
                            cfg.query_budget)
    seeds = {"stack": cfg.stack.seed, "images": cfg.image_seed,
             "attack": cfg.whitebox.seed if cfg.mode == "whitebox" else cfg.blackbox.seed}
    report = summarize(stack, results, images, detector, cfg.to_dict(), seeds)
    return report, results, images


# -- run directories --------------------------------------------------------

def make_run_dir(root, config: dict, label: str = "run") -> Path:
    digest = hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:12]
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = Path(root) / f"{stamp}-{label}-{digest}"
    suffix = 1
    while path.exists():
        path = Path(root) / f"{stamp}-{label}-{digest}-{suffix}"
        suffix += 1
    path.mkdir(parents=True)
    (path / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True))
    return path


def write_jsonl(path, rows):
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def write_campaign(run_dir: Path, report: CampaignReport, results=None, images=None, name: str = "results"):
    write_jsonl(run_dir / f"{name}.jsonl", report.records)
    (run_dir / f"{name}_summary.json").write_text(json.dumps(
        {**report.aggregates(), "seeds": report.seeds}, indent=2, sort_keys=True))
    if results is not None:
        png = run_dir / "png"
        for i, r in enumerate(results):
            save_png(r.image, png / f"{name}_{i:04d}_adv.png")
            if images is not None:
                save_png(images[i], png / f"{name}_{i:04d}_orig.png")


def replay(run_dir, stack: Stack | None = None, name: str = "results") -> tuple[bool, dict, dict]:
    """Re-run a campaign from its config snapshot; returns ``(identical, old, new)`` aggregates."""
    run_dir = Path(run_dir)
    cfg = CampaignConfig.from_dict(json.loads((run_dir / "config.json").read_text()))
    old = json.loads((run_dir / f"{name}_summary.json").read_text())
    report, _, _ = run_campaign(cfg, stack)
    new = {**report.aggregates(), "seeds": report.seeds}
    old_rows = read_jsonl(run_dir / f"{name}.jsonl")
    same = json.dumps(old, sort_keys=True) == json.dumps(new, sort_keys=True) and \
        [r["style_digest"] for r in old_rows] == [r["style_digest"] for r in report.records]
    return same, old, new


# -- ablation and ranking ---------------------------------------------------

ABLATION_VARIANTS = ("v0", "v1", "v2")


def ablation_configs(inversion: InversionConfig, wb: WhiteboxConfig, constrained_lambda: float | None = None):
    """``{variant: (InversionConfig, WhiteboxConfig)}``.

    v0: no latent constraints (lambda = 0, alpha = 0) and no restarts;
    v1: constraints on, no restarts; v2: constraints and restarts.
    """
    lam = inversion.lambda_prior if constrained_lambda is None else constrained_lambda
    alpha = wb.alpha
    return {
        "v0": (replace(inversion, lambda_prior=0.0), replace(wb, alpha=0.0, max_restarts=0)),
        "v1": (replace(inversion, lambda_prior=lam), replace(wb, alpha=alpha, max_restarts=0)),
        "v2": (replace(inversion, lambda_prior=lam), replace(wb, alpha=alpha)),
    }


def run_ablation(stack: Stack, images, selection, inversion: InversionConfig = InversionConfig(),
                 wb: WhiteboxConfig = WhiteboxConfig(), detector=None, variants=ABLATION_VARIANTS):
    """Run each variant on the same images and seeds; returns ``{variant: CampaignReport}``."""
    detector = detector or stack.detector
    configs = ablation_configs(inversion, wb)
    reports, styles_by_lambda = {}, {}
    for v in variants:
        inv_cfg, wb_cfg = configs[v]
        key = inv_cfg.lambda_prior
        if key not in styles_by_lambda:
            styles_by_lambda[key] = invert(stack, images, inv_cfg)
        results = attack_styles(stack, styles_by_lambda[key], selection, "whitebox", detector, wb_cfg)
        reports[v] = summarize(stack, results, images, detector,
                               {"variant": v, "inversion": asdict(inv_cfg), "whitebox": asdict(wb_cfg)},
                               {"attack": wb_cfg.seed})
        log.info("ablation %s asr %.3f", v, float(reports[v].asr))
    return reports


def rank_attributes(stack: Stack, detectors, images, styles=None, wb: WhiteboxConfig = WhiteboxConfig(),
                    inversion: InversionConfig = InversionConfig(), attributes=None):
    """Single-attribute white-box ASR per attribute, averaged over ``detectors``.

    Returns rows ``{"attribute", "asr", "per_detector"}`` sorted by descending
    mean ASR; ties keep catalog order. Attributes without channels score 0.
    """
    detectors = list(detectors) if isinstance(detectors, (list, tuple)) else [detectors]
    if styles is None:
        styles = invert(stack, images, inversion)
    names = list(attributes or stack.catalog.names)
    rows = []
    for name in names:
        per = []
        for det in detectors:
            if not stack.catalog.channels[name]:
                per.append(0.0)
                continue
            results = attack_styles(stack, styles, [name], "whitebox", det, wb)
            per.append(sum(r.success for r in results) / len(results))
        rows.append({"attribute": name, "asr": float(np.mean(per)), "per_detector": per})
        log.info("attribute %s asr %.3f", name, rows[-1]["asr"])
    order = sorted(range(len(rows)), key=lambda i: (-rows[i]["asr"], i))
    return [rows[i] for i in order]


def selection_sweep(stack: Stack, ranked_names, images, styles, detector=None,
                    wb: WhiteboxConfig = WhiteboxConfig()):
    """ASR as the selection grows along ``ranked_names``; returns a list of rows."""
    detector = detector or stack.detector
    rows = []
    for k in range(1, len(ranked_names) + 1):
        sel = list(ranked_names[:k])
        results = attack_styles(stack, styles, sel, "whitebox", detector, wb)
        asr = sum(r.success for r in results) / len(results)
        rows.append({"size": k, "selection": sel, "asr": asr,
                     "channels": int(build_mask(stack.catalog, sel).count)})
        log.info("selection size %d asr %.3f", k, asr)
    return rows


# -- countermeasures --------------------------------------------------------

def run_defense_eval(cfg: CampaignConfig, stack: Stack | None = None, pgd_detector=None) -> dict:
    """Adversarial training and feature squeezing against the toy stack.

    The PGD-trained detector sees the same training data as the stack's
    detector. PGD and white-box examples are crafted against the undefended
    detector and scored by both (transfer); the black-box attack runs
    directly against the PGD-trained detector.
    """
    from ..toyfaces import generate_toy_dataset
    from .defenses import adversarial_training, defense_table, evaluate_squeezing, pgd_examples

    stack = stack or open_stack(cfg)
    dcfg, scfg = cfg.defense, stack.config
    base = stack.detector
    if pgd_detector is None:
        real, _ = generate_toy_dataset(scfg.num_real, scfg.seed)
        fake = stack.fakes(scfg.num_fake, scfg.seed + 101)
        pgd_detector = adversarial_training(real, fake, dcfg.seed, dcfg.train, dcfg.pgd)

    n = dcfg.num_attack
    x_fake = stack.fakes(n, dcfg.image_seed)
    x_real, _ = generate_toy_dataset(n, dcfg.image_seed)
    clean = np.concatenate([x_real, x_fake])
    clean_labels = np.r_[np.zeros(n), np.ones(n)]
    x_pgd = pgd_examples(base, x_fake, np.ones(n), dcfg.pgd)

    styles = invert(stack, x_fake, cfg.inversion)
    selection = selection_of(stack, cfg.selection)
    wb_results = attack_styles(stack, styles, selection, "whitebox", base, cfg.whitebox)
    x_wb = np.stack([r.image for r in wb_results])
    ga_results = attack_styles(stack, styles, selection, "blackbox", pgd_detector, ga=cfg.blackbox,
                               query_budget=cfg.query_budget)

    table = defense_table({"base": base, "pgd_trained": pgd_detector}, clean, clean_labels,
                          {"pgd": (x_pgd, np.ones(n)), "whitebox": (x_wb, np.ones(n))})
    ga_asr = sum(r.success for r in ga_results) / n
    legit_cal = stack.fakes(dcfg.num_calibration, dcfg.image_seed + 1)
    legit_eval = stack.fakes(dcfg.num_heldout, dcfg.image_seed + 2)
    wb_adv = x_wb[[r.success for r in wb_results]]
    squeeze = {
        "whitebox": evaluate_squeezing(base, legit_cal, legit_eval, wb_adv, dcfg.fprs),
        "pgd": evaluate_squeezing(base, legit_cal, legit_eval, x_pgd, dcfg.fprs),
    }
    return {
        "table": table,
        "blackbox_vs_pgd_trained": {"asr": ga_asr, "attempted": n,
                                    "queries": int(sum(r.queries for r in ga_results))},
        "pgd_trained_heldout_accuracy": pgd_detector.heldout_accuracy,
        "squeezing": squeeze,
        "pgd_detector": pgd_detector,
    }
