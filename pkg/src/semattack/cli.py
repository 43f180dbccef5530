"""Command-line entry point: ``semattack <command> [options]``.

Training commands build a stack directory one piece at a time (or all at
once with ``build-stack``). Attack and evaluation commands read a single JSON
config (see ``CampaignConfig``) and write JSONL + PNG into a fresh run
directory named by timestamp and config hash.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

log = logging.getLogger("semattack")


# -- helpers ----------------------------------------------------------------

def _load_config(path):
    from .harness.campaign import CampaignConfig

    if path is None:
        return CampaignConfig()
    return CampaignConfig.from_dict(json.loads(Path(path).read_text()))


def _stack_config(work: Path):
    from .harness.stack import STACK_FILE, StackConfig

    f = work / STACK_FILE
    if f.exists():
        return StackConfig.from_dict(json.loads(f.read_text())["config"])
    return StackConfig()


def _update_manifest(work: Path, key: str, value):
    from .harness.stack import STACK_FILE

    f = work / STACK_FILE
    doc = json.loads(f.read_text()) if f.exists() else {"config": {}, "digests": {}}
    doc.setdefault("digests", {})[key] = value
    f.write_text(json.dumps(doc, indent=2, sort_keys=True))


def _read_images(path) -> np.ndarray:
    from .imaging import load_png

    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path).astype(np.float32)
    if path.suffix == ".npz":
        return np.load(path)["images"].astype(np.float32)
    if path.is_dir():
        return np.stack([load_png(p) for p in sorted(path.glob("*.png"))])
    return load_png(path)[None]


def _selection(arg, cfg):
    if arg is None:
        return cfg
    names = tuple(s for s in arg.split(",") if s)
    return replace(cfg, selection=names)


def _print(doc):
    print(json.dumps(doc, indent=2, sort_keys=True, default=str))


# -- data and training ------------------------------------------------------

def cmd_gen_data(args):
    from .harness.stack import STACK_FILE, StackConfig
    from .imaging import save_grid
    from .toyfaces import generate_toy_dataset

    cfg = _load_config(args.config).stack if args.config else StackConfig()
    n = args.num or cfg.num_real
    seed = cfg.seed if args.seed is None else args.seed
    cfg = replace(cfg, num_real=n, seed=seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    images, specs = generate_toy_dataset(n, seed)
    np.savez_compressed(out / "data.npz", images=images)
    with open(out / "specs.jsonl", "w") as fh:
        for s in specs:
            fh.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")
    save_grid(images[:64], out / "samples.png")
    (out / STACK_FILE).write_text(json.dumps({"config": cfg.to_dict(), "digests": {}}, indent=2, sort_keys=True))
    _print({"images": n, "seed": seed, "out": str(out)})


def _real(work: Path):
    return np.load(work / "data.npz")["images"]


def cmd_train_gan(args):
    from .generator import train_toy_generator
    from .imaging import save_grid

    work = Path(args.work)
    cfg = _stack_config(work)
    train = cfg.gan if args.steps is None else replace(cfg.gan, steps=args.steps)
    gen = train_toy_generator(_real(work), cfg.generator, cfg.seed, train)
    gen.save(work / "generator", cfg.seed)
    save_grid(gen.synthesize(gen.sample_styles(64, cfg.seed + 5).numpy()), work / "generator" / "samples.png")
    _update_manifest(work, "generator", gen.digest())
    _print({"generator": str(work / "generator"), "digest": gen.digest()})


def cmd_train_detector(args):
    from .detectors import train_toy_detector
    from .generator import ToyGenerator
    from .harness.defenses import adversarial_training

    work = Path(args.work)
    cfg = _stack_config(work)
    gen = ToyGenerator.load(work / "generator")
    fake = gen.synthesize(gen.sample_styles(cfg.num_fake, cfg.seed + 101).numpy())
    train = cfg.detector if args.epochs is None else replace(cfg.detector, epochs=args.epochs)
    if args.pgd:
        det, name = adversarial_training(_real(work), fake, cfg.seed, train), "detector_pgd"
    else:
        det, name = train_toy_detector(_real(work), fake, cfg.seed, train), "detector"
    det.save(work / name, cfg.seed)
    _update_manifest(work, name, det.digest())
    _print({name: str(work / name), "heldout_accuracy": det.heldout_accuracy})


def cmd_train_encoder(args):
    from .detectors import ToyDetector
    from .generator import ToyGenerator
    from .inversion import PerceptualLoss, train_encoder

    work = Path(args.work)
    cfg = _stack_config(work)
    gen = ToyGenerator.load(work / "generator")
    metric = PerceptualLoss.from_detector(ToyDetector.load(work / "detector"))
    train = cfg.encoder if args.steps is None else replace(cfg.encoder, steps=args.steps)
    enc = train_encoder(gen, metric, cfg.seed, train)
    enc.save(work / "encoder", cfg.seed)
    _update_manifest(work, "encoder", enc.digest())
    _print({"encoder": str(work / "encoder"), "digest": enc.digest()})


def cmd_train_semdisc(args):
    from .detectors import ToyDetector
    from .generator import ToyGenerator
    from .inversion import PerceptualLoss, ToyEncoder
    from .semdisc import train_semantic_discriminator

    work = Path(args.work)
    cfg = _stack_config(work)
    train = cfg.semdisc
    if args.steps is not None:
        train = replace(train, steps=args.steps)
    if args.gamma is not None:
        train = replace(train, gamma=args.gamma)
    gen = ToyGenerator.load(work / "generator")
    metric = PerceptualLoss.from_detector(ToyDetector.load(work / "detector"))
    ds = train_semantic_discriminator(gen, ToyEncoder.load(work / "encoder"), _real(work), train, cfg.seed, metric)
    ds.save(work / "semdisc", cfg.seed)
    _update_manifest(work, "semdisc", ds.digest())
    _print({"semdisc": str(work / "semdisc"), "digest": ds.digest()})


def cmd_train_identity(args):
    from .checkpoint import parameter_digest
    from .detectors import train_identity_model

    work = Path(args.work)
    cfg = _stack_config(work)
    model = train_identity_model(cfg.seed, cfg.identity, cfg.identity_threshold)
    model.save(work / "identity", cfg.seed)
    _update_manifest(work, "identity", parameter_digest(model))
    _print({"identity": str(work / "identity")})


def cmd_estimate_stats(args):
    from .generator import ToyGenerator
    from .latent import estimate_gaussian_stats
    from .whitebox import style_channel_std

    work = Path(args.work)
    cfg = _stack_config(work)
    gen = ToyGenerator.load(work / "generator")
    stats = estimate_gaussian_stats(gen, args.samples or cfg.stats_samples, cfg.seed)
    stats.save(work / "stats.json")
    np.save(work / "channel_std.npy", style_channel_std(gen))
    _print({"stats": str(work / "stats.json"), "samples": stats.sample_count})


def cmd_discover(args):
    from .attributes import discover_channels
    from .generator import ToyGenerator
    from .toyfaces import region_masks

    work = Path(args.work)
    cfg = _stack_config(work)
    gen = ToyGenerator.load(work / "generator")
    probes = args.probes or cfg.probes
    threshold = cfg.overlap_threshold if args.threshold is None else args.threshold
    catalog = discover_channels(gen, region_masks(), probes, threshold, cfg.seed)
    catalog.save(work / "catalog.json")
    _print({name: len(ch) for name, ch in catalog.channels.items()})


def cmd_build_stack(args):
    from .harness.stack import build_stack

    cfg = _load_config(args.config)
    stack = build_stack(cfg.stack, args.out)
    _print({"stack": str(stack.directory), "digests": stack.digests})


# -- inversion and attacks --------------------------------------------------

def cmd_invert(args):
    from .harness.campaign import make_run_dir, open_stack, write_jsonl
    from .imaging import save_png
    from .inversion import fine_tune_latent

    cfg = _load_config(args.config)
    if args.stack:
        cfg = replace(cfg, stack_dir=args.stack)
    inv_cfg = cfg.inversion
    if args.lambda_prior is not None:
        inv_cfg = replace(inv_cfg, lambda_prior=args.lambda_prior)
    if args.iterations is not None:
        inv_cfg = replace(inv_cfg, iterations=args.iterations)
    cfg = replace(cfg, inversion=inv_cfg)
    stack = open_stack(cfg)
    images = _read_images(args.images) if args.images else stack.fakes(cfg.num_images, cfg.image_seed)
    res = fine_tune_latent(images, stack.generator, stack.encoder, stack.stats, inv_cfg, stack.metric)
    run = make_run_dir(args.out_root or cfg.output_root, cfg.to_dict(), "invert")
    recon = stack.generator.synthesize(stack.generator.affine_to_style(res.wplus))
    write_jsonl(run / "inversion.jsonl", [{"index": i, **res.single(i)} for i in range(len(images))])
    for i in range(len(images)):
        save_png(images[i], run / "png" / f"{i:04d}_orig.png")
        save_png(recon[i], run / "png" / f"{i:04d}_recon.png")
    _print({"run": str(run), "mean_final_objective": float(res.final_objective.mean())})


def _attack(args, mode):
    from .harness.campaign import make_run_dir, run_campaign, write_campaign

    cfg = _selection(args.selection, _load_config(args.config))
    cfg = replace(cfg, mode=mode)
    if args.stack:
        cfg = replace(cfg, stack_dir=args.stack)
    if args.num_images:
        cfg = replace(cfg, num_images=args.num_images)
    if args.detector:
        cfg = replace(cfg, detector=args.detector)
    if mode == "blackbox":
        ga = cfg.blackbox
        if args.population is not None:
            ga = replace(ga, population=args.population)
        if args.threshold is not None:
            ga = replace(ga, threshold=args.threshold)
        cfg = replace(cfg, blackbox=ga)
        if args.query_budget is not None:
            cfg = replace(cfg, query_budget=args.query_budget)
    report, results, images = run_campaign(cfg)
    run = make_run_dir(args.out_root or cfg.output_root, cfg.to_dict(), mode)
    write_campaign(run, report, results, images)
    _print({"run": str(run), **report.aggregates()})


def cmd_attack_whitebox(args):
    _attack(args, "whitebox")


def cmd_attack_blackbox(args):
    _attack(args, "blackbox")


def cmd_rank_attributes(args):
    from .harness.campaign import (invert, make_run_dir, open_stack, rank_attributes, resolve_detector,
                                   selection_sweep)

    cfg = _load_config(args.config)
    if args.stack:
        cfg = replace(cfg, stack_dir=args.stack)
    stack = open_stack(cfg)
    detectors = [resolve_detector(stack, p) for p in (args.detector or [None])]
    images = stack.fakes(cfg.num_images, cfg.image_seed)
    styles = invert(stack, images, cfg.inversion)
    ranked = rank_attributes(stack, detectors, images, styles, cfg.whitebox)
    run = make_run_dir(args.out_root or cfg.output_root, cfg.to_dict(), "rank")
    (run / "ranking.json").write_text(json.dumps(ranked, indent=2))
    out = {"run": str(run), "ranking": [(r["attribute"], r["asr"]) for r in ranked]}
    if args.sweep:
        sweep = selection_sweep(stack, [r["attribute"] for r in ranked], images, styles, detectors[0], cfg.whitebox)
        (run / "sweep.json").write_text(json.dumps(sweep, indent=2))
        out["sweep"] = [(r["size"], r["asr"]) for r in sweep]
    _print(out)


def cmd_ablate(args):
    from .harness.campaign import make_run_dir, open_stack, run_ablation, selection_of, write_campaign

    cfg = _selection(args.selection, _load_config(args.config))
    if args.stack:
        cfg = replace(cfg, stack_dir=args.stack)
    stack = open_stack(cfg)
    images = stack.fakes(cfg.num_images, cfg.image_seed)
    reports = run_ablation(stack, images, selection_of(stack, cfg.selection), cfg.inversion, cfg.whitebox)
    run = make_run_dir(args.out_root or cfg.output_root, cfg.to_dict(), "ablate")
    for name, rep in reports.items():
        write_campaign(run, rep, name=name)
    _print({"run": str(run), **{k: {"asr": float(r.asr), "quality": r.quality.get("proxy")}
                                for k, r in reports.items()}})


def cmd_defend_eval(args):
    from .harness.campaign import make_run_dir, run_defense_eval

    cfg = _load_config(args.config)
    if args.stack:
        cfg = replace(cfg, stack_dir=args.stack)
    if args.num_attack:
        cfg = replace(cfg, defense=replace(cfg.defense, num_attack=args.num_attack))
    result = run_defense_eval(cfg)
    det = result.pop("pgd_detector")
    run = make_run_dir(args.out_root or cfg.output_root, cfg.to_dict(), "defend")
    det.save(run / "detector_pgd", cfg.defense.seed, {"pgd": asdict(cfg.defense.pgd)})
    (run / "defense.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    _print({"run": str(run), **result})


def cmd_report(args):
    from .harness.report import build_report

    rep = build_report(args.run)
    _print({"run": args.run, "plots": rep["plots"], "summaries": list(rep["summaries"])})


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semattack", description="Attribute-variation attacks on fake-face detectors (toy stack).")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "render the procedural face dataset into a stack directory")
    sp.add_argument("--out", required=True)
    sp.add_argument("--num", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--config")

    for name, fn, help_ in [
        ("train-gan", cmd_train_gan, "train the toy style-based generator"),
        ("train-detector", cmd_train_detector, "train the real/fake toy detector"),
        ("train-encoder", cmd_train_encoder, "train the image -> W+ encoder"),
        ("train-semdisc", cmd_train_semdisc, "train the style-code discriminator"),
        ("train-identity", cmd_train_identity, "train the identity embedder"),
        ("estimate-stats", cmd_estimate_stats, "fit P-space Gaussian statistics"),
        ("discover", cmd_discover, "map style channels to attributes"),
    ]:
        sp = add(name, fn, help_)
        sp.add_argument("--work", required=True, help="stack directory")
        if name in ("train-gan", "train-encoder", "train-semdisc"):
            sp.add_argument("--steps", type=int)
        if name == "train-semdisc":
            sp.add_argument("--gamma", type=float)
        if name == "train-detector":
            sp.add_argument("--epochs", type=int)
            sp.add_argument("--pgd", action="store_true", help="PGD adversarial training")
        if name == "estimate-stats":
            sp.add_argument("--samples", type=int)
        if name == "discover":
            sp.add_argument("--probes", type=int)
            sp.add_argument("--threshold", type=float)

    sp = add("build-stack", cmd_build_stack, "train every toy model in order")
    sp.add_argument("--out", required=True)
    sp.add_argument("--config")

    def campaign_args(sp):
        sp.add_argument("--config", help="campaign config JSON")
        sp.add_argument("--stack", help="stack directory (default: cached build of the config's stack)")
        sp.add_argument("--out-root", help="parent directory for run folders")

    sp = add("invert", cmd_invert, "embed images into W+ and fine-tune")
    campaign_args(sp)
    sp.add_argument("--images", help=".npy/.npz file, PNG file or directory of PNGs")
    sp.add_argument("--lambda-prior", type=float)
    sp.add_argument("--iterations", type=int)

    for name, fn in (("attack-whitebox", cmd_attack_whitebox), ("attack-blackbox", cmd_attack_blackbox)):
        sp = add(name, fn, f"{name.split('-')[1]} attribute-variation attack campaign")
        campaign_args(sp)
        sp.add_argument("--selection", help="comma-separated attribute names")
        sp.add_argument("--num-images", type=int)
        sp.add_argument("--detector", help="detector checkpoint directory")
        if name == "attack-blackbox":
            sp.add_argument("--population", type=int)
            sp.add_argument("--threshold", type=float, help="stop once the elite score is below this")
            sp.add_argument("--query-budget", type=int)

    sp = add("rank-attributes", cmd_rank_attributes, "single-attribute ASR ranking")
    campaign_args(sp)
    sp.add_argument("--detector", action="append", help="detector checkpoint (repeatable)")
    sp.add_argument("--sweep", action="store_true", help="also grow the selection along the ranking")

    sp = add("ablate", cmd_ablate, "run the v0/v1/v2 ablation on one batch")
    campaign_args(sp)
    sp.add_argument("--selection")

    sp = add("defend-eval", cmd_defend_eval, "adversarial training and feature squeezing evaluation")
    campaign_args(sp)
    sp.add_argument("--num-attack", type=int)

    sp = add("report", cmd_report, "plots and merged summary for a run directory")
    sp.add_argument("--run", required=True)
    return p


def main(argv=None) -> int:
    from .errors import SemAttackError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except (SemAttackError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
