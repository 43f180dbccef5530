"""Campaign aggregates with exact rational arithmetic."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from ..errors import InvalidInputError
from ..inversion import reconstruction_loss
from ..semdisc import semantic_loss

REPORT_SCHEMA = "semattack.campaign/1"


class ProxyQuality:
    """Default quality proxy (lower is better): perceptual distance to the
    pre-attack image plus the semantic loss of the final style code."""

    name = "recon+semantic"

    def __init__(self, metric, ds):
        self.metric, self.ds = metric, ds

    def __call__(self, adv_image, reference, style) -> dict:
        recon = reconstruction_loss(adv_image, reference, self.metric)
        sem = semantic_loss(self.ds, style) if self.ds is not None else 0.0
        return {"recon": recon, "semantic": float(sem), "proxy": recon + float(sem)}


@dataclass
class CampaignReport:
    records: list[dict]
    attempted: int
    bypassed: int
    clean_detected: int
    quality: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)

    @property
    def asr(self) -> Fraction:
        return Fraction(self.bypassed, self.attempted)

    @property
    def accuracy(self) -> Fraction:
        """Share of adversarial examples still given the correct (fake) label."""
        return Fraction(self.attempted - self.bypassed, self.attempted)

    @property
    def clean_accuracy(self) -> Fraction:
        return Fraction(self.clean_detected, self.attempted)

    def aggregates(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "attempted": self.attempted,
            "bypassed": self.bypassed,
            "asr": float(self.asr),
            "asr_exact": str(self.asr),
            "accuracy": float(self.accuracy),
            "accuracy_exact": str(self.accuracy),
            "clean_accuracy": float(self.clean_accuracy),
            "queries_total": int(sum(r.get("queries", 0) for r in self.records)),
            "quality": self.quality,
        }


def compute_metrics(results, clean_scores, threshold: float = 0.5, quality=None, references=None,
                    config=None, seeds=None) -> CampaignReport:
    """Aggregate attack results; ``quality(adv, ref, style)`` is applied per image when given."""
    results = list(results)
    if not results:
        raise InvalidInputError("no results to aggregate")
    clean = np.asarray(clean_scores, dtype=np.float64)
    if len(clean) != len(results):
        raise InvalidInputError("one clean score per result is required")
    records, q_rows = [], []
    for i, r in enumerate(results):
        rec = {"index": i, "clean_score": float(clean[i]), **r.record()}
        if quality is not None and references is not None:
            q = quality(r.image, references[i], r.style)
            rec["quality"] = q
            q_rows.append(q)
        records.append(rec)
    summary = {}
    if q_rows:
        for key in q_rows[0]:
            vals = np.array([q[key] for q in q_rows])
            summary[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
        summary["metric"] = getattr(quality, "name", type(quality).__name__)
    return CampaignReport(
        records=records,
        attempted=len(results),
        bypassed=sum(bool(r.success) for r in results),
        clean_detected=int(np.sum(clean >= threshold)),
        quality=summary,
        config=config or {},
        seeds=seeds or {},
    )
