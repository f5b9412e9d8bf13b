"""Retrieval evaluation: per-category AP, mAP, cutoff and size/rarity splits.

Per category, the full index ranking is scored against manifest positives.
AP without cutoff divides by R (total positives); with cutoff c it divides
by min(R, c). The size band restricts positives to images holding at least
one instance with area <= max_area. Categories with zero positives under a
view are excluded from that view's mean and listed, never scored 0.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Mapping, Sequence

from .index import FlatIndex, QueryVector, search
from .store import DatasetManifest

__all__ = [
    "EvalSpec",
    "CategoryResult",
    "EvalReport",
    "average_precision",
    "derive_rare_set",
    "evaluate",
    "average_aggregates",
    "save_report",
    "save_report_csv",
]

SMALL_MEDIUM_MAX_AREA = 96.0 * 96.0  # COCO small+medium band, px^2


def average_precision(relevance: Sequence, total_positives: int, cutoff: int | None = None) -> float:
    """AP of a binary relevance list ordered by descending score.

    Without cutoff: sum of precision-at-hit / total_positives. With cutoff c,
    only the first c ranks count and the normalizer is min(total_positives, c).
    """
    if total_positives < 1:
        raise ValueError("total_positives must be >= 1")
    if cutoff is not None and cutoff < 1:
        raise ValueError("cutoff must be >= 1")
    limit = len(relevance) if cutoff is None else min(cutoff, len(relevance))
    normalizer = total_positives if cutoff is None else min(total_positives, cutoff)
    hits = 0
    acc = 0.0
    for i in range(limit):
        if relevance[i]:
            hits += 1
            acc += hits / (i + 1)
    return acc / normalizer


def derive_rare_set(manifest: DatasetManifest, threshold: float | None = None) -> frozenset[int]:
    """Category ids considered rare.

    With a threshold, rare means annotation count / total < threshold.
    Without one, pre-flagged rare categories pass through unchanged.
    """
    if threshold is None:
        return frozenset(c.id for c in manifest.categories if c.rare)
    if not manifest.annotations:
        raise ValueError("manifest has no annotations")
    counts = manifest.annotation_counts()
    total = sum(counts.values())
    return frozenset(cid for cid, n in counts.items() if n / total < threshold)


@dataclass(frozen=True)
class EvalSpec:
    dataset: DatasetManifest
    cutoff: int | None = 50
    size_band: float | None = SMALL_MEDIUM_MAX_AREA  # max instance area, px^2
    category_filter: str = "all"  # all | rare_only

    def __post_init__(self):
        if self.cutoff is not None and self.cutoff < 1:
            raise ValueError("cutoff must be >= 1")
        if self.size_band is not None and not self.size_band > 0:
            raise ValueError("size_band max area must be > 0")
        if self.category_filter not in ("all", "rare_only"):
            raise ValueError(f"unknown category_filter {self.category_filter!r}")


@dataclass(frozen=True)
class CategoryResult:
    category_id: int
    name: str
    rare: bool
    positives: int
    ap: float
    ap_at_cutoff: float | None
    positives_in_band: int
    ap_in_band: float | None  # AP at cutoff with band-restricted positives


@dataclass(frozen=True)
class EvalReport:
    categories: tuple[CategoryResult, ...]
    cutoff: int | None
    size_band: float | None
    excluded: tuple[int, ...]  # zero positives at all: not evaluated
    excluded_from_band: tuple[int, ...]  # evaluated, but no in-band positives
    map: float | None
    map_at_cutoff: float | None
    map_in_band: float | None
    rare_map: float | None
    rare_map_at_cutoff: float | None

    def to_dict(self) -> dict:
        return {
            "aggregates": {
                "map": self.map,
                "map_at_cutoff": self.map_at_cutoff,
                "map_in_band": self.map_in_band,
                "rare_map": self.rare_map,
                "rare_map_at_cutoff": self.rare_map_at_cutoff,
            },
            "cutoff": self.cutoff,
            "size_band": self.size_band,
            "excluded": list(self.excluded),
            "excluded_from_band": list(self.excluded_from_band),
            "categories": [
                {
                    "id": c.category_id,
                    "name": c.name,
                    "rare": c.rare,
                    "positives": c.positives,
                    "ap": c.ap,
                    "ap_at_cutoff": c.ap_at_cutoff,
                    "positives_in_band": c.positives_in_band,
                    "ap_in_band": c.ap_in_band,
                }
                for c in self.categories
            ],
        }


def _mean(values: list[float]) -> float | None:
    return sum(values) / len(values) if values else None


def evaluate(index: FlatIndex, queries: Mapping[int, QueryVector], spec: EvalSpec) -> EvalReport:
    """Rank the index once per category and score every configured view."""
    manifest = spec.dataset
    cats = list(manifest.categories)
    if spec.category_filter == "rare_only":
        cats = [c for c in cats if c.rare]
    results: list[CategoryResult] = []
    excluded: list[int] = []
    excluded_band: list[int] = []
    for cat in cats:
        positives = manifest.positives(cat.id)
        if not positives:
            excluded.append(cat.id)
            continue
        if cat.id not in queries:
            raise ValueError(f"missing query vector for category {cat.id} ({cat.name!r})")
        ranking = search(index, queries[cat.id], top_k=index.image_count)
        ranked_ids = [img for img, _ in ranking.entries]
        relevance = [1 if img in positives else 0 for img in ranked_ids]
        ap = average_precision(relevance, len(positives))
        ap_cut = (
            average_precision(relevance, len(positives), spec.cutoff)
            if spec.cutoff is not None
            else None
        )
        band_positives: set[str] = set()
        ap_band = None
        if spec.size_band is not None:
            band_positives = manifest.positives(cat.id, max_area=spec.size_band)
            if band_positives:
                band_rel = [1 if img in band_positives else 0 for img in ranked_ids]
                ap_band = average_precision(band_rel, len(band_positives), spec.cutoff)
            else:
                excluded_band.append(cat.id)
        results.append(
            CategoryResult(
                category_id=cat.id,
                name=cat.name,
                rare=cat.rare,
                positives=len(positives),
                ap=ap,
                ap_at_cutoff=ap_cut,
                positives_in_band=len(band_positives),
                ap_in_band=ap_band,
            )
        )
    rare = [r for r in results if r.rare]
    return EvalReport(
        categories=tuple(results),
        cutoff=spec.cutoff,
        size_band=spec.size_band,
        excluded=tuple(excluded),
        excluded_from_band=tuple(excluded_band),
        map=_mean([r.ap for r in results]),
        map_at_cutoff=_mean([r.ap_at_cutoff for r in results if r.ap_at_cutoff is not None]),
        map_in_band=_mean([r.ap_in_band for r in results if r.ap_in_band is not None]),
        rare_map=_mean([r.ap for r in rare]),
        rare_map_at_cutoff=_mean([r.ap_at_cutoff for r in rare if r.ap_at_cutoff is not None]),
    )


def average_aggregates(reports: Sequence[EvalReport]) -> dict:
    """Mean aggregates across reports (e.g. several aggregation seeds)."""
    if not reports:
        raise ValueError("need at least one report")
    out: dict[str, float | None] = {}
    for key in ("map", "map_at_cutoff", "map_in_band", "rare_map", "rare_map_at_cutoff"):
        values = [getattr(r, key) for r in reports if getattr(r, key) is not None]
        out[key] = _mean(values)
    return out


def save_report(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, sort_keys=True, indent=2)


def save_report_csv(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["category_id", "name", "rare", "positives", "ap", "ap_at_cutoff",
             "positives_in_band", "ap_in_band"]
        )
        for c in report.categories:
            writer.writerow(
                [c.category_id, c.name, int(c.rare), c.positives, c.ap,
                 c.ap_at_cutoff, c.positives_in_band, c.ap_in_band]
            )
