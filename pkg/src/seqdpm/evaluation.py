"""
Retrieval evaluation: precision-recall, leave-one-out MAP, the posterior-mean
baseline and re-runs under shuffled experiment orders.

A *builder* is any callable ``build(batches) -> rank`` where
``rank(query_batch, candidate_ids)`` returns candidate ids best first.  The
sequential supermodel and the mean-distance baseline are both expressed this
way, so the leave-one-out protocol treats them identically.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .samplers import SampleBatch
from .seeding import named_rng
from .supermodel import DpmConfig, Supermodel

Ranker = Callable[[SampleBatch, Sequence[str]], list]
Builder = Callable[[Sequence[SampleBatch]], Ranker]

RECALL_GRID = np.linspace(0.0, 1.0, 11)


@dataclass
class PrCurve:
    points: list[tuple[float, float]]  # (recall, precision)
    average_precision: float
    auprc: float | None = None  # trapezoid over ``points``

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["recall", "precision"])
        for r, p in self.points:
            w.writerow([repr(float(r)), repr(float(p))])
        return buf.getvalue()


def _hits(ranking: Sequence[str], relevant) -> np.ndarray:
    relevant = set(relevant)
    if not relevant:
        raise ValueError("relevant set is empty")
    missing = relevant - set(ranking)
    if missing:
        raise ValueError(f"relevant items not in ranking: {sorted(missing)}")
    return np.array([r in relevant for r in ranking], dtype=bool)


def average_precision(ranking: Sequence[str], relevant) -> float:
    """Mean of precision@k over the ranks k holding relevant items."""
    hits = _hits(ranking, relevant)
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, ranks.size + 1) / ranks))


def pr_curve(ranking: Sequence[str], relevant) -> PrCurve:
    hits = _hits(ranking, relevant)
    tp = np.cumsum(hits)
    k = np.arange(1, hits.size + 1)
    recall = tp / hits.sum()
    precision = tp / k
    points = [(float(r), float(p)) for r, p in zip(recall, precision)]
    curve_r = np.concatenate([[0.0], recall])
    curve_p = np.concatenate([[precision[0]], precision])
    auprc = float(np.sum(np.diff(curve_r) * 0.5 * (curve_p[1:] + curve_p[:-1])))
    return PrCurve(points, average_precision(ranking, relevant), auprc)


def interpolated_precision(curve: PrCurve, grid=RECALL_GRID) -> np.ndarray:
    """Max precision at recall >= r for each r in ``grid``."""
    rec = np.array([r for r, _ in curve.points])
    prec = np.array([p for _, p in curve.points])
    return np.array([prec[rec >= r - 1e-12].max() if np.any(rec >= r - 1e-12) else 0.0
                     for r in grid])


@dataclass
class LooResult:
    map: float
    ap: dict[str, float]
    curve: PrCurve
    skipped: list[str] = field(default_factory=list)
    rankings: dict[str, list[str]] = field(default_factory=dict)

    def ap_csv(self, extra: dict[str, dict[str, float]] | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        extra = extra or {}
        w.writerow(["query_id", "ap", *[f"ap_{k}" for k in extra]])
        for q, ap in self.ap.items():
            w.writerow([q, repr(ap), *[repr(v.get(q, math.nan)) for v in extra.values()]])
        return buf.getvalue()


def leave_one_out(build: Builder, batches: Sequence[SampleBatch],
                  labels: Sequence[str] | None = None) -> LooResult:
    """Build once from all batches, then query each experiment against the rest.

    Relevance is a shared label.  Queries whose label nobody else carries
    are skipped and listed in ``skipped``.
    """
    if len(batches) < 2:
        raise ValueError("leave-one-out needs at least two experiments")
    labels = [b.label for b in batches] if labels is None else list(labels)
    if len(labels) != len(batches) or any(l is None for l in labels):
        raise ValueError("every experiment needs a label")
    ids = [b.id for b in batches]
    rank = build(batches)
    aps: dict[str, float] = {}
    rankings: dict[str, list[str]] = {}
    skipped: list[str] = []
    pooled = []
    for i, q in enumerate(batches):
        others = [e for j, e in enumerate(ids) if j != i]
        relevant = {e for j, e in enumerate(ids) if j != i and labels[j] == labels[i]}
        if not relevant:
            skipped.append(q.id)
            continue
        order = list(rank(q, others))
        rankings[q.id] = order
        curve = pr_curve(order, relevant)
        aps[q.id] = curve.average_precision
        pooled.append(interpolated_precision(curve))
    if not aps:
        raise ValueError("no experiment has a same-label partner")
    mean_ap = float(np.mean(list(aps.values())))
    mean_curve = np.mean(pooled, axis=0)
    points = [(float(r), float(p)) for r, p in zip(RECALL_GRID, mean_curve)]
    auprc = float(np.sum(np.diff(RECALL_GRID) * 0.5 * (mean_curve[1:] + mean_curve[:-1])))
    return LooResult(mean_ap, aps, PrCurve(points, mean_ap, auprc), skipped, rankings)


def sequential_builder(config: DpmConfig | None = None, **score_options) -> Builder:
    """Builder that ingests the batches in the given order into a fresh supermodel."""

    def build(batches):
        model = Supermodel(batches[0].dim, replace(config) if config is not None else None)
        for b in batches:
            model.ingest_batch(b)
        return model_ranker(model, **score_options)

    return build


def model_ranker(model: Supermodel, **score_options) -> Ranker:
    def rank(query, candidates):
        return model.score_query(query, candidates, **score_options).ids
    return rank


def nsbl_rank(batches: Sequence[SampleBatch], query_index: int) -> list[str]:
    """Other experiments by ascending L2 distance between posterior means."""
    if len(batches) < 2:
        raise ValueError("need at least two batches")
    q = batches[query_index].mean()
    others = [(j, b) for j, b in enumerate(batches) if j != query_index]
    dist = [float(np.linalg.norm(q - b.mean())) for _, b in others]
    order = sorted(range(len(others)), key=lambda i: (dist[i], i))
    return [others[i][1].id for i in order]


def nsbl_builder() -> Builder:
    def build(batches):
        means = {b.id: b.mean() for b in batches}

        def rank(query, candidates):
            q = query.mean()
            dist = [float(np.linalg.norm(q - means[c])) for c in candidates]
            return [candidates[i] for i in sorted(range(len(candidates)), key=lambda i: (dist[i], i))]
        return rank
    return build


@dataclass
class OrderReport:
    orders: list[list[str]]
    maps: list[float]

    @property
    def std(self) -> float | None:
        return float(np.std(self.maps, ddof=1)) if len(self.maps) >= 2 else None

    def to_dict(self) -> dict:
        return {"orders": self.orders, "map": self.maps, "map_mean": float(np.mean(self.maps)),
                "map_std": self.std}


def order_robustness(batches: Sequence[SampleBatch], n_orders: int, seed: int,
                     build: Builder | None = None) -> OrderReport:
    """Repeat leave-one-out with the experiments presented in random orders."""
    if n_orders < 1:
        raise ValueError("n_orders must be >= 1")
    build = sequential_builder(DpmConfig(seed=seed)) if build is None else build
    orders, maps = [], []
    for r in range(n_orders):
        perm = named_rng(seed, "order", r).permutation(len(batches))
        shuffled = [batches[i] for i in perm]
        orders.append([b.id for b in shuffled])
        maps.append(leave_one_out(build, shuffled).map)
    return OrderReport(orders, maps)


def summary_json(result: LooResult, **extra) -> str:
    out = {"map": result.map, "n_queries": len(result.ap), "skipped": result.skipped,
           "auprc": result.curve.auprc}
    out.update(extra)
    return json.dumps(out, indent=2, sort_keys=True) + "\n"
