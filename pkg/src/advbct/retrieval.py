"""Retrieval mAP, self/cross tests, compatibility metrics and backfill sweeps."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import LabeledDataset
from .errors import ConfigError, DataError, ShapeError, UndefinedMetricError
from .model import MlpModel, embed
from .numerics import logistic, pairwise_distances, seeded_rng


def average_precision(relevance) -> float:
    """AP of a ranked 0/1 relevance list, normalized by its total positives."""
    rel = np.asarray(relevance, dtype=bool)
    n_rel = int(rel.sum())
    if n_rel == 0:
        raise UndefinedMetricError("no relevant items")
    hits = np.cumsum(rel)
    ranks = np.arange(1, len(rel) + 1)
    return float(np.sum(hits[rel] / ranks[rel]) / n_rel)


@dataclass
class MapResult:
    value: float
    n_queries: int
    skipped: int


def map_with_skips(query_emb, query_labels, gallery_emb, gallery_labels) -> MapResult:
    query_emb = np.asarray(query_emb, dtype=np.float64)
    gallery_emb = np.asarray(gallery_emb, dtype=np.float64)
    query_labels = np.asarray(query_labels)
    gallery_labels = np.asarray(gallery_labels)
    if len(gallery_emb) == 0:
        raise DataError("empty gallery")
    if query_emb.shape[1] != gallery_emb.shape[1]:
        raise ShapeError(f"query dim {query_emb.shape[1]} != gallery dim {gallery_emb.shape[1]}")
    dist = pairwise_distances(query_emb, gallery_emb)
    aps = []
    skipped = 0
    for i, label in enumerate(query_labels):
        rel = gallery_labels == label
        if not rel.any():
            skipped += 1
            continue
        order = np.argsort(dist[i], kind="stable")
        aps.append(average_precision(rel[order]))
    if not aps:
        raise UndefinedMetricError("no query has a positive in the gallery")
    total = 0.0
    for ap in aps:
        total += ap
    return MapResult(total / len(aps), len(query_labels), skipped)


def mean_average_precision(query_emb, query_labels, gallery_emb, gallery_labels) -> float:
    """Euclidean-ranked mAP; ties go to the lower gallery index."""
    return map_with_skips(query_emb, query_labels, gallery_emb, gallery_labels).value


def retrieval_map(
    query_model: MlpModel, gallery_model: MlpModel, query: LabeledDataset, gallery: LabeledDataset
) -> float:
    if query_model.d_emb != gallery_model.d_emb:
        raise ShapeError(
            f"embedding dims differ: query model {query_model.d_emb}, gallery model {gallery_model.d_emb}"
        )
    return mean_average_precision(
        embed(query_model, query.features),
        query.source_labels,
        embed(gallery_model, gallery.features),
        gallery.source_labels,
    )


def self_test(model: MlpModel, query: LabeledDataset, gallery: LabeledDataset) -> float:
    return retrieval_map(model, model, query, gallery)


def cross_test(
    new_model: MlpModel, old_model: MlpModel, query: LabeledDataset, gallery: LabeledDataset
) -> float:
    """New-model queries against an old-model gallery."""
    return retrieval_map(new_model, old_model, query, gallery)


def p_comp(m_no: float, m_oo: float, m_ss: float) -> float:
    if m_ss == m_oo:
        raise UndefinedMetricError("P_comp undefined: independent and old self-test mAPs are equal")
    return logistic((m_no - m_oo) / (m_ss - m_oo))


def p_up(m_nn: float, m_ss: float) -> float:
    if m_ss == 0:
        raise UndefinedMetricError("P_up undefined: independent self-test mAP is zero")
    return logistic((m_nn - m_ss) / m_ss)


def p_beta_score(pc: float, pu: float, beta: float = 1.0) -> float:
    b2 = beta * beta
    return (1.0 + b2) * pc * pu / (b2 * pc + pu)


@dataclass
class SetMaps:
    """mAPs for one test set: old/new/independent self-tests and new-vs-old cross-test."""

    self_old: float
    self_new: float
    self_star: float
    cross: float
    name: str = "test"


@dataclass
class RetrievalReport:
    sets: list[SetMaps]
    beta: float
    p_up: float | None
    p_comp: float | None
    p_beta_score: float | None
    per_set: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        pct = lambda v: None if v is None else round(100.0 * v, 2)
        return {
            "beta": self.beta,
            "test_sets": [asdict(s) for s in self.sets],
            "per_set_metrics": self.per_set,
            "p_up": self.p_up,
            "p_comp": self.p_comp,
            "p_beta_score": self.p_beta_score,
            "percent": {
                "p_up": pct(self.p_up),
                "p_comp": pct(self.p_comp),
                "p_beta_score": pct(self.p_beta_score),
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def aggregate_report(sets: list[SetMaps], beta: float = 1.0) -> RetrievalReport:
    """Per-set P_comp / P_up / P_beta first, then the arithmetic mean across sets.

    Aggregates are ``None`` if any set leaves a metric undefined.
    """
    if not sets:
        raise ConfigError("aggregate_report needs at least one test set")
    names = [s.name for s in sets]
    if len(set(names)) != len(names):
        raise ConfigError("duplicate test set names")
    per_set = []
    try:
        for s in sets:
            pc = p_comp(s.cross, s.self_old, s.self_star)
            pu = p_up(s.self_new, s.self_star)
            per_set.append(
                {"name": s.name, "p_comp": pc, "p_up": pu, "p_beta_score": p_beta_score(pc, pu, beta)}
            )
    except UndefinedMetricError:
        return RetrievalReport(list(sets), beta, None, None, None, [])
    mean = lambda key: sum(d[key] for d in per_set) / len(per_set)
    return RetrievalReport(
        list(sets), beta, mean("p_up"), mean("p_comp"), mean("p_beta_score"), per_set
    )


@dataclass
class BackfillCurve:
    fractions: list[float]
    maps: list[float]

    def __post_init__(self):
        if len(self.fractions) != len(self.maps):
            raise ShapeError("one mAP per fraction")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["rho", "map"])
        for rho, m in zip(self.fractions, self.maps):
            writer.writerow([repr(float(rho)), repr(float(m))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "BackfillCurve":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != ["rho", "map"]:
            raise DataError("backfill CSV must start with 'rho,map'")
        return cls([float(r[0]) for r in rows[1:]], [float(r[1]) for r in rows[1:]])


def validate_fractions(fractions) -> list[float]:
    fr = [float(f) for f in fractions]
    if len(fr) < 2 or fr[0] != 0.0 or fr[-1] != 1.0:
        raise ConfigError("backfill fractions must start at 0 and end at 1")
    if any(b <= a for a, b in zip(fr, fr[1:])):
        raise ConfigError("backfill fractions must be strictly increasing")
    return fr


def backfill_curve(
    old_model: MlpModel,
    new_model: MlpModel,
    query: LabeledDataset,
    gallery: LabeledDataset,
    fractions,
    seed: int,
) -> BackfillCurve:
    """mAP while a growing, seeded-random share of the gallery is re-embedded.

    Refreshed subsets are nested: the rows refreshed at a smaller fraction
    stay refreshed at every larger one, as in an on-the-fly backfill.
    """
    fractions = validate_fractions(fractions)
    if old_model.d_emb != new_model.d_emb:
        raise ShapeError("old and new embedding dims differ")
    q = embed(new_model, query.features)
    g_old = embed(old_model, gallery.features)
    g_new = embed(new_model, gallery.features)
    order = seeded_rng(seed, "backfill").permutation(len(gallery))
    maps = []
    for rho in fractions:
        n_refresh = int(np.floor(rho * len(gallery) + 0.5))
        g = g_old.copy()
        rows = order[:n_refresh]
        g[rows] = g_new[rows]
        maps.append(mean_average_precision(q, query.source_labels, g, gallery.source_labels))
    return BackfillCurve(fractions, maps)
