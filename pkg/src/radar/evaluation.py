"""Ranking metrics for multi-label tagging: mAP, P@K, R@K.

Rankings order candidate tags by descending score with ties broken by
ascending tag id, which makes every metric deterministic. mAP macro-
averages per-video average precision over videos with non-empty ground
truth.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from radar import ValidationError
from radar.model import cache_representations, corpus_features, inductive_infer

log = logging.getLogger(__name__)

PRECISION_KS = (1, 3)
RECALL_KS = (5, 10)


@dataclass
class RankingResult:
    video_id: str
    ranked_tags: list  # candidate tags, best first
    relevant: frozenset


@dataclass
class MetricsReport:
    map: float
    precision_at: dict  # k -> value
    recall_at: dict
    n_videos: int
    per_video: list = field(default_factory=list)  # (video_id, ap) pairs

    def to_dict(self):
        out = {"mAP": self.map, "n_videos": self.n_videos}
        for k, v in sorted(self.precision_at.items()):
            out[f"P@{k}"] = v
        for k, v in sorted(self.recall_at.items()):
            out[f"R@{k}"] = v
        return out


def rank_tags(tag_ids, scores):
    """Order tags by descending score, ascending id on ties."""
    order = sorted(range(len(tag_ids)), key=lambda i: (-scores[i], tag_ids[i]))
    return [tag_ids[i] for i in order]


def average_precision(result):
    """AP = (1/|GT|) * sum over relevant ranks k of hits@k / k."""
    if not result.relevant:
        raise ValidationError(f"video {result.video_id!r} has empty ground truth")
    hits = 0
    total = 0.0
    for k, tag in enumerate(result.ranked_tags, start=1):
        if tag in result.relevant:
            hits += 1
            total += hits / k
    return total / len(result.relevant)


def precision_at_k(result, k):
    """Hits in the top k over k; k above the list length uses the length."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    k_eff = min(k, len(result.ranked_tags))
    hits = sum(1 for tag in result.ranked_tags[:k_eff] if tag in result.relevant)
    return hits / k_eff


def recall_at_k(result, k):
    """Hits in the top k over the ground-truth size."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    k_eff = min(k, len(result.ranked_tags))
    hits = sum(1 for tag in result.ranked_tags[:k_eff] if tag in result.relevant)
    return hits / len(result.relevant)


def aggregate_metrics(results, precision_ks=PRECISION_KS, recall_ks=RECALL_KS):
    """Macro-average the metrics over rankings with non-empty ground truth."""
    usable = []
    skipped = 0
    for r in results:
        if r.relevant:
            usable.append(r)
        else:
            skipped += 1
    if skipped:
        log.warning("excluded %d videos with empty ground truth from metrics", skipped)
    if not usable:
        raise ValidationError("no videos with ground truth to evaluate")
    aps = [(r.video_id, average_precision(r)) for r in usable]
    return MetricsReport(
        map=float(np.mean([ap for _, ap in aps])),
        precision_at={k: float(np.mean([precision_at_k(r, k) for r in usable])) for k in precision_ks},
        recall_at={k: float(np.mean([recall_at_k(r, k) for r in usable])) for k in recall_ks},
        n_videos=len(usable),
        per_video=aps,
    )


def evaluate(model, graph, corpus, split="test", caches=None):
    """Score every split video against all tags through the inductive
    path and aggregate the ranking metrics."""
    videos = corpus.videos_in(split)
    if not videos:
        raise ValidationError(f"split {split!r} is empty")
    if caches is None:
        feats, embs = corpus_features(graph, corpus)
        caches = cache_representations(model, graph, feats, embs)
    results = []
    for record in videos:
        scores = inductive_infer(model, graph, record, caches)
        results.append(
            RankingResult(
                video_id=record.id,
                ranked_tags=rank_tags(graph.tag_ids, scores),
                relevant=frozenset(t for t in record.tags if t in graph.tag_index),
            )
        )
    return aggregate_metrics(results)
