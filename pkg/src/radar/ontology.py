"""Tag-ontology induction from co-occurrence statistics.

Candidate narrower-than-broader ("is subtopic of") relations between
co-occurring tags are scored by a logistic classifier over eight
statistical features, then pruned into a DAG by an entropy ordering:
edges may only point from lower-entropy tags to higher-entropy ones.
Isolated tags are reconnected by relaxing the score threshold, and any
remainder is linked to the highest-entropy tag, so coverage is total.

All logarithms are natural.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from radar import ValidationError

log = logging.getLogger(__name__)

ENTROPY_SMOOTHING = 1e-6  # keeps log(H(u)/H(v)) finite when an entropy is 0

FEATURE_NAMES = (
    "p(u|v)",
    "p(v|u)",
    "H(u)",
    "H(v)",
    "PMI(u,v)",
    "PKL(u,v)",
    "log(p(u|v)/p(v|u))",
    "log(H(u)/H(v))",
)


@dataclass
class CoocStats:
    n_videos: int
    occ: Counter  # tag -> number of videos carrying it
    cooc: Counter  # frozenset({u, v}) -> number of videos carrying both
    tags: list  # every vocabulary tag, sorted

    def neighbors(self, u):
        """Tags co-occurring with u, sorted."""
        return sorted(w for pair in self.cooc for w in pair if u in pair and w != u)

    def cooc_count(self, u, v):
        return self.cooc.get(frozenset((u, v)), 0)


def compute_cooc_stats(corpus):
    """Exact occurrence and co-occurrence counts over the training videos.

    Uses the train split when one is assigned, the whole corpus
    otherwise. Vocabulary tags never observed get occ = 0.
    """
    if corpus.splits:
        videos = [v for v in corpus.videos if corpus.splits.get(v.id) == "train"]
    else:
        videos = list(corpus.videos)
    if not videos:
        raise ValidationError("no videos available for co-occurrence statistics")
    occ = Counter()
    cooc = Counter()
    for video in videos:
        tags = sorted(video.tags)
        occ.update(tags)
        for i, u in enumerate(tags):
            for v in tags[i + 1 :]:
                cooc[frozenset((u, v))] += 1
    return CoocStats(n_videos=len(videos), occ=occ, cooc=cooc, tags=sorted(e.tag for e in corpus.vocab))


def pmi(stats, u, v):
    """log( p(u,v) / (p(u) p(v)) ) for a co-occurring pair."""
    c = stats.cooc_count(u, v)
    if c == 0:
        raise ValidationError(f"tags {u!r} and {v!r} never co-occur")
    n = stats.n_videos
    return math.log(c * n / (stats.occ[u] * stats.occ[v]))


def pkl(stats, u, v):
    """p(u,v) * PMI(u,v); weights the overlap by how often it happens."""
    return stats.cooc_count(u, v) / stats.n_videos * pmi(stats, u, v)


def transfer_prob(stats, u, v):
    """p(u|v): fraction of v's videos that also carry u."""
    if u == v:
        return 1.0 if stats.occ[u] > 0 else _raise_no_occ(u)
    if stats.occ[v] == 0:
        raise ValidationError(f"tag {v!r} never occurs")
    return stats.cooc_count(u, v) / stats.occ[v]


def _raise_no_occ(u):
    raise ValidationError(f"tag {u!r} never occurs")


def tag_entropy(stats, u):
    """H(u) = -sum_w p(u|w) log p(u|w) over co-occurring w != u.

    Higher entropy marks broader tags: many distinct tags transfer into
    them. No co-occurring neighbors means H = 0.
    """
    h = 0.0
    for w in stats.neighbors(u):
        p = transfer_prob(stats, u, w)
        if p > 0:
            h -= p * math.log(p)
    return h


def all_entropies(stats):
    return {u: tag_entropy(stats, u) for u in stats.tags}


def pair_features(stats, u, v, entropies=None):
    """The eight-feature vector for an ordered co-occurring pair (u, v)."""
    if stats.cooc_count(u, v) == 0:
        raise ValidationError(f"tags {u!r} and {v!r} never co-occur")
    if entropies is None:
        hu, hv = tag_entropy(stats, u), tag_entropy(stats, v)
    else:
        hu, hv = entropies[u], entropies[v]
    puv = transfer_prob(stats, u, v)
    pvu = transfer_prob(stats, v, u)
    return np.array(
        [
            puv,
            pvu,
            hu,
            hv,
            pmi(stats, u, v),
            pkl(stats, u, v),
            math.log(puv / pvu),
            math.log((hu + ENTROPY_SMOOTHING) / (hv + ENTROPY_SMOOTHING)),
        ],
        dtype=np.float64,
    )


@dataclass
class SubtopicClassifier:
    weights: np.ndarray  # (8,)
    bias: float
    feat_mean: np.ndarray
    feat_std: np.ndarray

    def score(self, features):
        """Probability strictly inside (0, 1) that the second tag narrows
        the first; logits are clamped so float64 never saturates."""
        x = (np.atleast_2d(features) - self.feat_mean) / self.feat_std
        z = x @ self.weights + self.bias
        return 1.0 / (1.0 + np.exp(-np.clip(z, -30, 30)))


def train_subtopic_classifier(features, labels, seed=0, lr=0.5, iters=2000, l2=1e-4):
    """Fit logistic regression by full-batch gradient descent.

    Features are standardized per column first; the fit is deterministic
    (zero init), the seed only reserved for future stochastic variants.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValidationError("features and labels must align")
    if x.shape[0] < 2 or len(np.unique(y)) < 2:
        raise ValidationError("need at least two labeled pairs covering both classes")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std < 1e-12] = 1.0
    xs = (x - mean) / std
    w = np.zeros(x.shape[1])
    b = 0.0
    n = x.shape[0]
    for _ in range(iters):
        z = xs @ w + b
        p = 1.0 / (1.0 + np.exp(-z))
        err = p - y
        gw = xs.T @ err / n + l2 * w
        gb = err.mean()
        w -= lr * gw
        b -= lr * gb
    return SubtopicClassifier(weights=w, bias=b, feat_mean=mean, feat_std=std)


def score_pairs(classifier, stats, entropies=None):
    """Score both orientations of every co-occurring pair.

    Returns {(u, v): score} where the score reads "v is a subtopic of u".
    """
    if entropies is None:
        entropies = all_entropies(stats)
    ordered = []
    for pair in sorted(stats.cooc, key=sorted):
        a, b = sorted(pair)
        ordered.append((a, b))
        ordered.append((b, a))
    if not ordered:
        return {}
    feats = np.stack([pair_features(stats, u, v, entropies) for u, v in ordered])
    scores = classifier.score(feats)
    return dict(zip(ordered, scores))


@dataclass
class Thresholds:
    delta_r: float  # keep threshold
    epsilon_r: float  # relaxation floor


def select_thresholds(scored_labels, precision_target=0.9, recall_target=0.9):
    """Pick the keep threshold and the relaxation floor from labeled scores.

    `scored_labels` is a sequence of (score, label) pairs. The keep
    threshold is the smallest score at which precision still meets the
    target; the floor is the largest score at which recall still meets
    its target. If a target is unattainable both fall back to the
    F1-maximizing threshold with a warning.
    """
    pairs = sorted(scored_labels, key=lambda sl: -sl[0])
    if not pairs:
        raise ValidationError("no labeled pairs with scores")
    scores = np.array([s for s, _ in pairs], dtype=np.float64)
    labels = np.array([l for _, l in pairs], dtype=np.float64)
    n_pos = labels.sum()
    if n_pos == 0:
        raise ValidationError("no positive labels")
    tp = np.cumsum(labels)
    k = np.arange(1, len(pairs) + 1)
    precision = tp / k
    recall = tp / n_pos
    # collapse ties: evaluate at the last occurrence of each distinct score
    last_of_score = np.flatnonzero(np.r_[scores[1:] != scores[:-1], True])
    cand_scores = scores[last_of_score]
    cand_prec = precision[last_of_score]
    cand_rec = recall[last_of_score]

    delta = None
    ok = cand_prec >= precision_target
    if ok.any():
        delta = float(cand_scores[ok].min())
    epsilon = None
    ok = cand_rec >= recall_target
    if ok.any():
        epsilon = float(cand_scores[ok].max())
    if delta is None or epsilon is None:
        f1 = 2 * cand_prec * cand_rec / np.maximum(cand_prec + cand_rec, 1e-12)
        best = float(cand_scores[int(np.argmax(f1))])
        log.warning(
            "precision/recall targets unattainable on labeled data; falling back to F1-max threshold %.4f",
            best,
        )
        delta = best if delta is None else delta
        epsilon = best if epsilon is None else epsilon
    if epsilon > delta:
        epsilon = delta
    return Thresholds(delta_r=delta, epsilon_r=epsilon)


@dataclass
class OntologyDag:
    nodes: list  # tag ids
    edges: list  # (child, parent, score); "child is a subtopic of parent"
    entropies: dict = field(default_factory=dict)

    def parents(self, tag):
        return sorted(p for c, p, _ in self.edges if c == tag)


def build_dag(scored_pairs, entropies, thresholds):
    """Prune scored candidate relations into a connected DAG.

    1. Keep candidates scoring at or above the keep threshold.
    2. Order tags by entropy descending (ties by id ascending); keep an
       edge only when its parent strictly precedes its child, which
       removes reversals and makes the order a topological sort.
    3. Tags left untouched re-admit, in ascending-entropy order, their
       best order-respecting candidate at or above the relaxation floor.
    4. Any still-isolated tag is linked as a child of the first tag in
       the order (the broadest one); if that tag itself ends up isolated
       it is adopted as parent of the next tag in the order. Edges with
       no classifier score carry the relaxation floor as their score.
    """
    tags = sorted(entropies)
    if not tags:
        raise ValidationError("empty tag set")
    order = sorted(tags, key=lambda t: (-entropies[t], t))
    rank = {t: i for i, t in enumerate(order)}

    def respects_order(child, parent):
        return rank[parent] < rank[child]

    edges = {}
    for (u, v), score in scored_pairs.items():
        child, parent = v, u
        if score >= thresholds.delta_r and respects_order(child, parent):
            edges[(child, parent)] = float(score)

    covered = set()
    for child, parent in edges:
        covered.add(child)
        covered.add(parent)

    isolated = [t for t in order if t not in covered]
    for t in sorted(isolated, key=lambda t: (entropies[t], t)):
        if t in covered:
            continue
        best = None
        for (u, v), score in scored_pairs.items():
            if score < thresholds.epsilon_r:
                continue
            child, parent = v, u
            if t not in (child, parent) or not respects_order(child, parent):
                continue
            if best is None or score > best[2] or (score == best[2] and (child, parent) < best[:2]):
                best = (child, parent, float(score))
        if best is not None:
            edges[(best[0], best[1])] = best[2]
            covered.add(best[0])
            covered.add(best[1])

    fallback_score = max(thresholds.epsilon_r, 1e-6)
    root = order[0]
    for t in order[1:]:
        if t not in covered:
            edges.setdefault((t, root), fallback_score)
            covered.add(t)
            covered.add(root)
    if len(order) > 1 and root not in covered:
        edges.setdefault((order[1], root), fallback_score)

    edge_list = [(c, p, s) for (c, p), s in sorted(edges.items())]
    return OntologyDag(nodes=tags, edges=edge_list, entropies=dict(entropies))


def verify_dag(dag):
    """True iff a topological sort of the edge set exists (Kahn check)."""
    indeg = {t: 0 for t in dag.nodes}
    out = defaultdict(list)
    for child, parent, _ in dag.edges:
        out[parent].append(child)
        indeg[child] = indeg.get(child, 0) + 1
        indeg.setdefault(parent, 0)
    queue = [t for t, d in indeg.items() if d == 0]
    seen = 0
    while queue:
        node = queue.pop()
        seen += 1
        for nxt in out[node]:
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                queue.append(nxt)
    return seen == len(indeg)


def save_ontology(dag, path):
    with open(path, "w", encoding="utf-8") as fh:
        for child, parent, score in dag.edges:
            fh.write(json.dumps({"child": child, "parent": parent, "score": float(np.float32(score))}) + "\n")


def load_ontology(path, tags=None):
    edges = []
    nodes = set(tags or [])
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: malformed JSON ({exc})") from exc
            edges.append((obj["child"], obj["parent"], float(obj.get("score", 1.0))))
            nodes.add(obj["child"])
            nodes.add(obj["parent"])
    return OntologyDag(nodes=sorted(nodes), edges=edges)


def load_labels(path):
    """Read labeled pairs: {"u", "v", "label"} with label 1 = v narrows u."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: malformed JSON ({exc})") from exc
            if obj.get("label") not in (0, 1):
                raise ValidationError(f"{path}:{lineno}: label must be 0 or 1")
            rows.append((str(obj["u"]), str(obj["v"]), int(obj["label"])))
    return rows
