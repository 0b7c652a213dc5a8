"""Synthetic corpora with a planted tag ontology and imitation behavior.

Tags form a random tree; each tag carries a latent split into a shared
block, a language-only block, and a visual-only block, random-walked
down the tree so related tags stay close. Word embeddings see the
shared + language blocks, video features the shared + visual blocks:
the two modalities share a common component and keep unique ones.

Videos arrive in timestamp order. With probability `p_imit` a creator
imitates: they copy the tag set of a random earlier video by a user
they follow (perturbed at the tag-noise rate); otherwise they sample a
fresh coherent set, a random leaf plus all its ancestors plus optional
noise tags. Fresh sets make co-occurrence statistics encode the planted
ontology; imitation makes the follow graph informative about tags.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass

import numpy as np

from radar import ValidationError
from radar.corpus import Corpus, FollowEdge, TagVocabEntry, VideoRecord, save_corpus

log = logging.getLogger(__name__)


@dataclass
class SynthConfig:
    n_users: int = 20
    n_tags: int = 30
    depth: int = 3
    branching: int = 3
    n_videos: int = 300
    p_imit: float = 0.5
    tag_noise: float = 0.1
    video_dim: int = 16
    tag_dim: int = 16
    feature_noise: float = 0.5
    word_noise: float = 0.1
    follow_density: float = 0.1
    n_labels: int = 200
    split_fractions: tuple = (0.8, 0.1, 0.1)
    seed: int = 0

    def validate(self):
        for name in ("p_imit", "tag_noise", "follow_density"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1], got {value}")
        if min(self.n_users, self.n_tags, self.n_videos) < 1:
            raise ValidationError("n_users, n_tags, n_videos must be positive")
        if self.depth < 1 or self.branching < 1:
            raise ValidationError("depth and branching must be positive")

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ValidationError(f"unknown synth config fields: {sorted(unknown)}")
        if "split_fractions" in raw:
            raw["split_fractions"] = tuple(raw["split_fractions"])
        cfg = cls(**raw)
        cfg.validate()
        return cfg


@dataclass
class SynthResult:
    corpus: Corpus
    truth_edges: list  # (child, parent) planted relations
    provenance: list  # {"id", "provenance", "copied_from"?} per video
    labels: list  # (u, v, label) sampled from co-occurring pairs


def _plant_tree(n_tags, depth, branching):
    """Tag tree as parent indices; node 0 is the root (parent -1)."""
    parents = [-1]
    level = [0]
    levels_left = depth
    while len(parents) < n_tags and levels_left > 1:
        nxt = []
        for node in level:
            for _ in range(branching):
                if len(parents) >= n_tags:
                    break
                parents.append(node)
                nxt.append(len(parents) - 1)
        if not nxt:
            break
        level = nxt
        levels_left -= 1
    # overflow beyond the requested depth hangs off the last level round-robin
    i = 0
    while len(parents) < n_tags:
        parents.append(level[i % len(level)] if level else 0)
        i += 1
    return parents


def _ancestors(parents, node):
    chain = []
    p = parents[node]
    while p != -1:
        chain.append(p)
        p = parents[p]
    return chain


def generate(config):
    """Build a synthetic corpus in memory; fully determined by the seed."""
    config.validate()
    rng = np.random.default_rng(config.seed)

    tags = [f"t{i:03d}" for i in range(config.n_tags)]
    parents = _plant_tree(config.n_tags, config.depth, config.branching)
    truth_edges = [(tags[child], tags[parent]) for child, parent in enumerate(parents) if parent != -1]
    children = {i: [] for i in range(config.n_tags)}
    for child, parent in enumerate(parents):
        if parent != -1:
            children[parent].append(child)
    leaves = [i for i in range(config.n_tags) if not children[i]]

    shared_dim = max(1, min(config.video_dim, config.tag_dim) // 2)
    ling_dim = config.tag_dim - shared_dim
    vis_dim = config.video_dim - shared_dim
    latents = np.zeros((config.n_tags, shared_dim + ling_dim + vis_dim))
    latents[0] = rng.standard_normal(latents.shape[1])
    for node in range(1, config.n_tags):  # parents precede children by construction
        latents[node] = latents[parents[node]] + 0.6 * rng.standard_normal(latents.shape[1])
    shared = latents[:, :shared_dim]
    ling = latents[:, shared_dim : shared_dim + ling_dim]
    vis = latents[:, shared_dim + ling_dim :]

    word_embs = np.hstack([shared, ling]) + config.word_noise * rng.standard_normal((config.n_tags, config.tag_dim))
    visual_protos = np.hstack([shared, vis])

    users = [f"u{i:03d}" for i in range(config.n_users)]
    follows = []
    followed_by = {u: [] for u in users}
    for a in users:
        for b in users:
            if a != b and rng.random() < config.follow_density:
                follows.append(FollowEdge(follower=a, followee=b))
                followed_by[a].append(b)
    if config.p_imit > 0 and not follows:
        log.warning("p_imit > 0 with no follow edges; every video falls back to fresh sampling")

    def perturb(tag_idx_set):
        out = set()
        for t in tag_idx_set:
            if rng.random() < config.tag_noise:
                out.add(int(rng.integers(config.n_tags)))
            else:
                out.add(t)
        return out

    def fresh_set():
        leaf = leaves[int(rng.integers(len(leaves)))]
        chosen = {leaf, *_ancestors(parents, leaf)}
        for _ in range(2):
            if rng.random() < config.tag_noise:
                chosen.add(int(rng.integers(config.n_tags)))
        return chosen

    videos = []
    provenance = []
    by_user = {u: [] for u in users}  # history of (video position) per user
    tag_sets = []
    for i in range(config.n_videos):
        creator = users[int(rng.integers(config.n_users))]
        pool = [j for source in followed_by[creator] for j in by_user[source]]
        if pool and rng.random() < config.p_imit:
            copied_from = pool[int(rng.integers(len(pool)))]
            chosen = perturb(tag_sets[copied_from])
            provenance.append({"id": f"v{i:04d}", "provenance": "imitated", "copied_from": f"v{copied_from:04d}"})
        else:
            chosen = fresh_set()
            provenance.append({"id": f"v{i:04d}", "provenance": "fresh"})
        tag_sets.append(chosen)
        by_user[creator].append(i)
        videos.append((f"v{i:04d}", creator, i + 1))

    # guarantee every vocabulary tag occurs at least once; pad only fresh
    # videos nobody copied from, so imitated sets stay exact copies
    used = set().union(*tag_sets) if tag_sets else set()
    missing = sorted(set(range(config.n_tags)) - used)
    if missing:
        copied_sources = {
            int(row["copied_from"][1:]) for row in provenance if row["provenance"] == "imitated"
        }
        candidates = [
            i
            for i, row in enumerate(provenance)
            if row["provenance"] == "fresh" and i not in copied_sources
        ] or list(range(len(tag_sets)))
        for j, t in enumerate(missing):
            tag_sets[candidates[j % len(candidates)]].add(t)

    records = []
    for (vid, creator, ts), chosen in zip(videos, tag_sets):
        proto = visual_protos[sorted(chosen)].mean(axis=0)
        feat = proto + config.feature_noise * rng.standard_normal(config.video_dim)
        records.append(
            VideoRecord(
                id=vid,
                user_id=creator,
                timestamp=ts,
                tags=frozenset(tags[t] for t in chosen),
                frame_features=feat.astype(np.float32).reshape(1, -1),
            )
        )

    vocab = [TagVocabEntry(tags[i], word_embs[i].astype(np.float32)) for i in range(config.n_tags)]
    corpus = Corpus(videos=records, follows=follows, vocab=vocab)
    labels = sample_labels(rng, [v.tags for v in records], truth_edges, config.n_labels)
    return SynthResult(corpus=corpus, truth_edges=truth_edges, provenance=provenance, labels=labels)


def sample_labels(rng, tag_sets, truth_edges, n_labels):
    """Annotate random co-occurring ordered pairs against the planted
    ancestry: label 1 means the second tag narrows the first."""
    closure = ancestor_pairs(truth_edges)
    unordered = set()
    for chosen in tag_sets:
        ordered_tags = sorted(chosen)
        for i, a in enumerate(ordered_tags):
            for b in ordered_tags[i + 1 :]:
                unordered.add((a, b))
    pool = sorted(unordered)
    if not pool or n_labels <= 0:
        return []
    take = min(n_labels, len(pool))
    picked = rng.choice(len(pool), size=take, replace=False)
    labels = []
    for idx in picked:
        a, b = pool[idx]
        u, v = (a, b) if rng.random() < 0.5 else (b, a)
        labels.append((u, v, int((u, v) in closure)))
    # classifier training needs both classes
    if labels and all(l == labels[0][2] for _, _, l in labels):
        need = 1 - labels[0][2]
        done = False
        for a, b in pool:
            for u, v in ((a, b), (b, a)):
                if int((u, v) in closure) == need:
                    labels.append((u, v, need))
                    done = True
                    break
            if done:
                break
    return labels


def write(result, out_dir):
    """Emit the corpus files plus ground-truth and label sidecars."""
    os.makedirs(out_dir, exist_ok=True)
    save_corpus(result.corpus, out_dir)
    with open(os.path.join(out_dir, "ground_truth_ontology.jsonl"), "w", encoding="utf-8") as fh:
        for child, parent in result.truth_edges:
            fh.write(json.dumps({"child": child, "parent": parent, "score": 1.0}) + "\n")
    with open(os.path.join(out_dir, "provenance.jsonl"), "w", encoding="utf-8") as fh:
        for row in result.provenance:
            fh.write(json.dumps(row) + "\n")
    with open(os.path.join(out_dir, "subtopic_labels.jsonl"), "w", encoding="utf-8") as fh:
        for u, v, label in result.labels:
            fh.write(json.dumps({"u": u, "v": v, "label": label}) + "\n")


def gen_synth(config, out_dir):
    """Generate, split, and write a synthetic corpus directory.

    Labeled pairs are drawn from training-split co-occurrences so that
    downstream ontology statistics cover every labeled pair.
    """
    from radar.corpus import split_corpus

    result = generate(config)
    split_corpus(result.corpus, config.split_fractions, seed=config.seed)
    train_sets = [v.tags for v in result.corpus.videos if result.corpus.splits.get(v.id) == "train"]
    result.labels = sample_labels(
        np.random.default_rng(config.seed + 1), train_sets, result.truth_edges, config.n_labels
    )
    write(result, out_dir)
    with open(os.path.join(out_dir, "synth_config.json"), "w", encoding="utf-8") as fh:
        json.dump(asdict(config), fh, indent=1, sort_keys=True)
    return result


def ancestor_pairs(truth_edges):
    """Transitive closure: {(ancestor, descendant)} of the planted tree."""
    parent_of = {child: parent for child, parent in truth_edges}
    closure = set()
    for child in parent_of:
        node = child
        while node in parent_of:
            node = parent_of[node]
            closure.add((node, child))
    return closure
