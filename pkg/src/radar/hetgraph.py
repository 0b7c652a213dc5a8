"""Directed heterogeneous video-tag network and neighbor sampling.

Nodes are videos and tags. Three directed relations carry all message
flow, each indexed by destination for inbound lookup:

  r1  tag -> tag     child ("is subtopic of") into parent
  r2  video -> tag   annotation; video content flows into its tags
  r3  video -> video older video of a followed user into newer video
                     of the follower (social influence)

User nodes are collapsed away: every follow pair (follower B, followee
A) makes each of A's videos an inbound influence on each strictly newer
video of B, capped per destination at the newest `r3_cap` influencers.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from radar import ValidationError

log = logging.getLogger(__name__)

RELATIONS = ("r1", "r2", "r3")
RELATION_TYPES = {"r1": ("tag", "tag"), "r2": ("video", "tag"), "r3": ("video", "video")}
NODE_TYPES = ("video", "tag")

DEFAULT_R3_CAP = 64


@dataclass
class HeteroGraph:
    video_ids: list
    tag_ids: list
    video_users: list
    video_timestamps: np.ndarray
    inbound: dict  # relation -> {dst index: sorted np.ndarray of src indices}
    follows: dict  # follower user id -> sorted tuple of followee user ids
    r3_cap: int = DEFAULT_R3_CAP
    video_index: dict = field(default_factory=dict)
    tag_index: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.video_index:
            self.video_index = {vid: i for i, vid in enumerate(self.video_ids)}
        if not self.tag_index:
            self.tag_index = {tag: i for i, tag in enumerate(self.tag_ids)}

    @property
    def n_videos(self):
        return len(self.video_ids)

    @property
    def n_tags(self):
        return len(self.tag_ids)

    def num_edges(self, relation):
        return sum(len(srcs) for srcs in self.inbound[relation].values())

    def edge_arrays(self, relation):
        """All (src, dst) index pairs of a relation, dst-major order."""
        srcs, dsts = [], []
        for dst in sorted(self.inbound[relation]):
            s = self.inbound[relation][dst]
            srcs.append(s)
            dsts.append(np.full(len(s), dst, dtype=np.int64))
        if not srcs:
            return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
        return np.concatenate(srcs), np.concatenate(dsts)


def _videos_by_user(videos, index):
    groups = {}
    for v in videos:
        groups.setdefault(v.user_id, []).append((v.timestamp, v.id, index[v.id]))
    for user in groups:
        groups[user].sort()
    return groups


def _influencer_sources(groups, followees, timestamp, video_id, cap):
    """Inbound influence candidates for one video: strictly older videos
    of followed users, newest `cap` kept, returned as sorted indices."""
    candidates = []
    for followee in followees:
        for t, vid, idx in groups.get(followee, ()):
            if (t, vid) < (timestamp, video_id):
                candidates.append((-t, vid, idx))
    if not candidates:
        return np.empty(0, dtype=np.int64)
    candidates.sort()
    kept = [idx for _, _, idx in candidates[:cap]]
    return np.array(sorted(kept), dtype=np.int64)


def build_graph(corpus, ontology, split="train", r3_cap=DEFAULT_R3_CAP):
    """Assemble the video-tag network from a corpus and a tag ontology.

    Video nodes come from the given split (the whole corpus when no
    split is assigned) so that held-out videos stay out of the network
    and are scored through the inductive path instead.
    """
    videos = corpus.videos_in(split)
    tag_ids = sorted(e.tag for e in corpus.vocab)
    tag_index = {t: i for i, t in enumerate(tag_ids)}
    for v in videos:
        for tag in v.tags:
            if tag not in tag_index:
                raise ValidationError(f"video {v.id!r} uses tag {tag!r} missing from the vocabulary")
    onto_nodes = set(ontology.nodes)
    missing = [t for t in tag_ids if t not in onto_nodes]
    if missing:
        raise ValidationError(f"{len(missing)} vocabulary tags missing from the ontology (e.g. {missing[0]!r})")

    video_ids = [v.id for v in videos]  # videos_in() returns id order
    video_index = {vid: i for i, vid in enumerate(video_ids)}
    video_users = [v.user_id for v in videos]
    video_timestamps = np.array([v.timestamp for v in videos], dtype=np.int64)

    inbound = {r: {} for r in RELATIONS}

    for child, parent, _ in ontology.edges:
        if child == parent:
            raise ValidationError(f"ontology self-loop on {child!r}")
        src, dst = tag_index[child], tag_index[parent]
        inbound["r1"].setdefault(dst, []).append(src)

    for v in videos:
        src = video_index[v.id]
        for tag in sorted(v.tags):
            inbound["r2"].setdefault(tag_index[tag], []).append(src)

    creators = set(video_users)
    follows = {}
    dropped = 0
    for e in corpus.follows:
        follows.setdefault(e.follower, set()).add(e.followee)
        if e.follower not in creators and e.followee not in creators:
            dropped += 1
    if dropped:
        log.warning("%d follow edges reference users with no videos in the graph", dropped)
    follows = {u: tuple(sorted(fs)) for u, fs in follows.items()}

    groups = _videos_by_user(videos, video_index)
    for v in videos:
        srcs = _influencer_sources(groups, follows.get(v.user_id, ()), v.timestamp, v.id, r3_cap)
        if len(srcs):
            inbound["r3"][video_index[v.id]] = srcs

    for rel in ("r1", "r2"):
        inbound[rel] = {dst: np.array(sorted(srcs), dtype=np.int64) for dst, srcs in inbound[rel].items()}

    return HeteroGraph(
        video_ids=video_ids,
        tag_ids=tag_ids,
        video_users=video_users,
        video_timestamps=video_timestamps,
        inbound=inbound,
        follows=follows,
        r3_cap=r3_cap,
    )


def drop_relation(graph, relation):
    """A copy of the graph with one relation's edge set emptied."""
    if relation not in RELATIONS:
        raise ValidationError(f"unknown relation {relation!r}")
    inbound = {r: (dict(adj) if r != relation else {}) for r, adj in graph.inbound.items()}
    return HeteroGraph(
        video_ids=graph.video_ids,
        tag_ids=graph.tag_ids,
        video_users=graph.video_users,
        video_timestamps=graph.video_timestamps,
        inbound=inbound,
        follows=graph.follows,
        r3_cap=graph.r3_cap,
    )


def full_inbound(graph, node_id, relation):
    """Complete inbound neighbor ids for one node, ascending order."""
    if relation not in RELATIONS:
        raise ValidationError(f"unknown relation {relation!r}")
    src_type, dst_type = RELATION_TYPES[relation]
    index = graph.video_index if dst_type == "video" else graph.tag_index
    if node_id not in index:
        raise ValidationError(f"unknown {dst_type} node {node_id!r}")
    srcs = graph.inbound[relation].get(index[node_id], np.empty(0, dtype=np.int64))
    ids = graph.video_ids if src_type == "video" else graph.tag_ids
    return [ids[i] for i in srcs]


def new_video_sources(graph, user_id, timestamp, video_id):
    """Inbound r3 source indices a freshly added video would receive."""
    groups = _videos_by_user_cached(graph)
    return _influencer_sources(groups, graph.follows.get(user_id, ()), timestamp, video_id, graph.r3_cap)


def _videos_by_user_cached(graph):
    # rebuilt on demand; graphs are immutable after construction
    groups = {}
    for idx, (vid, user, t) in enumerate(zip(graph.video_ids, graph.video_users, graph.video_timestamps)):
        groups.setdefault(user, []).append((int(t), vid, idx))
    for user in groups:
        groups[user].sort()
    return groups


def insert_video(graph, record):
    """A new graph with `record` appended as a video node.

    The node gets inbound r3 edges only; every pre-existing adjacency
    entry is shared unchanged, so representations cached for the old
    graph remain valid.
    """
    if record.id in graph.video_index:
        raise ValidationError(f"video {record.id!r} already in graph")
    new_idx = graph.n_videos
    srcs = new_video_sources(graph, record.user_id, record.timestamp, record.id)
    inbound = {r: dict(adj) for r, adj in graph.inbound.items()}
    if len(srcs):
        inbound["r3"][new_idx] = srcs
    return HeteroGraph(
        video_ids=list(graph.video_ids) + [record.id],
        tag_ids=graph.tag_ids,
        video_users=list(graph.video_users) + [record.user_id],
        video_timestamps=np.append(graph.video_timestamps, record.timestamp),
        inbound=inbound,
        follows=graph.follows,
        r3_cap=graph.r3_cap,
    )


# ---------------------------------------------------------------------------
# layered sampling


@dataclass
class RelationBlock:
    relation: str
    src_type: str
    dst_type: str
    src_pos: np.ndarray  # positions into the previous level's node array
    dst_pos: np.ndarray  # positions into this level's node array

    @property
    def n_edges(self):
        return len(self.src_pos)


@dataclass
class LayeredSample:
    """Per-layer bipartite blocks for a set of seed nodes.

    `nodes[k][type]` holds graph indices whose representations are
    needed at level k; `nodes[k]` is always a prefix of `nodes[k-1]`
    (per type), so level-k reps can reuse the first rows of level k-1.
    `blocks[i]` feeds the pass that produces level i+1 representations.
    """

    nodes: list  # length L+1 of {type: np.ndarray}
    blocks: list  # length L of {relation: RelationBlock}

    @property
    def num_layers(self):
        return len(self.blocks)

    @property
    def seeds(self):
        return self.nodes[-1]

    def total_edges(self):
        return sum(b.n_edges for layer in self.blocks for b in layer.values())


def _normalize_seeds(graph, seeds):
    out = {}
    for node_type in NODE_TYPES:
        raw = seeds.get(node_type, [])
        index = graph.video_index if node_type == "video" else graph.tag_index
        idxs = []
        seen = set()
        for item in raw:
            idx = item if isinstance(item, (int, np.integer)) else index.get(item)
            if idx is None or not 0 <= int(idx) < len(index):
                raise ValidationError(f"unknown {node_type} seed {item!r}")
            idx = int(idx)
            if idx not in seen:
                seen.add(idx)
                idxs.append(idx)
        out[node_type] = np.array(idxs, dtype=np.int64)
    return out


def _build_layers(graph, seeds, layers, pick):
    """Shared top-down construction; `pick(srcs)` selects inbound sources."""
    nodes = [None] * (layers + 1)
    blocks = [None] * layers
    nodes[layers] = _normalize_seeds(graph, seeds)
    for level in range(layers, 0, -1):
        dst_nodes = nodes[level]
        raw_edges = {}
        new_sources = {t: [] for t in NODE_TYPES}
        for rel in RELATIONS:
            src_type, dst_type = RELATION_TYPES[rel]
            adj = graph.inbound[rel]
            srcs_all, dsts_all = [], []
            for j, node in enumerate(dst_nodes[dst_type]):
                srcs = adj.get(int(node))
                if srcs is None or len(srcs) == 0:
                    continue
                chosen = pick(srcs)
                srcs_all.append(chosen)
                dsts_all.append(np.full(len(chosen), j, dtype=np.int64))
            if srcs_all:
                src_idx = np.concatenate(srcs_all)
                raw_edges[rel] = (src_idx, np.concatenate(dsts_all))
                new_sources[src_type].append(src_idx)
            else:
                raw_edges[rel] = (np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))
        prev = {}
        src_pos_map = {}
        for t in NODE_TYPES:
            base = dst_nodes[t]
            present = set(base.tolist())
            extra = sorted({int(s) for arr in new_sources[t] for s in arr} - present)
            prev[t] = np.concatenate([base, np.array(extra, dtype=np.int64)])
            src_pos_map[t] = {int(g): p for p, g in enumerate(prev[t])}
        nodes[level - 1] = prev
        layer_blocks = {}
        for rel in RELATIONS:
            src_type, dst_type = RELATION_TYPES[rel]
            src_idx, dst_pos = raw_edges[rel]
            src_pos = np.array([src_pos_map[src_type][int(s)] for s in src_idx], dtype=np.int64)
            layer_blocks[rel] = RelationBlock(rel, src_type, dst_type, src_pos, dst_pos)
        blocks[level - 1] = layer_blocks
    return LayeredSample(nodes=nodes, blocks=blocks)


def sample_neighbors(graph, seeds, fanout=4, layers=2, rng=None):
    """Uniform without-replacement inbound sampling, `layers` hops deep.

    Deterministic for a given rng seed; nodes with degree below the
    fanout keep all their inbound sources.
    """
    if rng is None:
        rng = np.random.default_rng(0)

    def pick(srcs):
        if len(srcs) <= fanout:
            return srcs
        return np.sort(rng.choice(srcs, size=fanout, replace=False))

    return _build_layers(graph, seeds, layers, pick)


def full_neighborhoods(graph, seeds, layers=2):
    """LayeredSample over complete inbound neighborhoods (inference path)."""
    return _build_layers(graph, seeds, layers, lambda srcs: srcs)


def edge_dropout(sample, rate, rng):
    """Independently remove each sampled edge with probability `rate`.

    Destination nodes are never removed; a destination losing all its
    edges falls back to the model's empty-neighborhood rule.
    """
    if not 0.0 <= rate < 1.0:
        raise ValidationError(f"edge dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return sample
    blocks = []
    for layer in sample.blocks:
        new_layer = {}
        for rel, block in layer.items():
            keep = rng.random(block.n_edges) >= rate
            new_layer[rel] = RelationBlock(
                block.relation, block.src_type, block.dst_type, block.src_pos[keep], block.dst_pos[keep]
            )
        blocks.append(new_layer)
    return LayeredSample(nodes=sample.nodes, blocks=blocks)


# ---------------------------------------------------------------------------
# serialization


def save_graph(graph, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "n_videos": graph.n_videos,
        "n_tags": graph.n_tags,
        "relations": list(RELATIONS),
        "video_ids": graph.video_ids,
        "tag_ids": graph.tag_ids,
        "video_users": graph.video_users,
        "video_timestamps": [int(t) for t in graph.video_timestamps],
        "follows": sorted((u, f) for u, fs in graph.follows.items() for f in fs),
        "r3_cap": graph.r3_cap,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh)
    for rel in RELATIONS:
        srcs, dsts = graph.edge_arrays(rel)
        pairs = np.empty((len(srcs), 2), dtype="<u4")
        pairs[:, 0] = srcs
        pairs[:, 1] = dsts
        pairs.tofile(os.path.join(out_dir, f"{rel}.bin"))


def load_graph(graph_dir):
    manifest_path = os.path.join(graph_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise ValidationError(f"missing graph manifest: {manifest_path}")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    inbound = {}
    for rel in RELATIONS:
        path = os.path.join(graph_dir, f"{rel}.bin")
        pairs = np.fromfile(path, dtype="<u4").reshape(-1, 2) if os.path.exists(path) else np.empty((0, 2))
        adj = {}
        for src, dst in pairs:
            adj.setdefault(int(dst), []).append(int(src))
        inbound[rel] = {dst: np.array(sorted(srcs), dtype=np.int64) for dst, srcs in adj.items()}
    follows = {}
    for follower, followee in manifest["follows"]:
        follows.setdefault(follower, []).append(followee)
    return HeteroGraph(
        video_ids=manifest["video_ids"],
        tag_ids=manifest["tag_ids"],
        video_users=manifest["video_users"],
        video_timestamps=np.array(manifest["video_timestamps"], dtype=np.int64),
        inbound=inbound,
        follows={u: tuple(sorted(fs)) for u, fs in follows.items()},
        r3_cap=manifest.get("r3_cap", DEFAULT_R3_CAP),
    )
