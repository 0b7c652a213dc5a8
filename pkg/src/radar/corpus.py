"""Loading, validation, and splitting of the raw annotation data.

Three JSONL inputs describe a vertical: `videos.jsonl` (tagged videos
with precomputed frame features), `follows.jsonl` (user follow edges),
and `tags.jsonl` (tag vocabulary with word embeddings). Everything
downstream consumes the validated, immutable ``Corpus``.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from radar import ValidationError

log = logging.getLogger(__name__)

SPLITS = ("train", "validate", "test")


@dataclass
class VideoRecord:
    id: str
    user_id: str
    timestamp: int
    tags: frozenset
    frame_features: np.ndarray  # (n_frames, D_v) float32, or (1, D_v) for a pre-aggregated vector


@dataclass
class FollowEdge:
    follower: str
    followee: str


@dataclass
class TagVocabEntry:
    tag: str
    word_embedding: np.ndarray  # (D_t,) float32


@dataclass
class Corpus:
    videos: list
    follows: list
    vocab: list
    splits: dict = field(default_factory=dict)  # video id -> "train" | "validate" | "test"

    @property
    def video_dim(self):
        return self.videos[0].frame_features.shape[1] if self.videos else 0

    @property
    def tag_dim(self):
        return self.vocab[0].word_embedding.shape[0] if self.vocab else 0

    def tag_ids(self):
        return sorted(entry.tag for entry in self.vocab)

    def vocab_by_tag(self):
        return {entry.tag: entry for entry in self.vocab}

    def videos_in(self, split):
        """Videos assigned to a split, in id order.

        The training split excludes videos with fewer than two tags; the
        validate/test splits keep their ground truth untouched. With no
        split assignment every video counts as training data.
        """
        if split not in SPLITS:
            raise ValidationError(f"unknown split {split!r}")
        if not self.splits:
            vids = list(self.videos) if split == "train" else []
        else:
            vids = [v for v in self.videos if self.splits.get(v.id) == split]
        if split == "train":
            kept = [v for v in vids if len(v.tags) >= 2]
            if len(kept) < len(vids):
                log.warning("excluded %d training videos with fewer than 2 tags", len(vids) - len(kept))
            vids = kept
        return sorted(vids, key=lambda v: v.id)


def aggregate_frame_features(record):
    """Elementwise mean over frames; a single pre-aggregated vector passes through."""
    frames = record.frame_features
    if frames.shape[0] == 0:
        raise ValidationError(f"video {record.id!r} has an empty frame sequence")
    if frames.shape[0] == 1:
        return frames[0]
    return frames.mean(axis=0, dtype=np.float64).astype(np.float32)


def _parse_line(path, lineno, line):
    try:
        return json.loads(line)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}:{lineno}: malformed JSON ({exc})") from exc


def _iter_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if line:
                yield lineno, _parse_line(path, lineno, line)


def load_corpus(corpus_dir):
    """Load and validate videos, follows, and the tag vocabulary.

    Raises ``ValidationError`` for malformed lines (with line numbers),
    unknown tag ids, inconsistent feature dimensions, duplicate ids,
    and self- or duplicate follows.
    """
    videos_path = os.path.join(corpus_dir, "videos.jsonl")
    follows_path = os.path.join(corpus_dir, "follows.jsonl")
    tags_path = os.path.join(corpus_dir, "tags.jsonl")
    for path in (videos_path, follows_path, tags_path):
        if not os.path.exists(path):
            raise ValidationError(f"missing corpus file: {path}")

    vocab = []
    seen_tags = set()
    tag_dim = None
    for lineno, obj in _iter_jsonl(tags_path):
        tag, emb = obj.get("tag"), obj.get("embedding")
        if not isinstance(tag, str) or not isinstance(emb, list):
            raise ValidationError(f"{tags_path}:{lineno}: expected {{'tag': str, 'embedding': [...]}}")
        if tag in seen_tags:
            raise ValidationError(f"{tags_path}:{lineno}: duplicate tag id {tag!r}")
        seen_tags.add(tag)
        vec = np.asarray(emb, dtype=np.float32)
        if tag_dim is None:
            tag_dim = vec.shape[0]
        elif vec.shape[0] != tag_dim:
            raise ValidationError(
                f"{tags_path}:{lineno}: embedding dimension {vec.shape[0]} != {tag_dim}"
            )
        vocab.append(TagVocabEntry(tag=tag, word_embedding=vec))

    videos = []
    seen_videos = set()
    feat_dim = None
    for lineno, obj in _iter_jsonl(videos_path):
        vid = obj.get("id")
        if not isinstance(vid, str):
            raise ValidationError(f"{videos_path}:{lineno}: missing video id")
        if vid in seen_videos:
            raise ValidationError(f"{videos_path}:{lineno}: duplicate id {vid!r}")
        seen_videos.add(vid)
        if "frames" in obj:
            frames = np.asarray(obj["frames"], dtype=np.float32)
            if frames.ndim != 2 or frames.shape[0] == 0:
                raise ValidationError(f"{videos_path}:{lineno}: 'frames' must be a non-empty list of vectors")
        elif "feature" in obj:
            frames = np.asarray(obj["feature"], dtype=np.float32).reshape(1, -1)
        else:
            raise ValidationError(f"{videos_path}:{lineno}: need 'frames' or 'feature'")
        if feat_dim is None:
            feat_dim = frames.shape[1]
        elif frames.shape[1] != feat_dim:
            raise ValidationError(
                f"{videos_path}:{lineno}: feature dimension {frames.shape[1]} != {feat_dim}"
            )
        tags = obj.get("tags")
        if not isinstance(tags, list) or not tags:
            raise ValidationError(f"{videos_path}:{lineno}: 'tags' must be a non-empty list")
        for tag in tags:
            if tag not in seen_tags:
                raise ValidationError(f"{videos_path}:{lineno}: unknown tag {tag!r}")
        if "timestamp" not in obj or "user_id" not in obj:
            raise ValidationError(f"{videos_path}:{lineno}: missing 'timestamp' or 'user_id'")
        videos.append(
            VideoRecord(
                id=vid,
                user_id=str(obj["user_id"]),
                timestamp=int(obj["timestamp"]),
                tags=frozenset(tags),
                frame_features=frames,
            )
        )

    follows = []
    seen_pairs = set()
    for lineno, obj in _iter_jsonl(follows_path):
        follower, followee = obj.get("follower"), obj.get("followee")
        if not isinstance(follower, str) or not isinstance(followee, str):
            raise ValidationError(f"{follows_path}:{lineno}: expected {{'follower': str, 'followee': str}}")
        if follower == followee:
            raise ValidationError(f"{follows_path}:{lineno}: self-follow {follower!r}")
        if (follower, followee) in seen_pairs:
            raise ValidationError(f"{follows_path}:{lineno}: duplicate follow pair")
        seen_pairs.add((follower, followee))
        follows.append(FollowEdge(follower=follower, followee=followee))

    corpus = Corpus(videos=videos, follows=follows, vocab=vocab)

    splits_path = os.path.join(corpus_dir, "splits.json")
    if os.path.exists(splits_path):
        with open(splits_path, encoding="utf-8") as fh:
            splits = json.load(fh)
        if set(splits) - seen_videos:
            raise ValidationError(f"{splits_path}: split entries for unknown video ids")
        for vid, split in splits.items():
            if split not in SPLITS:
                raise ValidationError(f"{splits_path}: unknown split {split!r} for video {vid!r}")
        corpus.splits = splits
    return corpus


def save_corpus(corpus, corpus_dir):
    """Write the corpus back out in the JSONL schemas read by load_corpus."""
    os.makedirs(corpus_dir, exist_ok=True)
    with open(os.path.join(corpus_dir, "videos.jsonl"), "w", encoding="utf-8") as fh:
        for v in corpus.videos:
            obj = {
                "id": v.id,
                "user_id": v.user_id,
                "timestamp": v.timestamp,
                "tags": sorted(v.tags),
            }
            if v.frame_features.shape[0] == 1:
                obj["feature"] = [float(x) for x in v.frame_features[0]]
            else:
                obj["frames"] = [[float(x) for x in row] for row in v.frame_features]
            fh.write(json.dumps(obj) + "\n")
    with open(os.path.join(corpus_dir, "follows.jsonl"), "w", encoding="utf-8") as fh:
        for e in corpus.follows:
            fh.write(json.dumps({"follower": e.follower, "followee": e.followee}) + "\n")
    with open(os.path.join(corpus_dir, "tags.jsonl"), "w", encoding="utf-8") as fh:
        for t in corpus.vocab:
            fh.write(json.dumps({"tag": t.tag, "embedding": [float(x) for x in t.word_embedding]}) + "\n")
    if corpus.splits:
        with open(os.path.join(corpus_dir, "splits.json"), "w", encoding="utf-8") as fh:
            json.dump(corpus.splits, fh, sort_keys=True)


def split_corpus(corpus, fractions=(0.8, 0.1, 0.1), seed=0, temporal=False):
    """Assign every video to exactly one of train/validate/test.

    Random by default and reproducible for a given seed; `temporal=True`
    instead orders by (timestamp, id) so the newest videos become the
    test set.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValidationError(f"need three positive fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValidationError(f"fractions must sum to 1, got {sum(fractions)}")
    ids = sorted(v.id for v in corpus.videos)
    if temporal:
        order = sorted(corpus.videos, key=lambda v: (v.timestamp, v.id))
        ids = [v.id for v in order]
    else:
        rng = np.random.default_rng(seed)
        ids = [ids[i] for i in rng.permutation(len(ids))]
    n = len(ids)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    splits = {}
    for i, vid in enumerate(ids):
        if i < n_train:
            splits[vid] = "train"
        elif i < n_train + n_val:
            splits[vid] = "validate"
        else:
            splits[vid] = "test"
    corpus.splits = splits
    return corpus
