import numpy as np
import pytest

from radar.corpus import Corpus, FollowEdge, TagVocabEntry, VideoRecord
from radar.hetgraph import build_graph
from radar.ontology import OntologyDag


def toy_world(n_videos=12, n_tags=5, n_users=4, video_dim=6, tag_dim=4, seed=0, p_follow=0.5):
    """Small random corpus + chain ontology + graph for model-level tests."""
    rng = np.random.default_rng(seed)
    tags = [f"t{i}" for i in range(n_tags)]
    vocab = [TagVocabEntry(t, rng.standard_normal(tag_dim).astype(np.float32)) for t in tags]
    users = [f"u{i}" for i in range(n_users)]
    videos = []
    for i in range(n_videos):
        k = int(rng.integers(2, min(4, n_tags) + 1))
        chosen = rng.choice(n_tags, size=k, replace=False)
        videos.append(
            VideoRecord(
                id=f"v{i:03d}",
                user_id=users[int(rng.integers(n_users))],
                timestamp=i,
                tags=frozenset(tags[j] for j in chosen),
                frame_features=rng.standard_normal((1, video_dim)).astype(np.float32),
            )
        )
    follows = []
    for a in users:
        for b in users:
            if a != b and rng.random() < p_follow:
                follows.append(FollowEdge(follower=a, followee=b))
    corpus = Corpus(videos=videos, follows=follows, vocab=vocab)
    # chain ontology: t_i child of t_{i-1}
    edges = [(tags[i], tags[i - 1], 0.9) for i in range(1, n_tags)]
    ontology = OntologyDag(nodes=tags, edges=edges)
    graph = build_graph(corpus, ontology)
    return corpus, ontology, graph


@pytest.fixture
def small_world():
    return toy_world()
