"""Heterogeneous GNN for video-tag link prediction.

Each layer runs two stages. Intra-relation message passing applies a
gated graph transformer per relation: target nodes attend over their
inbound sources (softmax normalized within one relation's segment, the
"separate attention" scheme), and a sigmoid gate blends the attention
output with a transformed residual of the target's own state, which
filters neighbor information for videos not created through imitation.
Cross-relation aggregation then fuses a tag's subtopic message and its
video message: shared projectors extract the common component, per-
relation projectors the unique ones, and a linear discriminator trained
through a gradient reversal layer pushes the common features together
and the unique features apart. Videos simply adopt their social-
influence message.

Tag scores are sigmoid dot products between final video and tag
representations. New videos have no outbound edges, so inference for
them only needs cached representations of existing nodes plus the new
node's inbound social edges.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from radar import ValidationError
from radar import autodiff as ad
from radar.autodiff import Tensor
from radar.corpus import aggregate_frame_features
from radar.hetgraph import RELATION_TYPES, RELATIONS, full_neighborhoods, new_video_sources

log = logging.getLogger(__name__)

AGGREGATORS = ("aan", "concat", "attention")
LOG_EPS = 1e-7


def glorot(rng, n_in, n_out, dtype):
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_in, n_out)).astype(dtype)


class Linear:
    def __init__(self, n_in, n_out, rng, dtype, bias=True):
        self.w = Tensor(glorot(rng, n_in, n_out, dtype), requires_grad=True)
        self.b = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x):
        y = ad.matmul(x, self.w)
        return ad.add(y, self.b) if self.b is not None else y

    def named(self, prefix):
        yield f"{prefix}.w", self.w
        if self.b is not None:
            yield f"{prefix}.b", self.b


class RelationParams:
    """Per-relation transformer and gate parameters of one layer."""

    def __init__(self, d, heads, rng, dtype):
        dh = d // heads
        self.w_msg = Tensor(glorot(rng, d, d, dtype), requires_grad=True)
        self.w_att = [Tensor(glorot(rng, dh, dh, dtype), requires_grad=True) for _ in range(heads)]
        self.gate_a = Tensor(glorot(rng, d, d, dtype), requires_grad=True)
        self.gate_b = Tensor(glorot(rng, d, d, dtype), requires_grad=True)
        self.gate_bias = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        self.res_p = Tensor(glorot(rng, d, d, dtype), requires_grad=True)
        self.res_bias = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)

    def named(self, prefix):
        yield f"{prefix}.w_msg", self.w_msg
        for i, w in enumerate(self.w_att):
            yield f"{prefix}.w_att.{i}", w
        yield f"{prefix}.gate_a", self.gate_a
        yield f"{prefix}.gate_b", self.gate_b
        yield f"{prefix}.gate_bias", self.gate_bias
        yield f"{prefix}.res_p", self.res_p
        yield f"{prefix}.res_bias", self.res_bias


class AanParams:
    """Common/unique projectors plus the linear discriminator."""

    def __init__(self, d, rng, dtype, with_discriminator=True):
        self.common = Linear(d, d, rng, dtype)
        self.unique = {"r1": Linear(d, d, rng, dtype), "r2": Linear(d, d, rng, dtype)}
        self.disc = Linear(d, 1, rng, dtype) if with_discriminator else None

    def named(self, prefix):
        yield from self.common.named(f"{prefix}.common")
        yield from self.unique["r1"].named(f"{prefix}.unique.r1")
        yield from self.unique["r2"].named(f"{prefix}.unique.r2")
        if self.disc is not None:
            yield from self.disc.named(f"{prefix}.disc")


class ConcatAggParams:
    def __init__(self, d, rng, dtype):
        self.proj = Linear(2 * d, d, rng, dtype)

    def named(self, prefix):
        yield from self.proj.named(f"{prefix}.proj")


class AttentionAggParams:
    """Two-way learned softmax weighting over the pair of messages."""

    def __init__(self, d, rng, dtype):
        self.proj = Linear(d, d, rng, dtype)
        self.query = Tensor(glorot(rng, d, 1, dtype), requires_grad=True)

    def named(self, prefix):
        yield from self.proj.named(f"{prefix}.proj")
        yield f"{prefix}.query", self.query


class LayerParams:
    def __init__(self, d, heads, aggregator, rng, dtype, with_discriminator):
        self.q = {t: Linear(d, d, rng, dtype) for t in ("video", "tag")}
        self.k = {t: Linear(d, d, rng, dtype) for t in ("video", "tag")}
        self.v = {t: Linear(d, d, rng, dtype) for t in ("video", "tag")}
        self.rel = {r: RelationParams(d, heads, rng, dtype) for r in RELATIONS}
        if aggregator == "aan":
            self.agg = AanParams(d, rng, dtype, with_discriminator)
        elif aggregator == "concat":
            self.agg = ConcatAggParams(d, rng, dtype)
        else:
            self.agg = AttentionAggParams(d, rng, dtype)

    def named(self, prefix):
        for kind in ("q", "k", "v"):
            for t, lin in getattr(self, kind).items():
                yield from lin.named(f"{prefix}.{kind}.{t}")
        for r, rp in self.rel.items():
            yield from rp.named(f"{prefix}.rel.{r}")
        yield from self.agg.named(f"{prefix}.agg")


class RadarModel:
    """Full parameter set plus architecture flags.

    Learnable tag embeddings start at zero so a tag's initial state is
    exactly its projected word embedding.
    """

    def __init__(
        self,
        video_dim,
        tag_dim,
        n_tags,
        hidden=64,
        layers=2,
        heads=1,
        aggregator="aan",
        no_adv=False,
        gated_residual=True,
        mutual_attention=False,
        dtype=np.float32,
        seed=0,
    ):
        if layers < 1:
            raise ValidationError("need at least one layer")
        if hidden % heads != 0:
            raise ValidationError(f"hidden={hidden} not divisible by heads={heads}")
        if aggregator not in AGGREGATORS:
            raise ValidationError(f"unknown aggregator {aggregator!r}")
        if no_adv and aggregator != "aan":
            raise ValidationError("no_adv only applies to the aan aggregator")
        self.video_dim = video_dim
        self.tag_dim = tag_dim
        self.n_tags = n_tags
        self.hidden = hidden
        self.n_layers = layers
        self.heads = heads
        self.aggregator = aggregator
        self.no_adv = no_adv
        self.gated_residual = gated_residual
        self.mutual_attention = mutual_attention
        self.dtype = np.dtype(dtype)
        self.seed = seed

        rng = np.random.default_rng(seed)
        self.input_video = Linear(video_dim, hidden, rng, self.dtype)
        self.input_tag = Linear(tag_dim, hidden, rng, self.dtype)
        self.tag_embed = Tensor(np.zeros((n_tags, hidden), dtype=self.dtype), requires_grad=True)
        with_disc = aggregator == "aan" and not no_adv
        self.layers = [LayerParams(hidden, heads, aggregator, rng, self.dtype, with_disc) for _ in range(layers)]

    def parameters(self):
        out = {}
        for name, t in self.input_video.named("input.video"):
            out[name] = t
        for name, t in self.input_tag.named("input.tag"):
            out[name] = t
        out["tag_embed"] = self.tag_embed
        for li, layer in enumerate(self.layers):
            for name, t in layer.named(f"layers.{li}"):
                out[name] = t
        return out

    def config_dict(self):
        return {
            "video_dim": self.video_dim,
            "tag_dim": self.tag_dim,
            "n_tags": self.n_tags,
            "hidden": self.hidden,
            "layers": self.n_layers,
            "heads": self.heads,
            "aggregator": self.aggregator,
            "no_adv": self.no_adv,
            "gated_residual": self.gated_residual,
            "mutual_attention": self.mutual_attention,
            "dtype": self.dtype.name,
            "seed": self.seed,
        }


def init_node_reps(model, video_feats, tag_word_embs, tag_indices):
    """Level-0 states: projected video features; projected word embedding
    plus the learnable row for tags."""
    video_feats = np.asarray(video_feats, dtype=model.dtype).reshape(-1, model.video_dim)
    tag_word_embs = np.asarray(tag_word_embs, dtype=model.dtype).reshape(-1, model.tag_dim)
    h_video = model.input_video(Tensor(video_feats))
    h_tag = ad.add(
        model.input_tag(Tensor(tag_word_embs)),
        ad.gather_rows(model.tag_embed, np.asarray(tag_indices, dtype=np.int64)),
    )
    return {"video": h_video, "tag": h_tag}


# ---------------------------------------------------------------------------
# gated graph transformer


def _attention_logits(layer, relation, q, k, src_pos, dst_pos, heads, dh):
    """Per-head pre-softmax scores for one relation block."""
    rp = layer.rel[relation]
    logits = []
    for h in range(heads):
        qh = ad.slice_cols(q, h * dh, (h + 1) * dh) if heads > 1 else q
        kh = ad.slice_cols(k, h * dh, (h + 1) * dh) if heads > 1 else k
        qw = ad.matmul(qh, rp.w_att[h])
        e = ad.tensor_sum(ad.mul(ad.gather_rows(qw, dst_pos), ad.gather_rows(kh, src_pos)), axis=1)
        logits.append(ad.mul(e, 1.0 / np.sqrt(dh)))
    return logits


def _gate_and_residual(layer, relation, h_targets, o, indegree, gated):
    rp = layer.rel[relation]
    res = ad.gelu(ad.add(ad.matmul(h_targets, rp.res_p), rp.res_bias))
    if o is None:  # whole block empty: every target takes the residual branch
        return res
    if gated:
        z = ad.sigmoid(
            ad.add(ad.add(ad.matmul(h_targets, rp.gate_a), ad.matmul(o, rp.gate_b)), rp.gate_bias)
        )
        m_full = ad.add(ad.mul(z, o), ad.mul(ad.sub(1.0, z), res))
    else:
        m_full = ad.add(o, res)
    has_edges = (indegree > 0).astype(h_targets.data.dtype).reshape(-1, 1)
    if has_edges.all():
        return m_full
    if not has_edges.any():
        return res
    mask = Tensor(has_edges)
    return ad.add(ad.mul(mask, m_full), ad.mul(ad.sub(1.0, mask), res))


def _weighted_message(v_rows_per_head, alphas, dst_pos, n_targets):
    parts = []
    for vh, alpha in zip(v_rows_per_head, alphas):
        weighted = ad.mul(ad.reshape(alpha, (-1, 1)), vh)
        parts.append(ad.segment_sum(weighted, dst_pos, n_targets))
    return parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)


def ggt_message(layer, relation, h_targets, h_sources, src_pos, dst_pos, heads=1, gated=True, attn_sink=None):
    """One relation's message for every target (separate attention).

    Targets with no inbound edges fall back to the pure residual branch
    GELU(P h + b), keeping their own transformed state. `attn_sink`,
    when given, collects (relation, dst_pos, per-head weights, n_targets).
    """
    n_targets = h_targets.data.shape[0]
    d = h_targets.data.shape[1]
    dh = d // heads
    src_type, dst_type = RELATION_TYPES[relation]
    indegree = np.bincount(dst_pos, minlength=n_targets) if len(dst_pos) else np.zeros(n_targets, dtype=int)
    if len(src_pos) == 0:
        return _gate_and_residual(layer, relation, h_targets, None, indegree, gated)
    q = layer.q[dst_type](h_targets)
    k = layer.k[src_type](h_sources)
    v = ad.matmul(layer.v[src_type](h_sources), layer.rel[relation].w_msg)
    logits = _attention_logits(layer, relation, q, k, src_pos, dst_pos, heads, dh)
    alphas = [ad.segment_softmax(lg, dst_pos, n_targets) for lg in logits]
    if attn_sink is not None:
        attn_sink.append((relation, dst_pos.copy(), [a.data.copy() for a in alphas], n_targets))
    v_rows = [
        ad.gather_rows(ad.slice_cols(v, h * dh, (h + 1) * dh) if heads > 1 else v, src_pos)
        for h in range(heads)
    ]
    o = _weighted_message(v_rows, alphas, dst_pos, n_targets)
    return _gate_and_residual(layer, relation, h_targets, o, indegree, gated)


def _tag_messages(layer, h_tag_targets, pools, blocks, heads, dh, gated, mutual, attn_sink=None):
    """Messages m_r1, m_r2 for tag targets; optionally one softmax over
    the union of both relations per destination (mutual attention)."""
    n_targets = h_tag_targets.data.shape[0]
    state = {}
    for rel in ("r1", "r2"):
        block = blocks.get(rel)
        src_type = RELATION_TYPES[rel][0]
        if block is None or block.n_edges == 0:
            state[rel] = None
            continue
        q = pools["q"]["tag"]
        k = pools["k"][src_type]
        v = ad.matmul(pools["v"][src_type], layer.rel[rel].w_msg)
        logits = _attention_logits(layer, rel, q, k, block.src_pos, block.dst_pos, heads, dh)
        v_rows = [
            ad.gather_rows(ad.slice_cols(v, h * dh, (h + 1) * dh) if heads > 1 else v, block.src_pos)
            for h in range(heads)
        ]
        state[rel] = (logits, v_rows, block)

    alphas = {}
    if mutual:
        live = [rel for rel in ("r1", "r2") if state[rel] is not None]
        if live:
            joint_dst = np.concatenate([state[rel][2].dst_pos for rel in live])
            joint_heads = []
            for h in range(heads):
                joint_logits = ad.concat([state[rel][0][h] for rel in live], axis=0)
                joint_alpha = ad.segment_softmax(joint_logits, joint_dst, n_targets)
                joint_heads.append(joint_alpha)
                offset = 0
                for rel in live:
                    n_e = state[rel][2].n_edges
                    alphas.setdefault(rel, []).append(
                        ad.gather_rows(joint_alpha, np.arange(offset, offset + n_e, dtype=np.int64))
                    )
                    offset += n_e
            if attn_sink is not None:
                attn_sink.append(("r1+r2", joint_dst.copy(), [a.data.copy() for a in joint_heads], n_targets))
    else:
        for rel in ("r1", "r2"):
            if state[rel] is not None:
                logits, _, block = state[rel]
                alphas[rel] = [ad.segment_softmax(lg, block.dst_pos, n_targets) for lg in logits]
                if attn_sink is not None:
                    attn_sink.append((rel, block.dst_pos.copy(), [a.data.copy() for a in alphas[rel]], n_targets))

    messages = {}
    for rel in ("r1", "r2"):
        if state[rel] is None:
            zero = np.zeros(n_targets, dtype=int)
            messages[rel] = _gate_and_residual(layer, rel, h_tag_targets, None, zero, gated=False)
            continue
        logits, v_rows, block = state[rel]
        o = _weighted_message(v_rows, alphas[rel], block.dst_pos, n_targets)
        indegree = np.bincount(block.dst_pos, minlength=n_targets)
        messages[rel] = _gate_and_residual(layer, rel, h_tag_targets, o, indegree, gated)
    return messages


# ---------------------------------------------------------------------------
# cross-relation aggregation


def _adversarial_pair_loss(disc, first, second):
    """-log D(first) - log(1 - D(second)), each term batch-averaged."""
    d1 = ad.clip(ad.sigmoid(disc(first)), LOG_EPS, 1.0 - LOG_EPS)
    d2 = ad.clip(ad.sigmoid(disc(second)), LOG_EPS, 1.0 - LOG_EPS)
    return ad.add(ad.mean(ad.mul(ad.log(d1), -1.0)), ad.mean(ad.mul(ad.log(ad.sub(1.0, d2)), -1.0)))


def aan_aggregate(params, m_r1, m_r2, lam=0.0, no_adv=False):
    """Fuse subtopic and video messages via common/unique separation.

    Output is the mean of the pooled common part (elementwise pair mean)
    and the pooled unique part (elementwise pair max). Unless `no_adv`,
    also returns the two discriminator losses: the common features pass
    through a sign-reversing gradient layer before the discriminator, so
    minimizing `unique_loss + lam * common_loss` trains the common
    projector to *confuse* the discriminator while everything else
    minimizes. `lam` only shapes the loss the caller assembles; it is
    not applied here.
    """
    c1 = params.common(m_r1)
    c2 = params.common(m_r2)
    u1 = params.unique["r1"](m_r1)
    u2 = params.unique["r2"](m_r2)
    h = ad.mul(ad.add(ad.maximum(u1, u2), ad.pair_mean(c1, c2)), 0.5)
    if no_adv or params.disc is None:
        return h, None, None
    loss_u = _adversarial_pair_loss(params.disc, u1, u2)
    loss_c = _adversarial_pair_loss(params.disc, ad.grad_reverse(c1, 1.0), ad.grad_reverse(c2, 1.0))
    return h, loss_u, loss_c


def _aggregate(layer, model, m1, m2):
    if model.aggregator == "aan":
        return aan_aggregate(layer.agg, m1, m2, no_adv=model.no_adv)
    if model.aggregator == "concat":
        return layer.agg.proj(ad.concat([m1, m2], axis=1)), None, None
    # two-way learned softmax over the message pair
    e1 = ad.matmul(ad.tanh(layer.agg.proj(m1)), layer.agg.query)
    e2 = ad.matmul(ad.tanh(layer.agg.proj(m2)), layer.agg.query)
    mx = ad.maximum(e1, e2)
    a1 = ad.exp(ad.sub(e1, mx))
    a2 = ad.exp(ad.sub(e2, mx))
    denom = ad.add(a1, a2)
    h = ad.add(ad.mul(ad.div(a1, denom), m1), ad.mul(ad.div(a2, denom), m2))
    return h, None, None


# ---------------------------------------------------------------------------
# forward pass


@dataclass
class ForwardOutput:
    reps: dict  # seed representations per node type
    adv_terms: list  # [(unique_loss, common_loss)] per layer
    layer_reps: list = field(default_factory=list)  # numpy copies per level when collected


def _narrow(h, n):
    if h.data.shape[0] == n:
        return h
    return ad.gather_rows(h, np.arange(n, dtype=np.int64))


def forward(
    model,
    sample,
    video_feats,
    tag_word_embs,
    train=False,
    rng=None,
    feature_dropout=0.0,
    collect_layers=False,
    attn_sink=None,
):
    """Run all layers over a LayeredSample.

    `video_feats` / `tag_word_embs` are raw feature rows aligned with
    the sample's level-0 node arrays. Feature dropout applies to every
    layer's input states in training mode.
    """
    if sample.num_layers != model.n_layers:
        raise ValidationError(f"sample has {sample.num_layers} layers, model has {model.n_layers}")
    h = init_node_reps(model, video_feats, tag_word_embs, sample.nodes[0]["tag"])
    collected = []
    if collect_layers:
        collected.append({t: h[t].data.copy() for t in h})
    adv_terms = []
    heads, dh = model.heads, model.hidden // model.heads
    for li in range(model.n_layers):
        layer = model.layers[li]
        blocks = sample.blocks[li]
        if train and feature_dropout > 0.0:
            h = {t: ad.dropout(h[t], feature_dropout, rng) for t in h}
        n_dst = {t: len(sample.nodes[li + 1][t]) for t in ("video", "tag")}
        h_dst = {t: _narrow(h[t], n_dst[t]) for t in ("video", "tag")}
        pools = {
            "q": {t: layer.q[t](h_dst[t]) for t in ("video", "tag")},
            "k": {t: layer.k[t](h[t]) for t in ("video", "tag")},
            "v": {t: layer.v[t](h[t]) for t in ("video", "tag")},
        }
        r3 = blocks.get("r3")
        h_video = ggt_message(
            layer,
            "r3",
            h_dst["video"],
            h["video"],
            r3.src_pos if r3 is not None else np.empty(0, dtype=np.int64),
            r3.dst_pos if r3 is not None else np.empty(0, dtype=np.int64),
            heads=heads,
            gated=model.gated_residual,
            attn_sink=attn_sink,
        )
        messages = _tag_messages(
            layer,
            h_dst["tag"],
            pools,
            blocks,
            heads,
            dh,
            model.gated_residual,
            model.mutual_attention,
            attn_sink=attn_sink,
        )
        h_tag, loss_u, loss_c = _aggregate(layer, model, messages["r1"], messages["r2"])
        if loss_u is not None:
            adv_terms.append((loss_u, loss_c))
        h = {"video": h_video, "tag": h_tag}
        if collect_layers:
            collected.append({t: h[t].data.copy() for t in h})
    return ForwardOutput(reps=h, adv_terms=adv_terms, layer_reps=collected)


def predict_scores(video_reps, tag_reps):
    """sigmoid(h(v) . h(t)) for every (video, tag) pair: (n_v, n_t)."""
    return ad.sigmoid(ad.matmul(video_reps, ad.transpose(tag_reps)))


def total_loss(scores, targets, adv_terms, lam, weight=None):
    """BCE plus the per-layer adversarial terms.

    loss = BCE + sum_l (unique_loss_l + lam * common_loss_l); with no
    adversarial terms this is exactly the BCE.
    """
    loss = ad.bce_loss(scores, np.asarray(targets, dtype=scores.data.dtype), weight=weight)
    for loss_u, loss_c in adv_terms:
        loss = ad.add(loss, ad.add(loss_u, ad.mul(loss_c, float(lam))))
    return loss


# ---------------------------------------------------------------------------
# cached representations and inductive inference


@dataclass
class RepCache:
    video: list  # numpy (n_videos, d) per level 0..L
    tag: list  # numpy (n_tags, d) per level 0..L


def corpus_features(graph, corpus):
    """Aggregated video features and tag word embeddings in graph order."""
    records = {v.id: v for v in corpus.videos}
    feats = np.zeros((graph.n_videos, corpus.video_dim), dtype=np.float32)
    for i, vid in enumerate(graph.video_ids):
        if vid not in records:
            raise ValidationError(f"graph video {vid!r} missing from corpus")
        feats[i] = aggregate_frame_features(records[vid])
    vocab = corpus.vocab_by_tag()
    embs = np.stack([vocab[t].word_embedding for t in graph.tag_ids])
    return feats, embs


def cache_representations(model, graph, video_feats, tag_word_embs):
    """Deterministic full-neighborhood forward over every node, keeping
    each level's representations for later inductive scoring."""
    seeds = {
        "video": np.arange(graph.n_videos, dtype=np.int64),
        "tag": np.arange(graph.n_tags, dtype=np.int64),
    }
    sample = full_neighborhoods(graph, seeds, layers=model.n_layers)
    out = forward(model, sample, video_feats, tag_word_embs, collect_layers=True)
    video_levels = [lvl["video"][: graph.n_videos] for lvl in out.layer_reps]
    tag_levels = [lvl["tag"][: graph.n_tags] for lvl in out.layer_reps]
    return RepCache(video=video_levels, tag=tag_levels)


def inductive_infer(model, graph, record, caches):
    """Scores over all tags for a video outside the graph.

    Computes the new node's per-layer state from its inbound social
    edges against the cached neighbor representations; existing caches
    are read-only.
    """
    feat = aggregate_frame_features(record).astype(model.dtype).reshape(1, -1)
    srcs = new_video_sources(graph, record.user_id, record.timestamp, record.id)
    h = model.input_video(Tensor(feat))
    dst_pos = np.zeros(len(srcs), dtype=np.int64)
    for li in range(model.n_layers):
        sources = Tensor(caches.video[li][srcs]) if len(srcs) else Tensor(np.zeros((0, model.hidden), dtype=model.dtype))
        h = ggt_message(
            model.layers[li],
            "r3",
            h,
            sources,
            np.arange(len(srcs), dtype=np.int64),
            dst_pos,
            heads=model.heads,
            gated=model.gated_residual,
        )
    scores = predict_scores(h, Tensor(caches.tag[model.n_layers]))
    return scores.data[0]


# ---------------------------------------------------------------------------
# checkpoint format


def save_model(model, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    params = model.parameters()
    tensors = {}
    for i, (name, t) in enumerate(params.items()):
        fname = f"t{i:04d}.bin"
        t.data.astype(t.data.dtype.newbyteorder("<")).tofile(os.path.join(out_dir, fname))
        tensors[name] = {"file": fname, "shape": list(t.data.shape), "dtype": t.data.dtype.name}
    manifest = {
        "format": "radar-model-v1",
        "config": model.config_dict(),
        "node_types": ["video", "tag"],
        "relations": list(RELATIONS),
        "tensors": tensors,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)


def load_model(model_dir):
    path = os.path.join(model_dir, "manifest.json")
    if not os.path.exists(path):
        raise ValidationError(f"missing model manifest: {path}")
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    cfg = manifest["config"]
    model = RadarModel(
        video_dim=cfg["video_dim"],
        tag_dim=cfg["tag_dim"],
        n_tags=cfg["n_tags"],
        hidden=cfg["hidden"],
        layers=cfg["layers"],
        heads=cfg["heads"],
        aggregator=cfg["aggregator"],
        no_adv=cfg["no_adv"],
        gated_residual=cfg["gated_residual"],
        mutual_attention=cfg["mutual_attention"],
        dtype=np.dtype(cfg["dtype"]),
        seed=cfg["seed"],
    )
    params = model.parameters()
    for name, meta in manifest["tensors"].items():
        if name not in params:
            raise ValidationError(f"checkpoint tensor {name!r} not in model")
        dt = np.dtype(meta["dtype"])
        data = np.fromfile(os.path.join(model_dir, meta["file"]), dtype=dt.newbyteorder("<"))
        params[name].data[...] = data.reshape(meta["shape"]).astype(dt)
    return model


def save_caches(caches, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    meta = {"video": [], "tag": []}
    for kind in ("video", "tag"):
        for level, arr in enumerate(getattr(caches, kind)):
            fname = f"cache_{kind}_{level}.bin"
            arr.astype(arr.dtype.newbyteorder("<")).tofile(os.path.join(out_dir, fname))
            meta[kind].append({"file": fname, "shape": list(arr.shape), "dtype": arr.dtype.name})
    with open(os.path.join(out_dir, "caches.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh)


def load_caches(cache_dir):
    path = os.path.join(cache_dir, "caches.json")
    if not os.path.exists(path):
        raise ValidationError(f"missing cache index: {path}")
    with open(path, encoding="utf-8") as fh:
        meta = json.load(fh)
    levels = {}
    for kind in ("video", "tag"):
        arrays = []
        for m in meta[kind]:
            dt = np.dtype(m["dtype"])
            raw = np.fromfile(os.path.join(cache_dir, m["file"]), dtype=dt.newbyteorder("<"))
            arrays.append(raw.reshape(m["shape"]).astype(dt))
        levels[kind] = arrays
    return RepCache(video=levels["video"], tag=levels["tag"])
