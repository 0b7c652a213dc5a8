"""Training loop: minibatch sampling, scheduled adversarial weight,
validation tracking with early stopping, and resumable checkpoints.

The adversarial trade-off weight ramps from 0 to its maximum following
lambda0 * (2 / (1 + exp(-gamma * p)) - 1) with p the completed-step
fraction, which stabilizes the min-max game early in training.

Ablation flags reshape the pipeline: dropping a relation empties its
edge set before sampling (targets then follow the empty-neighborhood
rule), the gate can be replaced by a plain residual, attention can
normalize across relations, and the adversarial aggregator can be
swapped for concatenation or a two-way attention. Removing the
adversarial loss entirely also removes the discriminator, which is
different from running with lambda0 = 0 (there the discriminator and
the unique-feature loss remain).
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from radar import ValidationError
from radar.autodiff import AdamW, Tape
from radar.evaluation import evaluate
from radar.hetgraph import drop_relation, edge_dropout, sample_neighbors
from radar.model import (
    RadarModel,
    cache_representations,
    corpus_features,
    forward,
    load_model,
    predict_scores,
    save_model,
    total_loss,
)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; aborting instead of training on garbage."""


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 1024
    learning_rate: float = 0.0005
    weight_decay: float = 0.01
    fanout: int = 4
    layers: int = 2
    hidden: int = 64
    heads: int = 1
    feature_dropout: float = 0.2
    edge_dropout: float = 0.2
    gamma: float = 20.0
    lambda0: float = 0.0005
    seed: int = 0
    drop_r3: bool = False
    drop_r1: bool = False
    no_gated_residual: bool = False
    mutual_attention: bool = False
    aggregator: str = "aan"
    no_adv: bool = False
    negative_k: int = 0
    patience: int = 10
    precision: str = "float32"

    def validate(self):
        if self.no_adv and self.aggregator != "aan":
            raise ValidationError("no_adv conflicts with a non-aan aggregator")
        if self.aggregator not in ("aan", "concat", "attention"):
            raise ValidationError(f"unknown aggregator {self.aggregator!r}")
        if self.precision not in ("float32", "float64"):
            raise ValidationError(f"precision must be float32 or float64, got {self.precision!r}")
        if not 0 <= self.feature_dropout < 1 or not 0 <= self.edge_dropout < 1:
            raise ValidationError("dropout rates must be in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1 or self.fanout < 1:
            raise ValidationError("epochs must be >= 0; batch_size and fanout >= 1")
        if self.negative_k < 0:
            raise ValidationError("negative_k must be >= 0")

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ValidationError(f"unknown train config fields: {sorted(unknown)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    def model_kwargs(self, video_dim, tag_dim, n_tags):
        return dict(
            video_dim=video_dim,
            tag_dim=tag_dim,
            n_tags=n_tags,
            hidden=self.hidden,
            layers=self.layers,
            heads=self.heads,
            aggregator=self.aggregator,
            no_adv=self.no_adv,
            gated_residual=not self.no_gated_residual,
            mutual_attention=self.mutual_attention,
            dtype=np.dtype(self.precision),
            seed=self.seed,
        )


def lambda_schedule(p, lambda0, gamma):
    """Scheduled adversarial weight at completed-step fraction p."""
    if not 0.0 <= p <= 1.0:
        raise ValidationError(f"schedule position p must be in [0, 1], got {p}")
    return lambda0 * (2.0 / (1.0 + math.exp(-gamma * p)) - 1.0)


def apply_variant(config, graph):
    """Drop edge sets per the ablation flags; validates flag conflicts."""
    config.validate()
    out = graph
    if config.drop_r3:
        out = drop_relation(out, "r3")
    if config.drop_r1:
        out = drop_relation(out, "r1")
    return out


def _batch_targets(videos, tag_index, batch_idx, negative_k, rng, dtype):
    """Label matrix over (batch videos x all tags) plus the pair mask.

    With negative_k = 0 every pair counts; otherwise only the positives
    and k sampled negatives per positive enter the loss.
    """
    n_tags = len(tag_index)
    y = np.zeros((len(batch_idx), n_tags), dtype=dtype)
    for row, vi in enumerate(batch_idx):
        for tag in videos[vi].tags:
            y[row, tag_index[tag]] = 1.0
    if negative_k == 0:
        return y, None
    mask = np.zeros_like(y)
    for row in range(len(batch_idx)):
        pos = np.flatnonzero(y[row])
        mask[row, pos] = 1.0
        neg_pool = np.flatnonzero(y[row] == 0)
        n_neg = min(len(neg_pool), negative_k * len(pos))
        if n_neg:
            mask[row, rng.choice(neg_pool, size=n_neg, replace=False)] = 1.0
    return y, mask


@dataclass
class Checkpoint:
    epoch: int
    config: TrainConfig
    rng_state: dict
    best_map: float
    best_epoch: int


def save_checkpoint(out_dir, model, optimizer, epoch, rng, config, best_map, best_epoch, best_params):
    os.makedirs(out_dir, exist_ok=True)
    save_model(model, os.path.join(out_dir, "model"))
    opt_state = optimizer.state_dict()
    arrays = {}
    for name, arr in opt_state["m"].items():
        arrays["m/" + name] = arr
    for name, arr in opt_state["v"].items():
        arrays["v/" + name] = arr
    if best_params is not None:
        for name, arr in best_params.items():
            arrays["best/" + name] = arr
    np.savez(os.path.join(out_dir, "optimizer.npz"), step_count=opt_state["step_count"], **arrays)
    meta = {
        "epoch": epoch,
        "config": asdict(config),
        "rng_state": rng.bit_generator.state,
        "best_map": best_map,
        "best_epoch": best_epoch,
        "has_best": best_params is not None,
    }
    with open(os.path.join(out_dir, "checkpoint.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh)


def load_checkpoint(ckpt_dir):
    path = os.path.join(ckpt_dir, "checkpoint.json")
    if not os.path.exists(path):
        raise ValidationError(f"missing checkpoint: {path}")
    with open(path, encoding="utf-8") as fh:
        meta = json.load(fh)
    config = TrainConfig(**meta["config"])
    model = load_model(os.path.join(ckpt_dir, "model"))
    blob = np.load(os.path.join(ckpt_dir, "optimizer.npz"))
    opt_state = {
        "step_count": int(blob["step_count"]),
        "m": {k[2:]: blob[k] for k in blob.files if k.startswith("m/")},
        "v": {k[2:]: blob[k] for k in blob.files if k.startswith("v/")},
    }
    best_params = {k[5:]: blob[k] for k in blob.files if k.startswith("best/")} if meta["has_best"] else None
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    return model, opt_state, meta["epoch"], rng, config, meta["best_map"], meta["best_epoch"], best_params


def train(config, corpus, graph, model=None, checkpoint_dir=None, resume_from=None, run_epochs=None):
    """Run the optimization loop; returns (model, per-epoch metric rows).

    The model with the best validation mAP is restored at the end (when
    a validate split exists). Training stops early after `patience`
    epochs without improvement. A non-finite loss aborts. `run_epochs`
    caps how many epochs this call executes (the schedule still spans
    `config.epochs`), allowing interrupted runs to resume exactly.
    """
    config.validate()
    graph = apply_variant(config, graph)
    feats_all, embs_all = corpus_features(graph, corpus)
    dtype = np.dtype(config.precision)

    records = {v.id: v for v in corpus.videos}
    train_videos = [records[vid] for vid in graph.video_ids]
    tag_index = graph.tag_index
    n_train = len(train_videos)
    if n_train == 0:
        raise ValidationError("no training videos in the graph")

    has_validation = bool(corpus.splits) and any(s == "validate" for s in corpus.splits.values())

    start_epoch = 0
    best_map = -np.inf
    best_epoch = -1
    best_params = None
    if resume_from is not None:
        model, opt_state, start_epoch, rng, saved_cfg, best_map, best_epoch, best_params = load_checkpoint(
            resume_from
        )
        if asdict(saved_cfg) != asdict(config):
            raise ValidationError("checkpoint config does not match the requested config")
        optimizer = AdamW(
            model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
        )
        optimizer.load_state_dict(opt_state)
    else:
        if model is None:
            model = RadarModel(**config.model_kwargs(corpus.video_dim, corpus.tag_dim, graph.n_tags))
        rng = np.random.default_rng(config.seed)
        optimizer = AdamW(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)

    steps_per_epoch = max(1, math.ceil(n_train / config.batch_size))
    total_steps = max(1, config.epochs * steps_per_epoch)
    all_tag_idx = np.arange(graph.n_tags, dtype=np.int64)

    rows = []
    step = start_epoch * steps_per_epoch
    epochs_since_best = 0
    end_epoch = config.epochs if run_epochs is None else min(config.epochs, start_epoch + run_epochs)
    for epoch in range(start_epoch, end_epoch):
        order = rng.permutation(n_train)
        epoch_losses = []
        for b in range(steps_per_epoch):
            batch_idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            if len(batch_idx) == 0:
                continue
            lam = lambda_schedule(step / total_steps, config.lambda0, config.gamma)
            y, mask = _batch_targets(train_videos, tag_index, batch_idx, config.negative_k, rng, dtype)
            seeds = {"video": batch_idx.astype(np.int64), "tag": all_tag_idx}
            sample = sample_neighbors(graph, seeds, fanout=config.fanout, layers=config.layers, rng=rng)
            sample = edge_dropout(sample, config.edge_dropout, rng)
            feats = feats_all[sample.nodes[0]["video"]]
            embs = embs_all[sample.nodes[0]["tag"]]
            optimizer.zero_grad()
            with Tape() as tape:
                out = forward(
                    model,
                    sample,
                    feats,
                    embs,
                    train=True,
                    rng=rng,
                    feature_dropout=config.feature_dropout,
                )
                scores = predict_scores(out.reps["video"], out.reps["tag"])
                loss = total_loss(scores, y, out.adv_terms, lam, weight=mask)
            loss_value = float(loss.data)
            if not np.isfinite(loss_value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {b}: {loss_value}")
            tape.backward(loss)
            optimizer.step()
            epoch_losses.append(loss_value)
            step += 1

        row = {"epoch": epoch, "train_loss": float(np.mean(epoch_losses)) if epoch_losses else None}
        if has_validation:
            report = evaluate(model, graph, corpus, split="validate")
            row["val_mAP"] = report.map
            for k, v in report.precision_at.items():
                row[f"val_P@{k}"] = v
            for k, v in report.recall_at.items():
                row[f"val_R@{k}"] = v
            if report.map > best_map:
                best_map = report.map
                best_epoch = epoch
                best_params = {name: t.data.copy() for name, t in model.parameters().items()}
                epochs_since_best = 0
            else:
                epochs_since_best += 1
        rows.append(row)
        log.info("epoch %d: %s", epoch, row)
        if checkpoint_dir is not None:
            save_checkpoint(
                checkpoint_dir, model, optimizer, epoch + 1, rng, config, best_map, best_epoch, best_params
            )
        if has_validation and epochs_since_best >= config.patience:
            log.info("early stop at epoch %d (best epoch %d)", epoch, best_epoch)
            break

    if best_params is not None:
        for name, t in model.parameters().items():
            t.data[...] = best_params[name]
    return model, rows


def train_and_cache(config, corpus, graph, **kwargs):
    """Train, then precompute the representation caches for inference."""
    model, rows = train(config, corpus, graph, **kwargs)
    graph_v = apply_variant(config, graph)
    feats, embs = corpus_features(graph_v, corpus)
    caches = cache_representations(model, graph_v, feats, embs)
    return model, rows, caches
