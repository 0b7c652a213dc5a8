import math

import numpy as np
import pytest

from radar import ValidationError
from radar.corpus import split_corpus
from radar.hetgraph import build_graph
from radar.model import RadarModel
from radar.trainer import (
    TrainConfig,
    TrainingDiverged,
    apply_variant,
    lambda_schedule,
    load_checkpoint,
    train,
)

from conftest import toy_world


def small_config(**overrides):
    base = dict(
        epochs=2,
        batch_size=8,
        learning_rate=0.01,
        fanout=4,
        layers=2,
        hidden=8,
        feature_dropout=0.1,
        edge_dropout=0.1,
        seed=0,
        precision="float64",
        patience=10,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture
def world():
    corpus, ontology, _ = toy_world(n_videos=24, n_tags=5, seed=3)
    split_corpus(corpus, (0.7, 0.15, 0.15), seed=3)
    graph = build_graph(corpus, ontology)
    return corpus, ontology, graph


class TestLambdaSchedule:
    def test_starts_at_zero(self):
        assert lambda_schedule(0.0, 0.0005, 20.0) == 0.0

    def test_zero_ceiling_stays_zero(self):
        for p in np.linspace(0, 1, 11):
            assert lambda_schedule(float(p), 0.0, 20.0) == 0.0

    def test_endpoint_value(self):
        expected = 0.0005 * (2.0 / (1.0 + math.exp(-20.0)) - 1.0)
        assert lambda_schedule(1.0, 0.0005, 20.0) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.0005, rel=1e-7)

    def test_monotone_nondecreasing(self):
        values = [lambda_schedule(p, 0.01, 20.0) for p in np.linspace(0, 1, 101)]
        assert all(b >= a for a, b in zip(values, values[1:]))

    def test_out_of_range_rejected(self):
        with pytest.raises(ValidationError):
            lambda_schedule(1.5, 0.0005, 20.0)


class TestConfig:
    def test_defaults_match_reference_settings(self):
        cfg = TrainConfig()
        assert cfg.batch_size == 1024
        assert cfg.learning_rate == 0.0005
        assert cfg.fanout == 4
        assert cfg.layers == 2
        assert cfg.feature_dropout == 0.2
        assert cfg.edge_dropout == 0.2
        assert cfg.gamma == 20.0
        assert cfg.lambda0 == 0.0005

    def test_conflicting_flags_rejected(self):
        with pytest.raises(ValidationError):
            TrainConfig(no_adv=True, aggregator="concat").validate()

    def test_json_roundtrip(self, tmp_path):
        import json

        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"epochs": 3, "hidden": 16}))
        cfg = TrainConfig.from_json(path)
        assert cfg.epochs == 3 and cfg.hidden == 16

    def test_unknown_field_rejected(self, tmp_path):
        import json

        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"epoch": 3}))
        with pytest.raises(ValidationError):
            TrainConfig.from_json(path)


class TestApplyVariant:
    def test_drop_r3_empties_edges(self, world):
        _, _, graph = world
        out = apply_variant(small_config(drop_r3=True), graph)
        assert out.num_edges("r3") == 0
        assert out.num_edges("r2") == graph.num_edges("r2")

    def test_drop_r1_empties_edges(self, world):
        _, _, graph = world
        out = apply_variant(small_config(drop_r1=True), graph)
        assert out.num_edges("r1") == 0


class TestTrain:
    def test_zero_epochs_leaves_model_unchanged(self, world):
        corpus, _, graph = world
        cfg = small_config(epochs=0)
        model = RadarModel(**cfg.model_kwargs(corpus.video_dim, corpus.tag_dim, graph.n_tags))
        before = {n: t.data.copy() for n, t in model.parameters().items()}
        trained, rows = train(cfg, corpus, graph, model=model)
        assert rows == []
        for n, t in trained.parameters().items():
            assert np.array_equal(before[n], t.data)

    def test_loss_decreases_on_toy_data(self, world):
        corpus, _, graph = world
        cfg = small_config(epochs=8, feature_dropout=0.0, edge_dropout=0.0, lambda0=0.0)
        _, rows = train(cfg, corpus, graph)
        assert rows[-1]["train_loss"] < rows[0]["train_loss"]

    def test_identical_seed_identical_log(self, world):
        corpus, _, graph = world
        cfg = small_config(epochs=3)
        _, rows1 = train(cfg, corpus, graph)
        _, rows2 = train(cfg, corpus, graph)
        assert rows1 == rows2

    def test_metrics_log_shape(self, world):
        corpus, _, graph = world
        _, rows = train(small_config(epochs=1), corpus, graph)
        row = rows[0]
        assert {"epoch", "train_loss", "val_mAP", "val_P@1", "val_P@3", "val_R@5", "val_R@10"} <= set(row)

    def test_variants_all_train(self, world):
        corpus, _, graph = world
        for override in (
            {"drop_r3": True},
            {"drop_r1": True},
            {"no_gated_residual": True},
            {"mutual_attention": True},
            {"aggregator": "concat"},
            {"aggregator": "attention"},
            {"no_adv": True},
            {"negative_k": 2},
            {"heads": 2},
        ):
            cfg = small_config(epochs=1, **override)
            _, rows = train(cfg, corpus, graph)
            assert np.isfinite(rows[0]["train_loss"]), override

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_guard(self, world):
        corpus, _, graph = world
        corpus.videos[0].frame_features[...] = np.float32(1e38)
        cfg = small_config(epochs=1, precision="float32", learning_rate=1.0)
        with pytest.raises(TrainingDiverged):
            train(cfg, corpus, graph)


class TestCheckpointResume:
    def test_resume_is_bit_identical(self, world, tmp_path):
        corpus, _, graph = world
        cfg = small_config(epochs=3)

        # uninterrupted run
        model_a, rows_a = train(cfg, corpus, graph)

        # same schedule interrupted after two epochs, then resumed
        ckpt = tmp_path / "ckpt"
        train(cfg, corpus, graph, checkpoint_dir=ckpt, run_epochs=2)
        model_b, rows_b = train(cfg, corpus, graph, resume_from=ckpt)

        pa = model_a.parameters()
        pb = model_b.parameters()
        for name in pa:
            assert np.array_equal(pa[name].data, pb[name].data), name
        assert rows_a[2] == rows_b[0]

    def test_config_mismatch_rejected(self, world, tmp_path):
        corpus, _, graph = world
        ckpt = tmp_path / "ckpt"
        train(small_config(epochs=2), corpus, graph, checkpoint_dir=ckpt, run_epochs=1)
        with pytest.raises(ValidationError):
            train(small_config(epochs=2, hidden=16), corpus, graph, resume_from=ckpt)

    def test_checkpoint_loads(self, world, tmp_path):
        corpus, _, graph = world
        ckpt = tmp_path / "ckpt"
        train(small_config(epochs=2), corpus, graph, checkpoint_dir=ckpt)
        model, opt_state, epoch, rng, cfg, best_map, best_epoch, best = load_checkpoint(ckpt)
        assert epoch == 2
        assert opt_state["step_count"] > 0
        assert isinstance(best_map, float)
