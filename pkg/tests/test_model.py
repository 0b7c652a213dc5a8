import numpy as np
import pytest
from scipy.special import erf

from radar import ValidationError
from radar import autodiff as ad
from radar.autodiff import Tape, Tensor, finite_diff_check
from radar.hetgraph import full_neighborhoods, insert_video, sample_neighbors
from radar.model import (
    RadarModel,
    aan_aggregate,
    cache_representations,
    corpus_features,
    forward,
    ggt_message,
    inductive_infer,
    init_node_reps,
    load_caches,
    load_model,
    predict_scores,
    save_caches,
    save_model,
    total_loss,
)

from conftest import toy_world


def make_model(world, hidden=8, dtype=np.float64, **kwargs):
    corpus, _, graph = world
    return RadarModel(
        video_dim=corpus.video_dim,
        tag_dim=corpus.tag_dim,
        n_tags=graph.n_tags,
        hidden=hidden,
        dtype=dtype,
        **kwargs,
    )


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


class TestInitNodeReps:
    def test_zero_embeddings_give_projection_bias(self, small_world):
        model = make_model(small_world)
        h = init_node_reps(model, np.zeros((1, 6)), np.zeros((2, 4)), np.array([0, 1]))
        assert np.allclose(h["tag"].data, model.input_tag.b.data)
        assert np.allclose(h["video"].data, model.input_video.b.data)

    def test_identical_features_identical_states(self, small_world):
        model = make_model(small_world)
        feats = np.tile(np.arange(6.0), (2, 1))
        h = init_node_reps(model, feats, np.zeros((1, 4)), np.array([0]))
        assert np.array_equal(h["video"].data[0], h["video"].data[1])

    def test_output_width_despite_different_input_dims(self, small_world):
        model = make_model(small_world, hidden=16)
        h = init_node_reps(model, np.zeros((3, 6)), np.zeros((2, 4)), np.array([0, 1]))
        assert h["video"].data.shape == (3, 16)
        assert h["tag"].data.shape == (2, 16)


class TestGgtMessage:
    def test_single_neighbor_gets_full_attention(self, small_world):
        model = make_model(small_world)
        rng = np.random.default_rng(0)
        h_t = Tensor(rng.standard_normal((1, 8)))
        h_s = Tensor(rng.standard_normal((1, 8)))
        layer = model.layers[0]
        m = ggt_message(layer, "r3", h_t, h_s, np.array([0]), np.array([0]))
        # oracle with alpha forced to 1
        q = lambda x, lin: x @ lin.w.data + lin.b.data
        v = q(h_s.data, layer.v["video"]) @ layer.rel["r3"].w_msg.data
        o = v
        rp = layer.rel["r3"]
        z = _sigmoid(h_t.data @ rp.gate_a.data + o @ rp.gate_b.data + rp.gate_bias.data)
        res = _gelu(h_t.data @ rp.res_p.data + rp.res_bias.data)
        expected = z * o + (1 - z) * res
        assert np.allclose(m.data, expected, atol=1e-12)

    def test_dense_oracle_multiple_neighbors(self, small_world):
        model = make_model(small_world)
        layer = model.layers[0]
        rng = np.random.default_rng(1)
        h_t = Tensor(rng.standard_normal((2, 8)))
        h_s = Tensor(rng.standard_normal((3, 8)))
        src = np.array([0, 1, 2, 1])
        dst = np.array([0, 0, 1, 1])
        m = ggt_message(layer, "r2", h_t, h_s, src, dst)

        lin = lambda x, l: x @ l.w.data + l.b.data
        q = lin(h_t.data, layer.q["tag"])
        k = lin(h_s.data, layer.k["video"])
        v = lin(h_s.data, layer.v["video"]) @ layer.rel["r2"].w_msg.data
        logits = np.einsum("ed,ed->e", (q @ layer.rel["r2"].w_att[0].data)[dst], k[src]) / np.sqrt(8)
        o = np.zeros((2, 8))
        for t in range(2):
            sel = dst == t
            w = np.exp(logits[sel] - logits[sel].max())
            w /= w.sum()
            o[t] = (w[:, None] * v[src[sel]]).sum(axis=0)
        rp = layer.rel["r2"]
        z = _sigmoid(h_t.data @ rp.gate_a.data + o @ rp.gate_b.data + rp.gate_bias.data)
        res = _gelu(h_t.data @ rp.res_p.data + rp.res_bias.data)
        expected = z * o + (1 - z) * res
        assert np.allclose(m.data, expected, atol=1e-10)

    def test_zero_gate_inputs_blend_half_half(self, small_world):
        model = make_model(small_world)
        layer = model.layers[0]
        rp = layer.rel["r3"]
        rp.gate_a.data[...] = 0
        rp.gate_b.data[...] = 0
        rp.gate_bias.data[...] = 0
        rng = np.random.default_rng(2)
        h_t = Tensor(rng.standard_normal((1, 8)))
        h_s = Tensor(rng.standard_normal((2, 8)))
        m = ggt_message(layer, "r3", h_t, h_s, np.array([0, 1]), np.array([0, 0]))
        lin = lambda x, l: x @ l.w.data + l.b.data
        k = lin(h_s.data, layer.k["video"])
        v = lin(h_s.data, layer.v["video"]) @ rp.w_msg.data
        q = lin(h_t.data, layer.q["video"])
        logits = np.einsum("ed,ed->e", (q @ rp.w_att[0].data)[[0, 0]], k) / np.sqrt(8)
        w = np.exp(logits - logits.max())
        w /= w.sum()
        o = (w[:, None] * v).sum(axis=0)
        expected = 0.5 * o + 0.5 * _gelu(h_t.data @ rp.res_p.data + rp.res_bias.data)
        assert np.allclose(m.data, expected, atol=1e-12)

    def test_empty_neighborhood_residual_rule(self, small_world):
        model = make_model(small_world)
        layer = model.layers[0]
        rng = np.random.default_rng(3)
        h_t = Tensor(rng.standard_normal((2, 8)))
        m = ggt_message(layer, "r3", h_t, Tensor(np.zeros((0, 8))), np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))
        rp = layer.rel["r3"]
        expected = _gelu(h_t.data @ rp.res_p.data + rp.res_bias.data)
        assert np.allclose(m.data, expected, atol=1e-12)

    def test_gate_values_stay_in_unit_interval(self, small_world):
        model = make_model(small_world)
        layer = model.layers[0]
        rng = np.random.default_rng(4)
        h_t = Tensor(rng.standard_normal((4, 8)) * 5)
        h_s = Tensor(rng.standard_normal((6, 8)) * 5)
        src = rng.integers(0, 6, size=10).astype(np.int64)
        dst = rng.integers(0, 4, size=10).astype(np.int64)
        lin = lambda x, l: x @ l.w.data + l.b.data
        rp = layer.rel["r3"]
        # recompute z directly
        v = lin(h_s.data, layer.v["video"]) @ rp.w_msg.data
        q = lin(h_t.data, layer.q["video"])
        k = lin(h_s.data, layer.k["video"])
        logits = np.einsum("ed,ed->e", (q @ rp.w_att[0].data)[dst], k[src]) / np.sqrt(8)
        o = np.zeros((4, 8))
        for t in range(4):
            sel = dst == t
            if sel.any():
                w = np.exp(logits[sel] - logits[sel].max())
                w /= w.sum()
                o[t] = (w[:, None] * v[src[sel]]).sum(axis=0)
        z = _sigmoid(h_t.data @ rp.gate_a.data + o @ rp.gate_b.data + rp.gate_bias.data)
        assert np.all(z > 0) and np.all(z < 1)


class TestAanAggregate:
    def test_symmetric_inputs_collapse(self, small_world):
        model = make_model(small_world)
        agg = model.layers[0].agg
        agg.unique["r2"].w.data[...] = agg.unique["r1"].w.data
        agg.unique["r2"].b.data[...] = agg.unique["r1"].b.data
        rng = np.random.default_rng(5)
        m = Tensor(rng.standard_normal((3, 8)))
        h, lu, lc = aan_aggregate(agg, m, m)
        c = m.data @ agg.common.w.data + agg.common.b.data
        u = m.data @ agg.unique["r1"].w.data + agg.unique["r1"].b.data
        assert np.allclose(h.data, 0.5 * (u + c), atol=1e-12)

    def test_uninformative_discriminator_gives_two_log_two(self, small_world):
        model = make_model(small_world)
        agg = model.layers[0].agg
        agg.disc.w.data[...] = 0
        agg.disc.b.data[...] = 0
        rng = np.random.default_rng(6)
        _, lu, lc = aan_aggregate(agg, Tensor(rng.standard_normal((4, 8))), Tensor(rng.standard_normal((4, 8))))
        assert lu.data == pytest.approx(2 * np.log(2), rel=1e-9)
        assert lc.data == pytest.approx(2 * np.log(2), rel=1e-9)

    def test_common_path_gradient_flips_with_lambda(self, small_world):
        model = make_model(small_world)
        agg = model.layers[0].agg
        rng = np.random.default_rng(7)
        m1 = Tensor(rng.standard_normal((4, 8)))
        m2 = Tensor(rng.standard_normal((4, 8)))

        def grad_c(lam):
            agg.common.w.zero_grad()
            with Tape() as tape:
                _, lu, lc = aan_aggregate(agg, m1, m2)
                loss = ad.add(lu, ad.mul(lc, lam))
            tape.backward(loss)
            return agg.common.w.grad.copy()

        g_pos = grad_c(0.5)
        g_neg = grad_c(-0.5)
        assert np.allclose(g_pos, -g_neg, atol=1e-12)
        assert np.abs(g_pos).max() > 0

    def test_lambda_zero_zeroes_common_gradient(self, small_world):
        model = make_model(small_world)
        agg = model.layers[0].agg
        rng = np.random.default_rng(8)
        m1 = Tensor(rng.standard_normal((4, 8)))
        m2 = Tensor(rng.standard_normal((4, 8)))
        agg.common.w.zero_grad()
        with Tape() as tape:
            _, lu, lc = aan_aggregate(agg, m1, m2)
            loss = ad.add(lu, ad.mul(lc, 0.0))
        tape.backward(loss)
        assert np.all(agg.common.w.grad == 0)


class TestForward:
    def seeds(self, graph):
        return {
            "video": np.arange(graph.n_videos, dtype=np.int64),
            "tag": np.arange(graph.n_tags, dtype=np.int64),
        }

    def test_eval_forward_deterministic(self, small_world):
        corpus, _, graph = small_world
        model = make_model(small_world)
        feats, embs = corpus_features(graph, corpus)
        sample = full_neighborhoods(graph, self.seeds(graph), layers=2)
        out1 = forward(model, sample, feats, embs)
        out2 = forward(model, sample, feats, embs)
        assert np.array_equal(out1.reps["video"].data, out2.reps["video"].data)
        assert np.array_equal(out1.reps["tag"].data, out2.reps["tag"].data)

    def test_full_equals_sampled_with_big_fanout(self, small_world):
        corpus, _, graph = small_world
        model = make_model(small_world)
        feats, embs = corpus_features(graph, corpus)
        full = full_neighborhoods(graph, self.seeds(graph), layers=2)
        sampled = sample_neighbors(graph, self.seeds(graph), fanout=10_000, layers=2, rng=np.random.default_rng(0))
        out_f = forward(model, full, feats, embs)
        out_s = forward(model, sampled, feats, embs)
        assert np.allclose(out_f.reps["tag"].data, out_s.reps["tag"].data, atol=1e-12)
        assert np.allclose(out_f.reps["video"].data, out_s.reps["video"].data, atol=1e-12)

    def test_no_influence_edges_means_residual_videos(self):
        world = toy_world(p_follow=0.0)
        corpus, _, graph = world
        model = make_model(world, layers=1)
        feats, embs = corpus_features(graph, corpus)
        sample = full_neighborhoods(graph, self.seeds(graph), layers=1)
        out = forward(model, sample, feats, embs)
        h0 = init_node_reps(model, feats, embs, np.arange(graph.n_tags))
        rp = model.layers[0].rel["r3"]
        expected = _gelu(h0["video"].data @ rp.res_p.data + rp.res_bias.data)
        assert np.allclose(out.reps["video"].data, expected, atol=1e-10)

    def test_adv_terms_per_layer(self, small_world):
        corpus, _, graph = small_world
        model = make_model(small_world, layers=2)
        feats, embs = corpus_features(graph, corpus)
        sample = full_neighborhoods(graph, self.seeds(graph), layers=2)
        out = forward(model, sample, feats, embs)
        assert len(out.adv_terms) == 2

    def test_train_mode_with_dropout_runs(self, small_world):
        corpus, _, graph = small_world
        model = make_model(small_world)
        feats, embs = corpus_features(graph, corpus)
        sample = full_neighborhoods(graph, self.seeds(graph), layers=2)
        rng = np.random.default_rng(0)
        out = forward(model, sample, feats, embs, train=True, rng=rng, feature_dropout=0.2)
        assert np.isfinite(out.reps["tag"].data).all()

    def test_layer_count_mismatch_rejected(self, small_world):
        corpus, _, graph = small_world
        model = make_model(small_world, layers=2)
        feats, embs = corpus_features(graph, corpus)
        sample = full_neighborhoods(graph, self.seeds(graph), layers=1)
        with pytest.raises(ValidationError):
            forward(model, sample, feats, embs)


class TestPredictAndLoss:
    def test_orthogonal_reps_score_half(self):
        v = Tensor(np.array([[1.0, 0.0]]))
        t = Tensor(np.array([[0.0, 1.0]]))
        assert predict_scores(v, t).data[0, 0] == pytest.approx(0.5)

    def test_aligned_unit_reps(self):
        v = Tensor(np.array([[1.0, 0.0]]))
        assert predict_scores(v, v).data[0, 0] == pytest.approx(_sigmoid(1.0), abs=1e-6)

    def test_scores_inside_unit_interval(self):
        rng = np.random.default_rng(9)
        s = predict_scores(Tensor(rng.standard_normal((5, 4)) * 2), Tensor(rng.standard_normal((6, 4)) * 2))
        assert np.all(s.data > 0) and np.all(s.data < 1)

    def test_frozen_discriminator_loss_value(self, small_world):
        # lambda = 0 and D == 0.5 everywhere: loss = BCE + layers * 2 log 2
        corpus, _, graph = small_world
        model = make_model(small_world, layers=2)
        for layer in model.layers:
            layer.agg.disc.w.data[...] = 0
            layer.agg.disc.b.data[...] = 0
        feats, embs = corpus_features(graph, corpus)
        seeds = TestForward().seeds(graph)
        sample = full_neighborhoods(graph, seeds, layers=2)
        out = forward(model, sample, feats, embs)
        scores = predict_scores(out.reps["video"], out.reps["tag"])
        y = np.zeros(scores.data.shape)
        loss = total_loss(scores, y, out.adv_terms, lam=0.0)
        bce = ad.bce_loss(scores, y)
        assert loss.data == pytest.approx(float(bce.data) + 2 * 2 * np.log(2), rel=1e-9)

    def test_no_adv_loss_is_exactly_bce(self, small_world):
        corpus, _, graph = small_world
        model = make_model(small_world, no_adv=True)
        feats, embs = corpus_features(graph, corpus)
        sample = full_neighborhoods(graph, TestForward().seeds(graph), layers=2)
        out = forward(model, sample, feats, embs)
        assert out.adv_terms == []
        scores = predict_scores(out.reps["video"], out.reps["tag"])
        y = (np.random.default_rng(0).random(scores.data.shape) > 0.5).astype(float)
        assert total_loss(scores, y, out.adv_terms, lam=0.3).data == ad.bce_loss(scores, y).data


class TestVariants:
    def test_concat_parameter_count(self, small_world):
        d = 8
        aan = make_model(small_world, aggregator="aan")
        concat = make_model(small_world, aggregator="concat")
        aan_extra = sum(
            p.data.size for n, p in aan.parameters().items() if ".agg." in n
        )
        concat_extra = sum(p.data.size for n, p in concat.parameters().items() if ".agg." in n)
        assert concat_extra == 2 * (2 * d * d + d)  # one 2d x d matrix + bias per layer
        assert aan_extra > concat_extra

    def test_attention_aggregator_runs(self, small_world):
        corpus, _, graph = small_world
        model = make_model(small_world, aggregator="attention")
        feats, embs = corpus_features(graph, corpus)
        sample = full_neighborhoods(graph, TestForward().seeds(graph), layers=2)
        out = forward(model, sample, feats, embs)
        assert out.adv_terms == []
        assert np.isfinite(out.reps["tag"].data).all()

    def test_conflicting_flags_rejected(self, small_world):
        with pytest.raises(ValidationError):
            make_model(small_world, aggregator="concat", no_adv=True)

    def test_plain_residual_variant(self, small_world):
        model = make_model(small_world, gated_residual=False)
        layer = model.layers[0]
        rng = np.random.default_rng(10)
        h_t = Tensor(rng.standard_normal((1, 8)))
        h_s = Tensor(rng.standard_normal((1, 8)))
        m = ggt_message(layer, "r3", h_t, h_s, np.array([0]), np.array([0]), gated=False)
        lin = lambda x, l: x @ l.w.data + l.b.data
        rp = layer.rel["r3"]
        o = lin(h_s.data, layer.v["video"]) @ rp.w_msg.data
        expected = o + _gelu(h_t.data @ rp.res_p.data + rp.res_bias.data)
        assert np.allclose(m.data, expected, atol=1e-12)

    def test_multihead_widths(self, small_world):
        corpus, _, graph = small_world
        model = make_model(small_world, heads=2)
        feats, embs = corpus_features(graph, corpus)
        sample = full_neighborhoods(graph, TestForward().seeds(graph), layers=2)
        out = forward(model, sample, feats, embs)
        assert out.reps["tag"].data.shape[1] == 8

    def test_mutual_attention_runs(self, small_world):
        corpus, _, graph = small_world
        model = make_model(small_world, mutual_attention=True)
        feats, embs = corpus_features(graph, corpus)
        sample = full_neighborhoods(graph, TestForward().seeds(graph), layers=2)
        out = forward(model, sample, feats, embs)
        assert np.isfinite(out.reps["tag"].data).all()


class TestEndToEndGradient:
    def test_total_loss_matches_finite_differences(self, small_world):
        # with the common-loss weight at zero the reversal path
        # contributes nothing to either value or gradient, so the whole
        # remaining network (task loss + unique loss) must agree with
        # central differences; the reversed path is checked below
        corpus, _, graph = small_world
        model = make_model(small_world, hidden=4)
        feats, embs = corpus_features(graph, corpus)
        seeds = TestForward().seeds(graph)
        sample = full_neighborhoods(graph, seeds, layers=2)
        rng = np.random.default_rng(11)
        y = (rng.random((graph.n_videos, graph.n_tags)) > 0.7).astype(np.float64)

        def loss_fn():
            out = forward(model, sample, feats, embs)
            scores = predict_scores(out.reps["video"], out.reps["tag"])
            return total_loss(scores, y, out.adv_terms, lam=0.0)

        report = finite_diff_check(loss_fn, model.parameters(), max_entries_per_tensor=3, rng=rng)
        assert report.max_rel_err <= 1e-4, report

    def test_reversed_path_magnitude_against_finite_differences(self, small_world):
        # the gradient the tape produces for the common projector through
        # the reversal layer must equal minus the true derivative of the
        # common loss, coordinate for coordinate
        model = make_model(small_world)
        agg = model.layers[0].agg
        rng = np.random.default_rng(13)
        m1 = Tensor(rng.standard_normal((5, 8)))
        m2 = Tensor(rng.standard_normal((5, 8)))

        def common_loss():
            _, _, lc = aan_aggregate(agg, m1, m2)
            return lc

        agg.common.w.zero_grad()
        with Tape() as tape:
            loss = common_loss()
        tape.backward(loss)
        analytic = agg.common.w.grad.copy()

        h = 1e-6
        flat = agg.common.w.data.reshape(-1)
        for i in rng.choice(flat.size, size=8, replace=False):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(common_loss().data)
            flat[i] = orig - h
            f_minus = float(common_loss().data)
            flat[i] = orig
            true_derivative = (f_plus - f_minus) / (2 * h)
            assert analytic.reshape(-1)[i] == pytest.approx(-true_derivative, rel=1e-4, abs=1e-9)


class TestInductiveInference:
    def test_matches_full_recompute(self, small_world):
        corpus, _, graph = small_world
        model = make_model(small_world)
        feats, embs = corpus_features(graph, corpus)
        caches = cache_representations(model, graph, feats, embs)

        from radar.corpus import VideoRecord

        rng = np.random.default_rng(12)
        record = VideoRecord(
            "new", corpus.videos[0].user_id, 10_000, frozenset(["t0"]), rng.standard_normal((1, 6)).astype(np.float32)
        )
        scores = inductive_infer(model, graph, record, caches)

        g2 = insert_video(graph, record)
        feats2 = np.vstack([feats, record.frame_features[0][None, :]])
        caches2 = cache_representations(model, g2, feats2, embs)
        h_new = caches2.video[model.n_layers][-1]
        expected = _sigmoid(caches2.tag[model.n_layers] @ h_new)
        assert np.allclose(scores, expected, atol=1e-9)

    def test_caches_untouched_by_inference(self, small_world):
        corpus, _, graph = small_world
        model = make_model(small_world)
        feats, embs = corpus_features(graph, corpus)
        caches = cache_representations(model, graph, feats, embs)
        before = [arr.copy() for arr in caches.video + caches.tag]

        from radar.corpus import VideoRecord

        record = VideoRecord("new", "u0", 9_999, frozenset(["t0"]), np.ones((1, 6), dtype=np.float32))
        inductive_infer(model, graph, record, caches)
        after = caches.video + caches.tag
        for b, a in zip(before, after):
            assert np.array_equal(b, a)

    def test_isolated_new_video_still_scored(self, small_world):
        corpus, _, graph = small_world
        model = make_model(small_world)
        feats, embs = corpus_features(graph, corpus)
        caches = cache_representations(model, graph, feats, embs)

        from radar.corpus import VideoRecord

        record = VideoRecord("new", "stranger", 10_000, frozenset(["t0"]), np.ones((1, 6), dtype=np.float32))
        scores = inductive_infer(model, graph, record, caches)
        assert scores.shape == (graph.n_tags,)
        assert np.all((scores > 0) & (scores < 1))


class TestCheckpointRoundtrip:
    def test_save_load_bit_identical(self, small_world, tmp_path):
        model = make_model(small_world, dtype=np.float32)
        save_model(model, tmp_path / "model")
        loaded = load_model(tmp_path / "model")
        p1 = model.parameters()
        p2 = loaded.parameters()
        assert p1.keys() == p2.keys()
        for name in p1:
            assert np.array_equal(p1[name].data, p2[name].data), name

    def test_cache_roundtrip(self, small_world, tmp_path):
        corpus, _, graph = small_world
        model = make_model(small_world)
        feats, embs = corpus_features(graph, corpus)
        caches = cache_representations(model, graph, feats, embs)
        save_caches(caches, tmp_path / "caches")
        loaded = load_caches(tmp_path / "caches")
        for a, b in zip(caches.video + caches.tag, loaded.video + loaded.tag):
            assert np.array_equal(a, b)
