"""Tests for graph reasoning and the classifier (hgfx/services/graph_reason.py)."""

import numpy as np
import pytest

from hgfx.config import ABLATION_PRESETS
from hgfx.errors import ShapeError
from hgfx.services.gradcheck import check_gradients
from hgfx.services.graph_reason import (
    HeteroGraphNet,
    ReasonBlockParams,
    aggregate,
    forward,
    image_adjacency,
    image_scan_plan,
    reason_block,
)
from hgfx.services.hetero_graph import Adjacency, HeteroGraph
from hgfx.services.patch_embed import ImageSample
from hgfx.services.verification import check_end_to_end_gradients
from hgfx.tensor import Tensor, cross_entropy

from tests.conftest import random_pixels, tiny_config


def graph_of(V_v, V_s, idx, H=None) -> HeteroGraph:
    idx = np.asarray(idx)
    return HeteroGraph(Tensor(V_v), Tensor(V_s), Adjacency(idx.shape[-1], 1, idx), None if H is None else Tensor(H))


class TestAggregate:
    def test_identical_nodes_give_zero_difference(self, rng):
        x = rng.normal(size=(3, 4))
        out = aggregate(graph_of(x, x, [[0], [1], [2]])).data
        np.testing.assert_array_equal(out[:, :4], x)
        np.testing.assert_array_equal(out[:, 4:], 0.0)

    def test_single_neighbour_is_plain_difference(self, rng):
        V_v, V_s = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
        out = aggregate(graph_of(V_v, V_s, [[2], [0], [1]])).data
        np.testing.assert_allclose(out[:, 2:], V_s[[2, 0, 1]] - V_v)

    def test_matches_loop(self, rng):
        V_v, V_s = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        idx = np.array([[1, 2], [0, 3], [3, 1], [2, 0]])
        out = aggregate(graph_of(V_v, V_s, idx)).data
        for i in range(4):
            expected = np.max([V_s[j] - V_v[i] for j in idx[i]], axis=0)
            np.testing.assert_allclose(out[i, 3:], expected)

    def test_correlation_weights(self, rng):
        V_v, V_s = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
        idx = np.array([[1, 2], [0, 2], [0, 1]])
        H = rng.uniform(0.1, 1.0, size=(3, 3))
        out = aggregate(graph_of(V_v, V_s, idx, H)).data
        for i in range(3):
            w = H[i, idx[i]] / H[i, idx[i]].sum() * 2
            expected = np.max([w[n] * (V_s[j] - V_v[i]) for n, j in enumerate(idx[i])], axis=0)
            np.testing.assert_allclose(out[i, 2:], expected, rtol=1e-12)

    def test_softmax_correlation_matches_loop(self, rng):
        V_v, V_s = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        logits = rng.normal(size=(5, 5))
        H = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        idx = np.array([rng.permutation(5)[:3] for _ in range(5)])
        out = aggregate(graph_of(V_v, V_s, idx, H)).data
        for i in range(5):
            total = sum(H[i, j] for j in idx[i])
            for d in range(3):
                expected = max(3 * H[i, j] / total * (V_s[j, d] - V_v[i, d]) for j in idx[i])
                assert out[i, 3 + d] == pytest.approx(expected, rel=1e-12, abs=1e-15)

    def test_uniform_correlation_is_plain(self, rng):
        V_v, V_s = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
        idx = [[1, 2], [0, 2], [0, 1]]
        plain = aggregate(graph_of(V_v, V_s, idx)).data
        weighted = aggregate(graph_of(V_v, V_s, idx, np.full((3, 3), 1 / 3))).data
        np.testing.assert_allclose(weighted, plain, rtol=1e-12)

    def test_adjacency_must_cover_centers(self, rng):
        with pytest.raises(ShapeError):
            aggregate(graph_of(rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), [[0], [1]]))


class TestReasonBlock:
    def test_zero_updates_are_identity(self, rng):
        cfg = tiny_config()
        params = ReasonBlockParams(cfg.dim, cfg.mapped_dim, rng)
        for layer in (params.W_update, params.ffn.fc2):
            layer.weight.data[:] = 0.0
            layer.bias.data[:] = 0.0
        x = rng.normal(size=(4, cfg.dim))
        graph = graph_of(x, x, [[1, 2], [0, 3], [3, 1], [2, 0]])
        np.testing.assert_array_equal(reason_block(Tensor(x), graph, params, cfg).data, x)

    def test_shape_mismatch(self, rng):
        cfg = tiny_config()
        params = ReasonBlockParams(cfg.dim, cfg.mapped_dim, rng)
        x = rng.normal(size=(4, cfg.dim))
        with pytest.raises(ShapeError):
            reason_block(Tensor(x[:3]), graph_of(x, x, [[0], [1], [2], [3]]), params, cfg)


class TestHeteroGraphNet:
    def test_logits_shape_and_determinism(self, tiny_model, rng):
        pixels = random_pixels(rng, batch=3)
        first = tiny_model(pixels).data
        assert first.shape == (3, 2)
        assert np.all(np.isfinite(first))
        np.testing.assert_array_equal(tiny_model(pixels).data, first)

    def test_same_seed_same_model(self, rng):
        pixels = random_pixels(rng)
        a = HeteroGraphNet(tiny_config(), seed=9)(pixels).data
        b = HeteroGraphNet(tiny_config(), seed=9)(pixels).data
        np.testing.assert_array_equal(a, b)

    def test_single_class_has_zero_loss(self, rng):
        model = HeteroGraphNet(tiny_config(classes=1), seed=1)
        loss = cross_entropy(model(random_pixels(rng)), [0, 0])
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_rejects_unbatched_pixels(self, tiny_model, rng):
        with pytest.raises(ShapeError):
            tiny_model(random_pixels(rng)[0])

    def test_forward_single_image(self, tiny_model, rng):
        img = ImageSample(random_pixels(rng, batch=1)[0])
        logits = forward(img, tiny_model)
        assert logits.shape == (2,)
        np.testing.assert_allclose(logits.data, tiny_model(img.pixels[None]).data[0])

    def test_stability(self, tiny_model):
        assert 0.0 < tiny_model.check_stability() < 1.0

    @pytest.mark.parametrize("preset", list(ABLATION_PRESETS))
    def test_every_ablation_runs(self, preset, rng):
        model = HeteroGraphNet(tiny_config().with_ablation(preset), seed=2)
        assert model.cfg.ablation == preset
        assert np.all(np.isfinite(model(random_pixels(rng)).data))

    def test_active_parameters_follow_ablation(self):
        base = dict(HeteroGraphNet(tiny_config().with_ablation("base")).active_named_parameters())
        full = dict(HeteroGraphNet(tiny_config().with_ablation("full")).active_named_parameters())
        assert not any(n.startswith(("ssm.", "sem_norm.")) or ".mapping." in n for n in base)
        assert "ssm.A_log" in full and "blocks.0.mapping.W_G" in full

    def test_inactive_parameters_get_no_gradient(self, rng):
        model = HeteroGraphNet(tiny_config().with_ablation("hg+scan"), seed=4)
        pixels = random_pixels(rng)
        errors = check_gradients(
            lambda: cross_entropy(model(pixels), [0, 1]),
            [("blocks.0.mapping.W_G", model.blocks[0].mapping.W_G)],
            samples=3,
        )
        assert model.blocks[0].mapping.W_G.grad is None
        assert errors["blocks.0.mapping.W_G"] == 0.0

    def test_end_to_end_gradients(self):
        passed, detail = check_end_to_end_gradients(np.random.default_rng(13))
        assert passed, detail


class TestInspection:
    def test_scan_plan_is_permutation(self, tiny_model, rng):
        plan = image_scan_plan(ImageSample(random_pixels(rng, batch=1)[0]), tiny_model)
        assert sorted(plan.order.tolist()) == [0, 1, 2, 3]
        assert len(plan.tree_edges) == 3

    def test_raster_scan_plan_keeps_its_path(self, rng):
        model = HeteroGraphNet(tiny_config().with_ablation("hg"), seed=5)
        plan = image_scan_plan(ImageSample(random_pixels(rng, batch=1)[0]), model)
        assert plan.order.tolist() == [0, 1, 2, 3]
        assert plan.tree_edges == ((0, 1), (1, 2), (2, 3))

    def test_scan_plan_for_visual_only_model(self, rng):
        model = HeteroGraphNet(tiny_config().with_ablation("base"), seed=5)
        plan = image_scan_plan(ImageSample(random_pixels(rng, batch=1)[0]), model)
        assert len(plan.tree_edges) == 3

    def test_adjacency_per_block(self, tiny_model, rng):
        img = ImageSample(random_pixels(rng, batch=1)[0])
        adj = image_adjacency(img, tiny_model, block=1)
        assert adj.idx.shape == (4, 2)
        assert adj.to_export()["k"] == 2

    def test_adjacency_block_out_of_range(self, tiny_model, rng):
        with pytest.raises(ShapeError):
            image_adjacency(ImageSample(random_pixels(rng, batch=1)[0]), tiny_model, block=2)
