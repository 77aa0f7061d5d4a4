"""Tests for the adaptive scan (hgfx/services/adaptive_scan.py)."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hgfx.errors import NumericError, StructureError
from hgfx.services.adaptive_scan import (
    DEFAULT_EPS,
    ScanPlan,
    SimilarityGraph,
    apply_order,
    consecutive_similarity,
    invert_order,
    local_window_order,
    max_spanning_tree,
    paint_scan_order,
    pairwise_similarity,
    plan_batch,
    plan_scan,
    raster_order,
    raster_plan,
    scan_order,
)
from hgfx.services.patch_embed import NodeSet
from hgfx.services.verification import (
    check_consecutive_similarity,
    check_mst_enumeration,
    check_scan_equivariance,
    clustered_nodes,
    region_image,
)
from hgfx.tensor import GradTape, Tensor, sum


def nodes_of(x: np.ndarray) -> NodeSet:
    return NodeSet(Tensor(x), np.zeros((x.shape[-2], 2), dtype=int))


def triangle(w01, w02, w12) -> SimilarityGraph:
    return SimilarityGraph(np.array([[0, w01, w02], [w01, 0, w12], [w02, w12, 0]], dtype=float))


class TestPairwiseSimilarity:
    def test_reciprocal_distance(self):
        g = pairwise_similarity(np.array([[0.0, 0.0], [0.0, 2.0]]))
        assert g.weights[0, 1] == pytest.approx(0.5)

    def test_duplicate_nodes_are_clamped(self):
        g = pairwise_similarity(np.ones((2, 3)))
        assert g.weights[0, 1] == pytest.approx(1.0 / DEFAULT_EPS)
        assert np.all(np.isfinite(g.weights))

    def test_matches_pair_loop(self, rng):
        x = rng.normal(size=(5, 3))
        g = pairwise_similarity(x)
        for i in range(5):
            for j in range(5):
                if i != j:
                    assert g.weights[i, j] == pytest.approx(1.0 / np.linalg.norm(x[i] - x[j]), rel=1e-12)
        np.testing.assert_array_equal(g.weights, g.weights.T)

    def test_non_finite(self):
        with pytest.raises(NumericError):
            pairwise_similarity(np.array([[0.0, np.nan], [1.0, 1.0]]))


class TestMaxSpanningTree:
    def test_single_node(self):
        assert max_spanning_tree(SimilarityGraph(np.zeros((1, 1)))) == ()

    def test_zero_nodes(self):
        with pytest.raises(StructureError):
            max_spanning_tree(SimilarityGraph(np.zeros((0, 0))))

    def test_triangle(self):
        assert set(max_spanning_tree(triangle(3.0, 2.0, 1.0))) == {(0, 1), (0, 2)}

    def test_ties_prefer_smallest_pair(self):
        assert max_spanning_tree(triangle(1.0, 1.0, 1.0)) == ((0, 1), (0, 2))

    def test_matches_enumeration(self):
        passed, detail = check_mst_enumeration(np.random.default_rng(5), trials=60)
        assert passed, detail


class TestScanOrder:
    def test_chain(self):
        g = triangle(1.0, 0.1, 1.0)
        assert scan_order([(0, 1), (1, 2)], g).tolist() == [0, 1, 2]

    def test_heavier_child_first(self):
        g = triangle(1.0, 5.0, 0.1)
        assert scan_order([(0, 1), (0, 2)], g).tolist() == [0, 2, 1]

    def test_disconnected(self):
        g = SimilarityGraph(np.ones((4, 4)))
        with pytest.raises(StructureError):
            scan_order([(0, 1), (0, 1), (2, 3)], g)

    def test_wrong_edge_count(self):
        with pytest.raises(StructureError):
            scan_order([(0, 1)], triangle(1.0, 1.0, 1.0))

    def test_plan_is_permutation(self, rng):
        plan = plan_scan(rng.normal(size=(12, 4)))
        assert sorted(plan.order.tolist()) == list(range(12))
        assert len(plan.tree_edges) == 11
        assert plan.order[0] == 0

    def test_equivariance(self):
        passed, detail = check_scan_equivariance(np.random.default_rng(2), trials=20)
        assert passed, detail

    def test_batch_threads_agree(self, rng):
        feats = rng.normal(size=(4, 9, 3))
        serial = plan_batch(feats)
        threaded = plan_batch(feats, threads=3)
        assert [p.order.tolist() for p in serial] == [p.order.tolist() for p in threaded]

    def test_export(self):
        plan = ScanPlan(((0, 1),), np.array([0, 1]))
        assert plan.to_export() == {"order": [0, 1], "tree_edges": [[0, 1]]}


class TestBaselines:
    def test_raster(self):
        assert raster_order(4).tolist() == [0, 1, 2, 3]

    def test_raster_plan_is_a_path(self):
        plan = raster_plan(4)
        assert plan.tree_edges == ((0, 1), (1, 2), (2, 3))
        g = SimilarityGraph(np.ones((4, 4)))
        np.testing.assert_array_equal(scan_order(plan.tree_edges, g), plan.order)

    def test_raster_plan_single_node(self):
        assert raster_plan(1).to_export() == {"order": [0], "tree_edges": []}
        with pytest.raises(StructureError):
            raster_plan(0)

    def test_local_window(self):
        assert local_window_order(4, 4, 2).tolist() == [0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15]

    def test_consecutive_similarity(self):
        g = triangle(2.0, 4.0, 6.0)
        assert consecutive_similarity(g, [0, 1, 2]) == pytest.approx(4.0)
        assert consecutive_similarity(g, [1]) == 0.0

    def test_adaptive_beats_baselines_on_region_images(self):
        passed, detail = check_consecutive_similarity(np.random.default_rng(11))
        assert passed, detail
        assert "raster" in detail and "local-window" in detail

    def test_region_image_patches_are_flat(self):
        pixels = region_image(np.random.default_rng(4), size=16, patch_size=4, noise=0.0)
        assert pixels.shape == (16, 16, 3)
        patches = pixels.reshape(4, 4, 4, 4, 3).swapaxes(1, 2).reshape(16, 16, 3)
        np.testing.assert_array_equal(patches, patches[:, :1, :].repeat(16, axis=1))
        assert len({tuple(p[0]) for p in patches}) <= 4

    def test_region_image_nodes(self):
        x = clustered_nodes(np.random.default_rng(5), size=16, patch_size=4, dim=6)
        assert x.shape == (16, 6) and np.all(np.isfinite(x))

    def test_painting(self):
        gray = paint_scan_order([0, 3, 1, 2], 2, 2, 2)
        assert gray.shape == (4, 4)
        assert gray[0, 0] == 0.0
        assert gray[0, 2] == pytest.approx(2 / 3)
        assert gray[3, 3] == pytest.approx(1 / 3)


class TestApplyOrder:
    def test_identity(self, rng):
        x = rng.normal(size=(5, 3))
        np.testing.assert_array_equal(apply_order(nodes_of(x), raster_order(5)).features.data, x)

    def test_round_trip(self, rng):
        x = rng.normal(size=(3, 2))
        order = np.array([2, 0, 1])
        ordered = apply_order(nodes_of(x), order)
        np.testing.assert_array_equal(ordered.features.data, x[order])
        np.testing.assert_array_equal(invert_order(ordered, order).features.data, x)

    def test_batched_orders(self, rng):
        x = rng.normal(size=(2, 4, 3))
        orders = np.array([[3, 2, 1, 0], [0, 2, 1, 3]])
        out = apply_order(nodes_of(x), orders).features.data
        np.testing.assert_array_equal(out[0], x[0][orders[0]])
        np.testing.assert_array_equal(out[1], x[1][orders[1]])

    def test_not_a_permutation(self, rng):
        with pytest.raises(StructureError):
            apply_order(nodes_of(rng.normal(size=(3, 2))), [0, 0, 1])

    def test_gradient_is_permuted(self, rng):
        x = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        weights = rng.normal(size=(4, 2))
        order = np.array([1, 3, 0, 2])
        with GradTape() as tape:
            loss = sum(apply_order(NodeSet(x, np.zeros((4, 2))), order).features * Tensor(weights))
        tape.backward(loss)
        expected = np.empty_like(weights)
        expected[order] = weights
        np.testing.assert_allclose(x.grad, expected)

    @settings(max_examples=50, deadline=None)
    @given(st.permutations(list(range(7))))
    def test_round_trip_property(self, perm):
        x = np.arange(14.0).reshape(7, 2)
        order = np.array(perm)
        back = invert_order(apply_order(nodes_of(x), order), order)
        np.testing.assert_array_equal(back.features.data, x)
