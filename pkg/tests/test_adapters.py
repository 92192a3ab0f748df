import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saml import numerics as nx
from saml.adapters import (COLLAPSED, HEALTHY, IMBALANCED, LoraModule, PruneReport, Router, RoutingStats, SamlLayer,
                           collapse_prune_removed, collect_routing_stats, detect_collapse, init_experts_from_loras,
                           lora_forward, prune_layer, route, saml_forward, saml_forward_reference)
from saml.errors import ConfigError, PruneError, ShapeError
from saml.numerics import Parameter, SeededRng, Tensor, finite_difference_check
from saml.quantization import dequantize_array, quantize_blockwise

from conftest import random_saml_layer


def softmax64(z):
    z = np.asarray(z, np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class TestLora:
    def test_zero_b_is_base(self):
        rng = SeededRng(0)
        m = LoraModule.init(4, 3, 2, None, rng)
        W0, x = rng.normal((4, 3)), rng.normal(3)
        np.testing.assert_array_equal(lora_forward(m, Tensor(W0), Tensor(x)).data, nx.matmul(Tensor(W0), Tensor(x[:, None])).data[:, 0])

    def test_full_rank_identity(self):
        rng = SeededRng(1)
        M = rng.normal((3, 3))
        m = LoraModule(np.eye(3, dtype=np.float32), M, alpha=3)
        W0, x = rng.normal((3, 3)), rng.normal(3)
        ref = (W0.astype(np.float64) + M) @ x
        np.testing.assert_allclose(lora_forward(m, W0, x).data, ref, atol=1e-5)

    def test_dense_oracle(self):
        rng = SeededRng(2)
        m = LoraModule(rng.normal((2, 5)), rng.normal((4, 2)), alpha=3.0)
        W0, x = rng.normal((4, 5)), rng.normal(5)
        dense = (3.0 / 2) * m.B.data.astype(np.float64) @ m.A.data
        ref = (W0.astype(np.float64) + dense) @ x
        assert np.max(np.abs(lora_forward(m, W0, x).data - ref)) <= 1e-6 * max(1, np.abs(ref).max())

    def test_rank_bound(self):
        with pytest.raises(ShapeError):
            LoraModule(np.zeros((4, 3)), np.zeros((5, 4)))

    def test_shape_mismatch(self):
        m = LoraModule(np.zeros((2, 3)), np.zeros((4, 2)))
        with pytest.raises(ShapeError):
            lora_forward(m, np.zeros((4, 3)), np.zeros(5))


class TestRoute:
    def test_zero_router_uniform(self):
        g = route(Router(np.zeros((5, 3))), Tensor(np.ones(3))).data
        np.testing.assert_allclose(g, np.full(5, 0.2), atol=1e-7)

    def test_saturation(self):
        W = np.zeros((3, 2))
        W[1, 0] = 1e3
        g = route(Router(W), Tensor([1.0, 0.0])).data
        assert g[1] == pytest.approx(1.0, abs=1e-6)

    def test_extended_precision_oracle(self):
        rng = SeededRng(3)
        W, x = rng.normal((3, 4)), rng.normal(4)
        logits = [math.fsum(float(a) * float(b) for a, b in zip(row, x)) for row in W]
        e = [math.exp(v) for v in logits]
        ref = [v / math.fsum(e) for v in e]
        np.testing.assert_allclose(route(Router(W), Tensor(x)).data, ref, atol=1e-6)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 10))
    def test_simplex(self, seed, n):
        rng = SeededRng(seed)
        g = route(Router(rng.normal((n, 6), std=3.0)), Tensor(rng.normal(6, std=3.0))).data
        assert np.all(g >= 0) and abs(g.sum() - 1) <= 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            route(Router(np.zeros((3, 4))), Tensor(np.zeros(5)))


class TestSamlForward:
    @pytest.mark.parametrize("n", [2, 4, 10])
    def test_matches_double_sum_reference(self, n):
        for seed in range(10):
            layer = random_saml_layer(seed, n)
            x = SeededRng(100 + seed).normal((7, 5))
            assert np.max(np.abs(saml_forward(layer, x).data - saml_forward_reference(layer, x))) <= 1e-5

    def test_single_token_vector(self):
        layer = random_saml_layer(0, 3)
        x = SeededRng(1).normal(5)
        out = saml_forward(layer, x)
        assert out.shape == (6,)
        np.testing.assert_allclose(out.data, saml_forward_reference(layer, x), atol=1e-5)

    def test_single_expert_is_lora(self):
        layer = random_saml_layer(4, 1)
        x = SeededRng(5).normal((3, 5))
        lora = lora_forward(layer.experts[0], layer.base_weight(), x).data + layer.bias.data
        np.testing.assert_allclose(saml_forward(layer, x).data, lora, atol=1e-6)
        assert layer.router is None

    def test_identical_experts_ignore_gates(self):
        layer = random_saml_layer(6, 4)
        for e in layer.experts[1:]:
            e.A.data, e.B.data = layer.experts[0].A.data.copy(), layer.experts[0].B.data.copy()
        x = SeededRng(7).normal((5, 5))
        lora = lora_forward(layer.experts[0], layer.base_weight(), x).data + layer.bias.data
        np.testing.assert_allclose(saml_forward(layer, x).data, lora, atol=1e-4)

    def test_differs_from_per_expert_mixture(self):
        # sum_i g_i B_i A_i x is a different function; find a case where they disagree.
        for seed in range(20):
            layer = random_saml_layer(seed, 2)
            x = SeededRng(seed).normal(5)
            g = softmax64(layer.router.W_g.data @ x)
            per_expert = layer.base_weight().data @ x + layer.bias.data + layer.scaling * sum(
                gi * e.B.data.astype(np.float64) @ (e.A.data @ x) for gi, e in zip(g, layer.experts))
            if np.max(np.abs(per_expert - saml_forward_reference(layer, x))) > 1e-3:
                return
        pytest.fail("no counterexample found")

    def test_quantized_base_is_dequantised(self):
        layer = random_saml_layer(8, 3)
        q = quantize_blockwise(layer.base_weight().data, 8)
        qlayer = SamlLayer(q, layer.experts, layer.router, bias=layer.bias, name="q")
        x = SeededRng(9).normal((4, 5))
        ref = layer.copy()
        ref.set_base(Parameter(dequantize_array(q), trainable=False))
        np.testing.assert_allclose(saml_forward(qlayer, x).data, saml_forward(ref, x).data, atol=1e-6)

    def test_mode_and_shape_errors(self):
        layer = random_saml_layer(0, 3)
        with pytest.raises(ShapeError):
            saml_forward(layer, np.zeros(4))
        pruned, _ = prune_layer(layer, "collapse_prune", collect_routing_stats(layer, np.ones((2, 5))))
        with pytest.raises(PruneError):
            saml_forward(pruned, np.zeros(5))

    def test_gradients_match_finite_differences(self):
        for seed in range(5):
            layer = random_saml_layer(seed, 3, d=4, k=3)
            x = Tensor(SeededRng(seed + 50).normal((4, 3)))
            w = Tensor(SeededRng(seed + 60).normal((4, 4)))
            params = layer.trainable_parameters()
            err = finite_difference_check(lambda: nx.sum(nx.mul(saml_forward(layer, x), w)), params)
            assert max(err) <= 1e-3

    def test_base_gets_no_gradient(self):
        layer = random_saml_layer(1, 3)
        nx.backward(nx.sum(saml_forward(layer, SeededRng(2).normal((3, 5)))))
        assert not layer.base.trainable
        assert np.all(layer.base.grad == 0)
        assert all(np.any(p.grad != 0) for p in layer.trainable_parameters())

    def test_experts_must_share_shapes(self):
        a = LoraModule(np.zeros((2, 5)), np.zeros((6, 2)))
        b = LoraModule(np.zeros((1, 5)), np.zeros((6, 1)))
        with pytest.raises(ShapeError):
            SamlLayer(np.zeros((6, 5)), [a, b], Router(np.zeros((2, 5))))

    def test_zero_b_init_is_zero_delta(self):
        layer = SamlLayer.init(SeededRng(0).normal((6, 5)), 4, 2, None, SeededRng(1))
        x = SeededRng(2).normal((3, 5))
        np.testing.assert_array_equal(layer.forward(Tensor(x)).data, layer.forward(Tensor(x), adapters=False).data)


class TestRoutingStats:
    def _point_mass(self, n=4, dominant=2, k=5):
        W = np.zeros((n, k), np.float32)
        W[dominant, 0] = 1e4
        layer = random_saml_layer(0, n, k=k)
        layer.router = Router(W)
        X = np.abs(SeededRng(1).normal((50, k))) + 0.5  # positive first feature
        return layer, X

    def test_constructed_collapse(self):
        layer, X = self._point_mass()
        s = collect_routing_stats(layer, X)
        assert s.dominant_expert == 2
        assert s.top1_fraction == 1.0
        assert s.mean_entropy == pytest.approx(0.0, abs=1e-9)

    def test_zero_router_uniform(self):
        layer = random_saml_layer(0, 5)
        layer.router = Router(np.zeros((5, 5)))
        s = collect_routing_stats(layer, SeededRng(0).normal((10, 5)))
        np.testing.assert_allclose(s.mean_gates, 0.2, atol=1e-7)
        assert s.mean_entropy == pytest.approx(math.log(5), abs=1e-6)

    def test_recomputation_oracle(self):
        layer = random_saml_layer(3, 4)
        X = SeededRng(4).normal((100, 5))
        s = collect_routing_stats(layer, X)
        G = softmax64(X.astype(np.float64) @ layer.router.W_g.data.astype(np.float64).T)
        mean = G.mean(axis=0)
        dom = int(np.argmax(mean))
        np.testing.assert_allclose(s.mean_gates, mean, atol=1e-6)
        assert s.dominant_expert == dom
        assert s.top1_fraction == pytest.approx(np.mean(G.argmax(axis=1) == dom))
        assert s.mean_entropy == pytest.approx(float(np.mean(-(G * np.log(G)).sum(axis=1))), abs=1e-5)
        assert abs(s.mean_gates.sum() - 1) <= 1e-5
        assert 0 <= s.top1_fraction <= 1

    def test_empty_calibration(self):
        with pytest.raises(ValueError):
            collect_routing_stats(random_saml_layer(0, 3), np.zeros((0, 5)))

    def test_summary_roundtrip(self):
        s = collect_routing_stats(random_saml_layer(0, 3), SeededRng(0).normal((8, 5)))
        back = RoutingStats.from_summary(s.summary())
        np.testing.assert_array_equal(back.mean_gates, s.mean_gates)
        assert back.summary() == s.summary()


def stats_with(gate: float, n: int) -> RoutingStats:
    rest = (1 - gate) / (n - 1)
    mean = np.full(n, rest)
    mean[0] = gate
    return RoutingStats(mean, 0.0, 1.0, 0, 10)


class TestDetectCollapse:
    def test_collapsed(self):
        assert detect_collapse(stats_with(0.995, 4)) == COLLAPSED

    def test_imbalanced(self):
        assert detect_collapse(stats_with(0.93, 4)) == IMBALANCED

    def test_healthy(self):
        s = RoutingStats(np.full(10, 0.1), math.log(10), 0.1, 0, 10)
        assert detect_collapse(s) == HEALTHY

    @pytest.mark.parametrize("bad", [0.0, -0.1, 1.5])
    def test_threshold_range(self, bad):
        with pytest.raises(ConfigError):
            detect_collapse(stats_with(0.5, 2), collapse_threshold=bad)
        with pytest.raises(ConfigError):
            detect_collapse(stats_with(0.5, 2), imbalance_threshold=bad)


def collapsed_layer(seed: int, n: int = 4, dominant: int = 1, k: int = 5) -> tuple[SamlLayer, np.ndarray]:
    """Layer whose router puts >= 1 - 1e-9 of the gate on ``dominant`` for positive inputs."""
    layer = random_saml_layer(seed, n, k=k)
    W = np.zeros((n, k), np.float32)
    W[dominant, :] = 30.0
    layer.router = Router(W)
    X = np.abs(SeededRng(seed + 1).normal((40, k))) + 0.2
    return layer, X


class TestPrune:
    def test_collapse_prune_is_lossless(self):
        layer, X = collapsed_layer(0)
        s = collect_routing_stats(layer, X)
        assert s.mean_gates[1] >= 1 - 1e-9
        pruned, rep = prune_layer(layer, "collapse_prune", s)
        assert pruned.mode == "collapsed_single_lora" and pruned.router is None and pruned.n == 1
        diff = np.abs(pruned.forward(Tensor(X)).data - layer.forward(Tensor(X)).data).max()
        assert diff <= 1e-5

    def test_top1_with_router_on_collapsed_layer(self):
        layer, X = collapsed_layer(1)
        pruned, _ = prune_layer(layer, "top1_with_router", collect_routing_stats(layer, X))
        assert pruned.router is not None and pruned.router.n == 4
        diff = np.abs(pruned.forward(Tensor(X)).data - layer.forward(Tensor(X)).data).max()
        assert diff <= 1e-5

    def test_top1_with_router_scales_by_squared_gate(self):
        layer = random_saml_layer(2, 3)
        X = SeededRng(3).normal((6, 5))
        s = collect_routing_stats(layer, X)
        pruned, _ = prune_layer(layer, "top1_with_router", s)
        d = s.dominant_expert
        g = softmax64(X.astype(np.float64) @ layer.router.W_g.data.astype(np.float64).T)[:, d]
        e = layer.experts[d]
        delta = (X.astype(np.float64) @ e.A.data.T) @ e.B.data.T * layer.scaling
        ref = X @ layer.base_weight().data.T.astype(np.float64) + layer.bias.data + (g**2)[:, None] * delta
        np.testing.assert_allclose(pruned.forward(Tensor(X)).data, ref, atol=1e-4)

    def test_top1_no_router_breaks_healthy_layer(self):
        layer = random_saml_layer(4, 4)
        X = SeededRng(5).normal((30, 5))
        s = collect_routing_stats(layer, X)
        assert detect_collapse(s) == HEALTHY
        pruned, _ = prune_layer(layer, "top1_no_router", s)
        assert np.abs(pruned.forward(Tensor(X)).data - layer.forward(Tensor(X)).data).max() > 1e-2

    @pytest.mark.parametrize("n, d, k, r", [(4, 6, 5, 2), (10, 64, 64, 2), (2, 8, 3, 1)])
    def test_params_removed_formula(self, n, d, k, r):
        layer = random_saml_layer(0, n, d=d, k=k, r=r)
        s = collect_routing_stats(layer, SeededRng(1).normal((4, k)))
        before = layer.num_adapter_params()
        pruned, rep = prune_layer(layer, "collapse_prune", s)
        assert rep.params_removed == before - pruned.num_adapter_params()
        assert rep.params_removed == (n - 1) * (r * k + d * r) + n * k == collapse_prune_removed(n, d, k, r)

    def test_already_pruned(self):
        layer, X = collapsed_layer(0)
        s = collect_routing_stats(layer, X)
        pruned, _ = prune_layer(layer, "collapse_prune", s)
        with pytest.raises(PruneError):
            prune_layer(pruned, "collapse_prune", s)

    def test_unknown_mode(self):
        layer, X = collapsed_layer(0)
        with pytest.raises(ConfigError):
            prune_layer(layer, "drop_all", collect_routing_stats(layer, X))

    def test_report_merge(self):
        a = PruneReport(["x"], [], 5, {"x": "collapse_prune"})
        a.merge(PruneReport([], ["y"], 7, {"y": "top1_no_router"}))
        assert a.as_dict() == {"layers_collapsed": ["x"], "layers_imbalanced": ["y"], "params_removed": 12,
                               "modes": {"x": "collapse_prune", "y": "top1_no_router"}}


class TestDonorInit:
    def test_zero_b_donors_give_zero_delta(self):
        donors = [LoraModule.init(6, 5, 2, None, SeededRng(i)) for i in range(3)]
        layer = SamlLayer.init(SeededRng(0).normal((6, 5)), 3, 2, None, SeededRng(1), donors=donors)
        x = Tensor(SeededRng(2).normal((4, 5)))
        np.testing.assert_array_equal(layer.delta(x).data, np.zeros((4, 6)))

    def test_deep_copy(self):
        donors = [LoraModule(SeededRng(i).normal((2, 5)), SeededRng(i + 9).normal((6, 2))) for i in range(2)]
        before = [d.A.data.copy() for d in donors]
        experts = init_experts_from_loras(donors)
        experts[0].A.data += 1.0
        experts[1].A.data[...] = 0
        for d, b in zip(donors, before):
            np.testing.assert_array_equal(d.A.data, b)

    def test_incompatible_donors(self):
        with pytest.raises(ShapeError):
            init_experts_from_loras([LoraModule(np.zeros((2, 5)), np.zeros((6, 2))),
                                     LoraModule(np.zeros((2, 4)), np.zeros((6, 2)))])
