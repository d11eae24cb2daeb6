import itertools

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from almlab.connector import (
    Connector,
    ConnectorConfig,
    Projector,
    aggregate_layers,
    pool,
    project,
    projector_param_count,
    select_layers,
    stack,
)
from almlab.encoder import LayerFeatures
from almlab.errors import ConfigError, ShapeError


class TestPool:
    def test_adjacent_means(self):
        out = pool(torch.tensor([[1.0], [2.0], [3.0], [4.0]]), 2)
        assert torch.equal(out, torch.tensor([[1.5], [3.5]]))

    def test_1500_to_750(self):
        assert pool(torch.randn(1500, 4), 2).shape == (750, 4)

    def test_remainder_averages_real_members(self):
        x = torch.arange(5, dtype=torch.float32)[:, None]
        out = pool(x, 2)
        assert out.shape == (3, 1)
        assert float(out[-1, 0]) == 4.0

    def test_k1_identity(self):
        x = torch.randn(7, 3)
        assert torch.equal(pool(x, 1), x)

    def test_empty_rejected(self):
        with pytest.raises(ShapeError):
            pool(torch.zeros(0, 3), 2)

    def test_batched(self):
        x = torch.randn(2, 5, 3)
        out = pool(x, 2)
        assert torch.allclose(out[1], pool(x[1], 2))


class TestStack:
    def test_layout(self):
        x = torch.arange(8, dtype=torch.float32).reshape(4, 2)
        out = stack(x, 2)
        assert out.shape == (2, 4)
        assert torch.equal(out[0], torch.cat([x[0], x[1]]))

    def test_k1_identity(self):
        x = torch.randn(5, 3)
        assert torch.equal(stack(x, 1), x)

    def test_zero_pad_tail(self):
        x = torch.randn(3, 2)
        out = stack(x, 2)
        assert torch.equal(out[1], torch.cat([x[2], torch.zeros(2)]))

    def test_bad_k(self):
        with pytest.raises(ValueError):
            stack(torch.randn(4, 2), 3)


def test_length_law_exhaustive():
    for T, k in itertools.product(range(1, 65), (1, 2, 4, 8)):
        x = torch.randn(T, 3)
        expected = -(-T // k)
        assert pool(x, k).shape == (expected, 3), (T, k)
        assert stack(x, k).shape == (expected, 3 * k), (T, k)


class TestProjector:
    def test_affine_short_circuit(self):
        p = Projector(8, 16)
        c = torch.linspace(-1, 1, 16)
        with torch.no_grad():
            p.W2.zero_()
            p.b2.zero_()
            p.gamma2.zero_()
            p.beta2.copy_(c)
        out = project(torch.randn(5, 8), p)
        assert torch.allclose(out, c.expand(5, 16))

    def test_param_count_closed_form(self):
        p = Projector(8, 16)
        n = sum(t.numel() for t in p.parameters())
        assert n == 8 * 16 + 16 + 16 * 16 + 16 + 2 * 8 + 2 * 16 == projector_param_count(8, 16)

    def test_param_count_1024_3072(self):
        # W1 + b1 + W2 + b2 + two (gamma, beta) pairs
        expected = 1024 * 3072 + 3072 + 3072 * 3072 + 3072 + 2 * 1024 + 2 * 3072
        assert projector_param_count(1024, 3072) == expected == 12_597_248
        assert abs(expected - 12.58e6) <= 0.1e6

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            Projector(8, 16)(torch.randn(3, 9))

    def test_shapes(self):
        p = Projector(8, 16)
        assert p.W1.shape == (8, 16) and p.W2.shape == (16, 16)

    def test_order_of_operations(self):
        torch.manual_seed(1)
        p = Projector(8, 16).double()
        x = torch.randn(4, 8, dtype=torch.float64)
        h = torch.nn.functional.layer_norm(x, (8,), p.gamma1, p.beta1, eps=1e-5)
        h = torch.nn.functional.gelu(h @ p.W1 + p.b1)
        h = torch.nn.functional.layer_norm(h @ p.W2 + p.b2, (16,), p.gamma2, p.beta2, eps=1e-5)
        assert torch.allclose(p(x), h, atol=1e-12)

    @given(st.permutations(list(range(6))))
    def test_frame_permutation_equivariant(self, perm):
        torch.manual_seed(0)
        p = Projector(4, 8)
        x = torch.randn(6, 4)
        idx = torch.tensor(perm)
        with torch.no_grad():
            assert torch.allclose(p(x)[idx], p(x[idx]), atol=1e-6)


class TestLayerAggregation:
    def test_every_12_of_24(self):
        assert select_layers(24, 12) == [12, 24]

    def test_every_k_includes_final(self):
        assert select_layers(10, 3) == [3, 6, 9, 10]
        assert select_layers(24, 6) == [6, 12, 18, 24]

    def test_every_k_exceeding_depth(self):
        with pytest.raises(ConfigError):
            select_layers(2, 3)

    def _layers(self, L=4, T=6, d=8, seed=0):
        g = torch.Generator().manual_seed(seed)
        return LayerFeatures([torch.randn(T, d, generator=g) for _ in range(L + 1)])

    def test_every_L_before_is_plain_projection(self):
        cfg = ConnectorConfig(d_in=8, d_lm=16, layer_agg_every=4)
        layers = self._layers()
        p = Projector(8, 16)
        with torch.no_grad():
            agg = aggregate_layers(layers, 4, "before", p, cfg)
            plain = p(pool(layers.final, 2))
        assert torch.allclose(agg, plain)

    def test_before_and_after_differ(self):
        cfg = ConnectorConfig(d_in=8, d_lm=16)
        layers = self._layers()
        torch.manual_seed(0)
        p = Projector(8, 16)
        with torch.no_grad():
            p.W1.mul_(50)
            a = aggregate_layers(layers, 2, "before", p, cfg)
            b = aggregate_layers(layers, 2, "after", p, cfg)
        assert a.shape == b.shape == (3, 16)
        assert (a - b).abs().max() > 1e-3

    def test_connector_uses_config(self):
        c = Connector(ConnectorConfig(d_in=8, d_lm=16, reduction="stack", k=4, layer_agg_every=2, layer_agg_position="after"))
        assert c.projector.W1.shape == (32, 16)
        out = c(self._layers(T=9))
        assert out.shape == (3, 16)


class TestConfig:
    def test_stack_widens(self):
        assert ConnectorConfig(d_in=8, reduction="stack", k=4).d_in_effective == 32
        assert ConnectorConfig(d_in=8, reduction="pool", k=4).d_in_effective == 8

    def test_bad_values(self):
        with pytest.raises(ConfigError):
            ConnectorConfig(reduction="max")
        with pytest.raises(ConfigError):
            ConnectorConfig(reduction="stack", k=3)
        with pytest.raises(ConfigError):
            ConnectorConfig(layer_agg_position="middle")
        with pytest.raises(ConfigError):
            ConnectorConfig(reduction="none", k=2)
