import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from almlab.adaptation import (
    FREEZE_GRID,
    FreezeConfig,
    LoraConfig,
    LoRALinear,
    attach_lora,
    base_params,
    count_params,
    count_trainable,
    lora_modules,
    lora_params,
    merge_lora,
    set_trainable,
)
from almlab.connector import projector_param_count
from almlab.data import collate
from almlab.errors import ConfigError
from almlab.layers import Linear
from almlab.model import BundleConfig, build_bundle


def _block_params(d):
    # 2 layer norms, q/v/o with bias, k without, 4x MLP with bias
    return 2 * 2 * d + 4 * d * d + 3 * d + (d * 4 * d + 4 * d) + (4 * d * d + d)


def _expected_counts(cfg: BundleConfig):
    e, c, m = cfg.encoder, cfg.connector, cfg.lm
    d = e.d_model
    k = e.conv_kernel
    enc = (e.n_mels * d * k + d) + (d * d * k + d) + e.n_layers * _block_params(d) + 2 * d
    lm = m.vocab_size * m.d_lm + m.max_seq_len * m.d_lm + m.n_layers * _block_params(m.d_lm) + 2 * m.d_lm + m.d_lm * m.vocab_size
    return enc, projector_param_count(c.d_in_effective, c.d_lm), lm


@pytest.fixture
def batch(tiny_samples):
    return collate(tiny_samples[:3], 0.5)


class TestLoraLinear:
    def test_shapes_and_init(self):
        torch.manual_seed(0)
        m = LoRALinear(Linear(12, 20), rank=4, alpha=8.0)
        assert m.lora_A.shape == (12, 4) and m.lora_B.shape == (4, 20)
        assert torch.count_nonzero(m.lora_B) == 0
        assert 0.01 < float(m.lora_A.detach().std()) < 0.03
        assert m.scaling == 2.0
        assert not any(p.requires_grad for p in m.base.parameters())

    def test_forward_matches_dense_formula(self):
        torch.manual_seed(1)
        m = LoRALinear(Linear(6, 5), rank=2, alpha=3.0)
        with torch.no_grad():
            m.lora_B.normal_()
        x = torch.randn(4, 6)
        W = m.base.weight + 1.5 * m.lora_A @ m.lora_B
        assert torch.allclose(m(x), x @ W + m.base.bias, atol=1e-6)

    def test_merge_unmerge(self):
        torch.manual_seed(2)
        m = LoRALinear(Linear(6, 5), rank=2, alpha=4.0)
        with torch.no_grad():
            m.lora_B.normal_()
        w0 = m.base.weight.clone()
        x = torch.randn(3, 6)
        y = m(x)
        m.merge()
        assert torch.allclose(m(x), y, atol=1e-6)
        m.merge()  # idempotent
        assert torch.allclose(m(x), y, atol=1e-6)
        m.unmerge()
        assert torch.allclose(m.base.weight, w0, atol=1e-6)

    def test_dropout_only_in_training(self):
        torch.manual_seed(3)
        m = LoRALinear(Linear(8, 8), rank=2, alpha=4.0, dropout_p=0.5)
        with torch.no_grad():
            m.lora_B.normal_()
        x = torch.randn(5, 8)
        m.eval()
        assert torch.equal(m(x), m(x))
        m.train()
        assert not torch.equal(m(x), m(x))


class TestConfig:
    def test_defaults(self):
        cfg = LoraConfig()
        assert (cfg.rank, cfg.alpha, cfg.dropout_p, cfg.scaling) == (8, 16.0, 0.05, 2.0)

    @pytest.mark.parametrize("kw", [{"rank": 0}, {"dropout_p": 1.0}, {"targets": ["mlp"]}])
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            LoraConfig(**kw)

    def test_all_false_freeze(self):
        with pytest.raises(ConfigError):
            FreezeConfig(train_encoder=False, train_projector=False, train_lm=False)

    def test_grid_names(self):
        assert set(FREEZE_GRID) == {"all", "frozen_encoder", "frozen_encoder_lm", "frozen_lm"}
        assert FREEZE_GRID["frozen_encoder_lm"] == FreezeConfig(train_encoder=False, train_lm=False)


class TestAttach:
    def test_double_attach_rejected(self, toy_bundle):
        with pytest.raises(ConfigError):
            attach_lora(toy_bundle, LoraConfig())

    def test_wraps_every_attention_projection(self, toy_bundle):
        cfg = toy_bundle.cfg
        assert len(lora_modules(toy_bundle.encoder)) == 4 * cfg.encoder.n_layers
        assert len(lora_modules(toy_bundle.lm)) == 4 * cfg.lm.n_layers

    def test_added_count(self):
        plain = build_bundle(seed=0)
        before = count_params(plain)["total"]
        cfg = plain.cfg
        attach_lora(plain, LoraConfig(rank=8))
        added = count_params(plain)["total"] - before
        r = 8
        want = sum(4 * cfg.encoder.n_layers * r * (d + d) for d in [cfg.encoder.d_model]) + 4 * cfg.lm.n_layers * r * 2 * cfg.lm.d_lm
        assert added == want == sum(p.numel() for p in lora_params(plain))

    def test_targets_restrict(self):
        b = build_bundle(seed=0, lora=LoraConfig(targets=["lm_attn"]))
        assert not lora_modules(b.encoder) and lora_modules(b.lm)
        with pytest.raises(ConfigError):
            set_trainable(b, FreezeConfig())

    @given(st.integers(1, 16))
    def test_added_count_any_rank(self, r):
        b = build_bundle(seed=0, lora=LoraConfig(rank=r))
        assert sum(p.numel() for p in lora_params(b)) == sum(m.rank * (m.d_in + m.d_out) for m in lora_modules(b))
        assert all(m.rank == r for m in lora_modules(b))


class TestIdentityAtInit:
    def test_bundle_output_unchanged(self, batch):
        plain = build_bundle(seed=0).eval()
        adapted = build_bundle(seed=0, lora=LoraConfig()).eval()
        with torch.no_grad():
            a, _, _ = plain.forward_batch(batch)
            b, _, _ = adapted.forward_batch(batch)
        assert float((a - b).abs().max()) <= 1e-6

    def test_merge_after_training_like_update(self, batch):
        b = build_bundle(seed=0, lora=LoraConfig()).eval()
        with torch.no_grad():
            for m in lora_modules(b):
                m.lora_B.normal_(0, 0.05)
            before, _, _ = b.forward_batch(batch)
            merge_lora(b)
            after, _, _ = b.forward_batch(batch)
        assert torch.allclose(before, after, atol=1e-4)


class TestFreeze:
    def _grads(self, bundle, batch, freeze):
        set_trainable(bundle, freeze)
        bundle.eval()
        bundle.loss(batch).backward()
        return bundle

    def test_base_weights_get_no_gradient(self, toy_bundle, batch):
        b = self._grads(toy_bundle, batch, FreezeConfig())
        for p in base_params(b.encoder) + base_params(b.lm):
            assert p.grad is None or torch.count_nonzero(p.grad) == 0

    def test_frozen_lm(self, toy_bundle, batch):
        b = self._grads(toy_bundle, batch, FREEZE_GRID["frozen_lm"])
        for p in lora_params(b.lm):
            assert not p.requires_grad
            assert p.grad is None or torch.count_nonzero(p.grad) == 0
        assert any(torch.count_nonzero(p.grad) for p in b.connector.parameters())
        # B starts at zero, so dL/dA is zero and dL/dB carries the signal
        assert any(torch.count_nonzero(m.lora_B.grad) for m in lora_modules(b.encoder))

    @pytest.mark.parametrize("name", list(FREEZE_GRID))
    def test_trainable_sets(self, toy_bundle, name):
        f = FREEZE_GRID[name]
        trainable = set(map(id, set_trainable(toy_bundle, f)))
        want = set()
        if f.train_encoder:
            want |= set(map(id, lora_params(toy_bundle.encoder)))
        if f.train_lm:
            want |= set(map(id, lora_params(toy_bundle.lm)))
        if f.train_projector:
            want |= set(map(id, toy_bundle.connector.parameters()))
        assert trainable == want
        assert count_trainable(toy_bundle) == sum(p.numel() for p in toy_bundle.parameters() if id(p) in want)


class TestCounts:
    @pytest.mark.parametrize("preset", ["toy", "toy-deep"])
    def test_closed_form(self, preset):
        from almlab.encoder import ENCODER_PRESETS

        cfg = BundleConfig(encoder=ENCODER_PRESETS[preset])
        b = build_bundle(cfg)
        enc, proj, lm = _expected_counts(cfg)
        counts = count_params(b)
        assert (counts["encoder"], counts["projector"], counts["lm"]) == (enc, proj, lm)
        assert counts["total"] == enc + proj + lm == sum(p.numel() for p in b.parameters())

    def test_total_is_sum_with_lora(self, toy_bundle):
        c = count_params(toy_bundle)
        assert c["total"] == c["encoder"] + c["projector"] + c["lm"] == sum(p.numel() for p in toy_bundle.parameters())
