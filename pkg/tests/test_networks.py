"""Network shapes, normalization invariants, momentum machinery, and
deterministic construction."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from pairmodal.networks import (
    FusionEncoder,
    Model,
    NetConfig,
    NetworkError,
    build_model,
    ema_update_,
    momentum_update,
)


@pytest.fixture(scope="module")
def net() -> NetConfig:
    return NetConfig(
        image_side=16,
        patch_size=4,
        embed_dim=16,
        proj_dim=8,
        glo_dim=24,
        num_classes=3,
        encoder_heads=2,
        fusion_heads=2,
    )


@pytest.fixture(scope="module")
def model(net) -> Model:
    return build_model(net, seed=0)


def _images(net: NetConfig, batch: int, seed: int = 0) -> torch.Tensor:
    rng = np.random.default_rng(seed)
    return torch.from_numpy(
        rng.uniform(0, 1, size=(batch, 3, net.image_side, net.image_side)).astype(np.float32)
    )


class TestNetConfig:
    def test_token_count(self, net):
        assert net.tokens_per_side == 4
        assert net.num_tokens == 16

    def test_side_divisibility(self):
        with pytest.raises(NetworkError, match="divisible"):
            NetConfig(image_side=30, patch_size=8)

    def test_dimension_ordering(self):
        with pytest.raises(NetworkError, match="glo_dim > embed_dim >= proj_dim"):
            NetConfig(embed_dim=64, proj_dim=32, glo_dim=64)
        with pytest.raises(NetworkError, match="glo_dim > embed_dim >= proj_dim"):
            NetConfig(embed_dim=16, proj_dim=32, glo_dim=64)

    def test_head_divisibility(self):
        with pytest.raises(NetworkError, match="encoder_heads"):
            NetConfig(embed_dim=30, proj_dim=8, encoder_heads=4)

    def test_dict_round_trip(self, net):
        assert NetConfig.from_dict(net.to_dict()) == net


class TestEncoder:
    def test_pooled_and_token_shapes(self, model, net):
        images = _images(net, 5)
        pooled, tokens = model.encode(images, "wli")
        assert pooled.shape == (5, net.embed_dim)
        assert tokens.shape == (5, net.num_tokens, net.embed_dim)

    def test_visible_subset_shapes(self, model, net):
        images = _images(net, 3)
        keep = torch.tensor([[0, 2, 5, 7]] * 3)
        pooled, tokens = model.encode(images, "wli", keep=keep)
        assert pooled.shape == (3, net.embed_dim)
        assert tokens.shape == (3, 4, net.embed_dim)

    def test_deterministic_forward(self, model, net):
        images = _images(net, 2)
        a, _ = model.encode(images, "nbi")
        b, _ = model.encode(images, "nbi")
        torch.testing.assert_close(a, b, rtol=0, atol=0)

    def test_zero_batch(self, model, net):
        pooled, tokens = model.encode(_images(net, 0), "wli")
        assert pooled.shape == (0, net.embed_dim)

    def test_input_validation(self, model, net):
        with pytest.raises(NetworkError, match=r"\(B, 3, S, S\)"):
            model.encode(torch.zeros(2, 1, 16, 16), "wli")
        with pytest.raises(NetworkError, match="side"):
            model.encode(torch.zeros(2, 3, 8, 8), "wli")
        with pytest.raises(NetworkError, match="modality"):
            model.encode(_images(net, 1), "xray")


class TestDecoder:
    def test_reconstruction_shape(self, model, net):
        images = _images(net, 4)
        keep = torch.stack([torch.arange(4) for _ in range(4)])
        _, visible = model.encode(images, "wli", keep=keep)
        recon = model.decoder(visible, keep)
        assert recon.shape == images.shape

    def test_keep_mismatch_rejected(self, model, net):
        images = _images(net, 2)
        keep = torch.tensor([[0, 1, 2, 3]] * 2)
        _, visible = model.encode(images, "wli", keep=keep)
        with pytest.raises(NetworkError, match="keep indices"):
            model.decoder(visible, keep[:, :2])


class TestNormalizedHeads:
    def test_unit_norm_rows(self, model, net):
        features = torch.from_numpy(
            np.random.default_rng(0).normal(0, 50, size=(7, net.embed_dim)).astype(np.float32)
        )
        for head in (model.project, model.global_embed):
            norms = head(features).norm(dim=-1)
            torch.testing.assert_close(norms, torch.ones(7), rtol=0, atol=1e-6)

    def test_output_dims(self, model, net):
        features = torch.zeros(2, net.embed_dim)
        assert model.project(features).shape == (2, net.proj_dim)
        assert model.global_embed(features).shape == (2, net.glo_dim)


class TestFusion:
    def test_shape_and_determinism(self, model, net):
        z_w = torch.randn(6, net.embed_dim)
        z_n = torch.randn(6, net.embed_dim)
        fused = model.fusion(z_w, z_n)
        assert fused.shape == (6, net.embed_dim)
        torch.testing.assert_close(fused, model.fusion(z_w, z_n), rtol=0, atol=0)

    def test_not_a_plain_average(self, model, net):
        z_w = torch.randn(3, net.embed_dim)
        z_n = torch.randn(3, net.embed_dim)
        fused = model.fusion(z_w, z_n)
        assert not torch.allclose(fused, 0.5 * (z_w + z_n))

    def test_mismatched_inputs_rejected(self, net):
        fusion = FusionEncoder(net)
        with pytest.raises(NetworkError, match="matching"):
            fusion(torch.zeros(2, net.embed_dim), torch.zeros(3, net.embed_dim))


class TestMomentumUpdate:
    def test_scalar_example(self):
        assert momentum_update(4.0, 2.0, 0.5) == 3.0

    def test_tensor_blend(self):
        online = torch.full((3,), 4.0)
        momentum = torch.full((3,), 2.0)
        torch.testing.assert_close(momentum_update(online, momentum, 0.9), torch.full((3,), 2.2))

    def test_endpoint_coefficients(self):
        assert momentum_update(5.0, 1.0, 1.0) == 1.0
        assert momentum_update(5.0, 1.0, 0.0) == 5.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(NetworkError, match="shape mismatch"):
            momentum_update(torch.zeros(2), torch.zeros(3), 0.5)

    def test_coefficient_range(self):
        with pytest.raises(NetworkError, match=r"\[0, 1\]"):
            momentum_update(1.0, 1.0, 1.5)


class TestModelMomentumCopies:
    def test_copies_start_equal(self, net):
        model = build_model(net, seed=3)
        for online, copy in model._momentum_pairs():
            for p_o, p_c in zip(online.parameters(), copy.parameters()):
                torch.testing.assert_close(p_o, p_c, rtol=0, atol=0)

    def test_copies_are_frozen_and_not_trainable(self, model):
        for _, copy in model._momentum_pairs():
            assert all(not p.requires_grad for p in copy.parameters())
        names = model.trainable_parameters()
        assert not any(name.startswith("momentum_") for name in names)
        assert any(name.startswith("encoder_w") for name in names)

    def test_update_moves_copies_toward_online(self, net):
        model = build_model(net, seed=1, momentum=0.9)
        with torch.no_grad():
            for p in model.encoder_w.parameters():
                p.add_(1.0)
        before = model.momentum_encoder_w.patch_embed.weight.clone()
        online = model.encoder_w.patch_embed.weight
        model.update_momentum()
        after = model.momentum_encoder_w.patch_embed.weight
        torch.testing.assert_close(after, 0.9 * before + 0.1 * online)

    def test_ema_update_with_zero_momentum_copies_online(self, net):
        a = build_model(net, seed=1)
        b = build_model(net, seed=2)
        ema_update_(b, a, 0.0)
        for p_a, p_b in zip(a.parameters(), b.parameters()):
            torch.testing.assert_close(p_a, p_b, rtol=0, atol=0)


class TestBuildModel:
    def test_same_seed_same_weights(self, net):
        a = build_model(net, seed=11)
        b = build_model(net, seed=11)
        for key, value in a.state_dict().items():
            torch.testing.assert_close(value, b.state_dict()[key], rtol=0, atol=0)

    def test_different_seed_differs(self, net):
        a = build_model(net, seed=11)
        b = build_model(net, seed=12)
        assert any(
            not torch.equal(value, b.state_dict()[key]) for key, value in a.state_dict().items()
        )

    def test_global_rng_untouched(self, net):
        state = torch.random.get_rng_state()
        build_model(net, seed=99)
        assert torch.equal(state, torch.random.get_rng_state())

    def test_classifier_and_evidence_heads_distinct(self, model, net):
        features = torch.randn(2, net.embed_dim)
        cls = model.classifier(features)
        ev_w = model.evidence_w(features)
        ev_n = model.evidence_n(features)
        assert cls.shape == ev_w.shape == ev_n.shape == (2, net.num_classes)
        assert not torch.allclose(cls, ev_w)
        assert not torch.allclose(ev_w, ev_n)
