"""Heuristic prior estimation and the physical imaging model."""

import math

import pytest
import torch

from hupe.flow import FlowConfig, HeuristicFlow
from hupe.prior import (
    PhysicalParams,
    PriorEncoder,
    dark_channel,
    depth_map,
    gradient_map,
    hpe_encode,
    physical_apply,
    transmission_from_depth,
)


class TestGradientMap:
    def test_constant_image_is_zero(self):
        assert torch.all(gradient_map(torch.full((1, 3, 16, 16), 0.4)) == 0)

    def test_step_edge_normalizes_to_one(self):
        img = torch.zeros(1, 3, 8, 8)
        img[..., 4:] = 1.0
        g = gradient_map(img)
        # interior columns adjacent to the jump carry the peak magnitude
        assert g[0, 0, 4, 3].item() == pytest.approx(1.0)
        assert g[0, 0, 4, 4].item() == pytest.approx(1.0)
        assert g[0, 0, 4, 0].item() == 0.0

    def test_shape_and_range(self):
        g = torch.Generator().manual_seed(0)
        img = torch.rand(2, 3, 32, 32, generator=g)
        out = gradient_map(img)
        assert out.shape == (2, 1, 32, 32)
        assert out.min().item() >= 0.0
        assert out.max().item() <= 1.0

    def test_rejects_non_rgb(self):
        with pytest.raises(ValueError, match="3-channel"):
            gradient_map(torch.zeros(1, 1, 8, 8))


def windowed_min_oracle(img: torch.Tensor, window: int) -> torch.Tensor:
    """Straight-loop dark channel: min over channels then a w x w window
    (replicate padding), the independent oracle for depth_map."""
    n, _, h, w = img.shape
    mins = img.min(dim=1).values
    pad = window // 2
    out = torch.empty(n, h, w)
    for b in range(n):
        for i in range(h):
            for j in range(w):
                i0, i1 = max(0, i - pad), min(h, i + pad + 1)
                j0, j1 = max(0, j - pad), min(w, j + pad + 1)
                out[b, i, j] = mins[b, i0:i1, j0:j1].min()
    return out.unsqueeze(1)


class TestDepthMap:
    def test_all_zeros_gives_zero(self):
        assert torch.all(depth_map(torch.zeros(1, 3, 32, 32)) == 0)

    def test_all_ones_constant_guard_gives_zero(self):
        assert torch.all(depth_map(torch.ones(1, 3, 32, 32)) == 0)

    def test_matches_windowed_min_oracle(self):
        g = torch.Generator().manual_seed(1)
        img = torch.rand(1, 3, 24, 24, generator=g)
        dark = dark_channel(img, window=7)
        oracle = windowed_min_oracle(img, 7)
        assert torch.allclose(dark, oracle, atol=1e-7)

    def test_bright_patch_oracle_values(self):
        # direct windowed-min evaluation: the dark-channel proxy assigns the
        # bright patch interior the top of the [0, 1] range and the dark
        # field the bottom
        img = torch.zeros(1, 3, 64, 64)
        img[..., 20:44, 20:44] = 1.0
        d = depth_map(img)
        assert d[0, 0, 32, 32].item() == pytest.approx(1.0)
        assert d[0, 0, 5, 5].item() == pytest.approx(0.0)


class TestTransmission:
    def test_zero_depth_full_transmission(self):
        t = transmission_from_depth(torch.zeros(1, 1, 4, 4), 1.0)
        assert torch.all(t == 1.0)

    def test_exponential_decay_value(self):
        t = transmission_from_depth(torch.tensor([math.log(2.0)]), 1.0)
        assert t.item() == pytest.approx(0.5, abs=1e-6)

    def test_clip_floor(self):
        t = transmission_from_depth(torch.tensor([1.0]), 10.0)
        assert t.item() == pytest.approx(0.05)

    def test_literal_sign_saturates_under_clip(self):
        t = transmission_from_depth(torch.tensor([0.5, 1.0]), 2.0, sign="pos")
        assert torch.all(t == 1.0)

    def test_rejects_negative_inputs(self):
        with pytest.raises(ValueError):
            transmission_from_depth(torch.tensor([-0.1]), 1.0)
        with pytest.raises(ValueError):
            transmission_from_depth(torch.tensor([0.1]), -1.0)


class TestPhysicalModel:
    def test_unit_transmission_identity(self):
        x = torch.rand(1, 3, 8, 8)
        p = PhysicalParams(t=torch.tensor(1.0), b=torch.tensor(0.5))
        assert torch.allclose(physical_apply(x, p, "restore"), x)

    def test_worked_example(self):
        p = PhysicalParams(t=torch.tensor(0.5), b=torch.tensor(0.8))
        j = physical_apply(torch.tensor([[[[0.5]]]]), p, "restore")
        assert j.item() == pytest.approx(0.2, abs=1e-6)
        back = physical_apply(j, p, "degrade")
        assert back.item() == pytest.approx(0.5, abs=1e-6)

    def test_round_trip_over_grid(self):
        g = torch.Generator().manual_seed(2)
        x = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64)
        for t in [0.05 + 0.05 * k for k in range(20)]:
            for b in (0.0, 0.5, 1.0):
                p = PhysicalParams(t=torch.tensor(t, dtype=torch.float64),
                                   b=torch.tensor(b, dtype=torch.float64))
                back = physical_apply(physical_apply(x, p, "degrade"), p, "restore")
                assert (back - x).abs().max().item() <= 1e-6

    def test_degraded_mean_moves_toward_ambient(self):
        x = torch.full((1, 3, 8, 8), 0.2)
        p = PhysicalParams(t=torch.tensor(0.4), b=torch.tensor(0.9))
        deg = physical_apply(x, p, "degrade")
        assert 0.2 < deg.mean().item() < 0.9

    def test_invalid_transmission_errors(self):
        with pytest.raises(ValueError, match="transmission"):
            PhysicalParams(t=torch.tensor(0.0), b=torch.tensor(0.5))
        with pytest.raises(ValueError, match="transmission"):
            PhysicalParams(t=torch.tensor(1.5), b=torch.tensor(0.5))

    def test_unknown_direction_errors(self):
        p = PhysicalParams(t=torch.tensor(0.5), b=torch.tensor(0.5))
        with pytest.raises(ValueError, match="direction"):
            physical_apply(torch.zeros(1, 3, 2, 2), p, "sideways")


class TestPriorEncoder:
    def test_pair_count_matches_blocks(self):
        enc = PriorEncoder(n_blocks=3)
        pairs = hpe_encode(torch.rand(1, 3, 64, 64), enc)
        assert len(pairs) == 3

    def test_shapes_match_flow_working_resolutions(self):
        enc = PriorEncoder(n_blocks=3)
        model = HeuristicFlow(FlowConfig(n_hibs=3, flow_steps=1))
        pairs = hpe_encode(torch.rand(2, 3, 64, 64), enc)
        for pair, size in zip(pairs, model.working_sizes(64, 64)):
            assert pair.t.shape == (2, 1, *size)
            assert pair.b.shape == (2, 1, *size)

    def test_outputs_bounded_across_random_weights(self):
        for seed in range(100):
            gen = torch.Generator().manual_seed(seed)
            enc = PriorEncoder(n_blocks=2)
            with torch.no_grad():
                for p in enc.parameters():
                    p.copy_(torch.randn(p.shape, generator=gen))
            pairs = hpe_encode(torch.rand(1, 3, 16, 16, generator=gen), enc)
            for pair in pairs:
                assert (pair.t > 0).all()
                assert (pair.b >= 0).all() and (pair.b <= 1).all()

    def test_identity_conditioning_at_init(self):
        enc = PriorEncoder(n_blocks=2)
        pairs = hpe_encode(torch.rand(1, 3, 32, 32), enc)
        for pair in pairs:
            assert torch.allclose(pair.t, torch.ones_like(pair.t), atol=1e-6)

    def test_spatial_mismatch_errors(self):
        enc = PriorEncoder(n_blocks=2)
        with pytest.raises(ValueError, match="spatial"):
            enc(torch.rand(1, 3, 16, 16), torch.rand(1, 1, 8, 8),
                torch.rand(1, 1, 16, 16))
