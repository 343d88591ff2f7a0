import math

import numpy as np
import pytest
import torch

from partrec.field import (
    FieldHeads, HexaPlane, color, density, normal, query_features, sdf,
)
from partrec.geometry import ContractViolation

torch.manual_seed(0)


def rand_planes(r=4, c=2, dtype=torch.float64, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(6, r, r, c, generator=g, dtype=dtype)


class TestQueryFeatures:
    def test_constant_grids(self):
        planes = torch.zeros(6, 4, 4, 2, dtype=torch.float64)
        for k in range(6):
            planes[k] = float(k + 1)
        x = torch.tensor([[0.3, -0.7, 0.1], [0.0, 0.0, 0.0], [-1.0, 1.0, -1.0]],
                         dtype=torch.float64)
        out = query_features(planes, x)
        # signs pick the grids: (0.3,-0.7,0.1) -> z>=0: xy+(1), x>=0: yz+(3),
        # y<0: xz-(6); the origin picks all + grids; (-1,1,-1) -> 2, 4, 5
        assert torch.allclose(out[0], torch.tensor([1, 1, 3, 3, 6, 6], dtype=torch.float64))
        assert torch.allclose(out[1], torch.tensor([1, 1, 3, 3, 5, 5], dtype=torch.float64))
        assert torch.allclose(out[2], torch.tensor([2, 2, 4, 4, 5, 5], dtype=torch.float64))

    def test_positive_plane_at_exact_zero(self):
        planes = torch.zeros(6, 2, 2, 1, dtype=torch.float64)
        planes[0] = 10.0  # xy+
        planes[1] = 20.0  # xy-
        at_zero = query_features(planes, torch.tensor([[0.0, 0.0, 0.0]],
                                                      dtype=torch.float64))
        assert at_zero[0, 0] == 10.0
        below = query_features(planes, torch.tensor([[0.0, 0.0, -1e-12]],
                                                    dtype=torch.float64))
        assert below[0, 0] == 20.0

    def test_exact_value_at_grid_node(self):
        planes = rand_planes(r=5)
        # node i sits at -1 + 2i/(R-1); pick node (3, 1) of the xy+ plane
        u = -1 + 2 * 3 / 4
        v = -1 + 2 * 1 / 4
        out = query_features(planes, torch.tensor([[u, v, 0.5]], dtype=torch.float64))
        assert torch.allclose(out[0, :2], planes[0, 3, 1])

    def test_out_of_range_rejected(self):
        planes = rand_planes()
        with pytest.raises(ContractViolation):
            query_features(planes, torch.tensor([[1.2, 0.0, 0.0]], dtype=torch.float64))

    def test_bilinear_against_manual(self):
        planes = rand_planes(r=3, c=1)
        # midpoint of the four upper-right nodes of the yz+ plane (x >= 0)
        x = torch.tensor([[0.4, 0.5, 0.5]], dtype=torch.float64)
        out = query_features(planes, x)
        manual = planes[2, 2:4, 2:4, 0].mean() if False else None
        # yz plane: u=y, v=z; g = (0.5+1)/2*2 = 1.5 on both axes
        corners = planes[2, 1:3, 1:3, 0]
        assert torch.allclose(out[0, 1], corners.mean())

    def test_seam_discontinuity_is_allowed(self):
        # the two grids of a pair need not agree at the seam; crossing the
        # out-of-plane zero can jump (documented non-invariant)
        planes = torch.zeros(6, 3, 3, 1, dtype=torch.float64)
        planes[0] = 1.0
        planes[1] = -1.0
        just_above = query_features(planes, torch.tensor([[0.1, 0.1, 1e-9]],
                                                         dtype=torch.float64))
        just_below = query_features(planes, torch.tensor([[0.1, 0.1, -1e-9]],
                                                         dtype=torch.float64))
        assert (just_above[0, 0] - just_below[0, 0]).abs() > 1.9

    def test_locality_of_node_perturbation(self):
        # bumping one node moves only queries whose bilinear cell touches it
        base = rand_planes(r=4, c=1)
        xs = torch.linspace(-1, 1, 9, dtype=torch.float64)
        grid = torch.cartesian_prod(xs, xs, torch.tensor([0.5], dtype=torch.float64))
        ref = query_features(base, grid)
        node_u, node_v = 1, 2
        bumped = base.clone()
        bumped[0, node_u, node_v, 0] += 1.0  # xy+ plane
        out = query_features(bumped, grid)
        changed = (out[:, 0] - ref[:, 0]).abs() > 1e-12
        # footprint: |g_u - node| < 1 and |g_v - node| < 1 in grid coords
        gu = (grid[:, 0] + 1) * 0.5 * 3
        gv = (grid[:, 1] + 1) * 0.5 * 3
        covered = (torch.abs(gu - node_u) < 1) & (torch.abs(gv - node_v) < 1)
        assert torch.equal(changed, covered)


class TestSdf:
    def test_zero_head_center_value(self):
        heads = FieldHeads(channels=2).double()
        planes = rand_planes(c=2)
        he = torch.tensor([0.2, 0.2, 0.2], dtype=torch.float64)
        x = torch.zeros(1, 3, dtype=torch.float64)
        out = sdf(planes, heads, x, he, radius=0.5)
        assert torch.allclose(out, torch.tensor([-0.05], dtype=torch.float64))

    def test_zero_head_sphere_surface(self):
        heads = FieldHeads(channels=2).double()
        planes = rand_planes(c=2)
        he = torch.tensor([0.25, 0.25, 0.25], dtype=torch.float64)
        # |x_local * he| = 0.05 = 0.1 * r for r = 0.5
        x = torch.tensor([[0.2, 0.0, 0.0]], dtype=torch.float64)
        out = sdf(planes, heads, x, he, radius=0.5)
        assert torch.allclose(out, torch.zeros(1, dtype=torch.float64), atol=1e-12)

    def test_anisotropic_box_still_spherical(self):
        heads = FieldHeads(channels=2).double()
        planes = rand_planes(c=2)
        he = torch.tensor([0.4, 0.1, 0.2], dtype=torch.float64)
        pts = torch.tensor([[0.125, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, 0.25]],
                           dtype=torch.float64)  # all at 0.05 scene units
        out = sdf(planes, heads, pts, he, radius=0.5)
        assert torch.allclose(out, torch.zeros(3, dtype=torch.float64), atol=1e-12)


class TestColor:
    def test_fresh_heads_mid_grey(self):
        heads = FieldHeads(channels=2).double()
        planes = rand_planes(c=2)
        out = color(planes, heads, torch.zeros(4, 3, dtype=torch.float64))
        assert torch.allclose(out, torch.full((4, 3), 0.5, dtype=torch.float64))

    def test_open_unit_interval(self):
        heads = FieldHeads(channels=2).double()
        for p in heads.color_mlp.parameters():
            torch.nn.init.normal_(p, std=1.0)
        planes = rand_planes(c=2)
        x = 2 * torch.rand(64, 3, dtype=torch.float64) - 1
        out = color(planes, heads, x)
        assert torch.all(out > 0) and torch.all(out < 1)


class TestDensity:
    def test_midpoint_exact(self):
        for beta in (1e-3, 0.1, 10.0):
            s = torch.tensor([0.0], dtype=torch.float64)
            assert density(s, beta).item() == 0.5

    def test_frozen_branch_values(self):
        s = torch.tensor([0.1, -0.1], dtype=torch.float64)
        out = density(s, 0.1)
        assert math.isclose(out[0].item(), 0.5 * math.exp(-1.0), rel_tol=1e-12)
        assert math.isclose(out[1].item(), 1 - 0.5 * math.exp(-1.0), rel_tol=1e-12)

    def test_bounded_and_monotone(self):
        s = torch.linspace(-5, 5, 1001, dtype=torch.float64)
        out = density(s, 0.3)
        assert torch.all(out >= 0) and torch.all(out <= 1)
        assert torch.all(out[1:] < out[:-1])

    def test_sharpens_as_beta_shrinks(self):
        s = torch.tensor([0.2, -0.2], dtype=torch.float64)
        step = torch.tensor([0.0, 1.0], dtype=torch.float64)
        gaps = [(density(s, b) - step).abs() for b in (0.4, 0.2, 0.1, 0.05)]
        for a, b in zip(gaps, gaps[1:]):
            assert torch.all(b < a)

    def test_rejects_bad_beta(self):
        with pytest.raises(ContractViolation):
            density(torch.zeros(1), 0.0)


class TestNormal:
    def test_sphere_bias_radial(self):
        heads = FieldHeads(channels=2).double()
        planes = torch.zeros(6, 4, 4, 2, dtype=torch.float64)
        he = torch.tensor([0.2, 0.2, 0.2], dtype=torch.float64)
        x = torch.tensor([[0.2, 0.0, 0.0]], dtype=torch.float64)  # 0.04 scene units
        n, valid = normal(planes, heads, x, he, radius=0.5)
        assert valid[0]
        assert torch.allclose(n[0], torch.tensor([1.0, 0, 0], dtype=torch.float64),
                              atol=1e-6)

    def test_bias_normals_unit_everywhere(self):
        heads = FieldHeads(channels=2).double()
        planes = torch.zeros(6, 4, 4, 2, dtype=torch.float64)
        he = torch.tensor([0.3, 0.1, 0.2], dtype=torch.float64)
        g = torch.Generator().manual_seed(5)
        x = 1.8 * torch.rand(100, 3, generator=g, dtype=torch.float64) - 0.9
        x = x[x.norm(dim=-1) > 0.2]
        n, valid = normal(planes, heads, x, he, radius=0.5)
        assert torch.all(valid)
        assert torch.allclose(n.norm(dim=-1), torch.ones(len(x), dtype=torch.float64),
                              atol=1e-4)

    def test_degenerate_at_center(self):
        heads = FieldHeads(channels=2).double()
        planes = torch.zeros(6, 4, 4, 2, dtype=torch.float64)
        he = torch.tensor([0.2, 0.2, 0.2], dtype=torch.float64)
        n, valid = normal(planes, heads, torch.zeros(1, 3, dtype=torch.float64),
                          he, radius=0.5)
        assert not valid[0]
        assert torch.all(n[0] == 0)

    def test_against_five_point_stencil(self):
        heads = FieldHeads(channels=2).double()
        for p in heads.parameters():
            torch.nn.init.normal_(p, std=0.3)
        planes = rand_planes(r=4, c=2, seed=7)
        he = torch.tensor([0.2, 0.25, 0.15], dtype=torch.float64)
        g = torch.Generator().manual_seed(8)
        # keep probes clear of bilinear cell edges and the plane seams,
        # where the field has kinks and finite differences disagree
        x = 1.2 * torch.rand(200, 3, generator=g, dtype=torch.float64) - 0.6
        gcoord = (x + 1) * 0.5 * 3
        frac = gcoord - gcoord.floor()
        ok = ((frac > 0.1) & (frac < 0.9)).all(dim=-1) & (x.abs() > 0.05).all(dim=-1)
        x = x[ok]
        assert len(x) > 20
        n, valid = normal(planes, heads, x, he, radius=0.5, eps=1e-3)

        def f(pts):
            return sdf(planes, heads, pts, he, 0.5)

        eps = 1e-3
        grads = torch.zeros_like(x)
        for axis in range(3):
            for k, w in ((-2, 1.0), (-1, -8.0), (1, 8.0), (2, -1.0)):
                probe = x.clone()
                probe[:, axis] += k * eps
                grads[:, axis] += w * f(probe)
            grads[:, axis] /= 12 * eps * he[axis]
        ref = grads / grads.norm(dim=-1, keepdim=True)
        err = (n[valid] - ref[valid]).norm(dim=-1)
        assert torch.all(err < 1e-3)


class TestGradients:
    def test_sdf_grad_wrt_planes(self):
        heads = FieldHeads(channels=2).double()
        for p in heads.parameters():
            torch.nn.init.normal_(p, std=0.3)
        planes = rand_planes(r=4, c=2, seed=3).requires_grad_(True)
        he = torch.tensor([0.2, 0.2, 0.2], dtype=torch.float64)
        g = torch.Generator().manual_seed(4)
        x = 1.6 * torch.rand(5, 3, generator=g, dtype=torch.float64) - 0.8

        assert torch.autograd.gradcheck(
            lambda pl: sdf(pl, heads, x, he, 0.5), (planes,),
            eps=1e-6, atol=1e-8, rtol=1e-3)

    def test_color_grad_wrt_heads(self):
        heads = FieldHeads(channels=2).double()
        for p in heads.parameters():
            torch.nn.init.normal_(p, std=0.3)
        planes = rand_planes(r=4, c=2, seed=9)
        g = torch.Generator().manual_seed(10)
        x = 1.6 * torch.rand(4, 3, generator=g, dtype=torch.float64) - 0.8
        params = list(heads.color_mlp.parameters())

        def run(*ps):
            return color(planes, heads, x)

        assert torch.autograd.gradcheck(run, tuple(params),
                                        eps=1e-6, atol=1e-8, rtol=1e-3)

    def test_hexaplane_module_forward(self):
        hp = HexaPlane(resolution=4, channels=3)
        out = hp(torch.zeros(2, 3))
        assert out.shape == (2, 9)
