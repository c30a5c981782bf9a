"""Two-branch extractor: pyramid alignment, attention normalization, capacity."""

import math

import pytest
import torch

from sparsedc.twobranch import (
    GlobalBranch,
    LocalBranch,
    SpatialReductionAttention,
    parameter_count,
)


def pyramid_shapes(h, w, widths):
    return [(widths[n], math.ceil(h / 2**n), math.ceil(w / 2**n)) for n in range(4)]


@pytest.mark.parametrize("h,w", [(48, 64), (37, 23), (228, 304)])
def test_local_pyramid_shapes(h, w):
    torch.manual_seed(0)
    branch = LocalBranch(8, (8, 12, 16, 20, 24), (8, 8, 12, 16))
    levels = branch(torch.rand(1, 8, h, w))
    assert len(levels) == 4
    for level, (c, lh, lw) in zip(levels, pyramid_shapes(h, w, (8, 8, 12, 16))):
        assert level.shape == (1, c, lh, lw)


@pytest.mark.parametrize("h,w", [(48, 64), (37, 23)])
def test_global_pyramid_matches_local_geometry(h, w):
    torch.manual_seed(0)
    local = LocalBranch(8, (8, 12, 16, 20, 24), (8, 8, 12, 16))
    glob = GlobalBranch(
        8, dims=(8, 12, 16, 20), depths=(1, 1, 1, 1), heads=(1, 2, 2, 4),
        sr_ratios=(4, 2, 2, 1), pyramid_widths=(8, 8, 12, 16),
    )
    x = torch.rand(1, 8, h, w)
    for a, b in zip(local(x), glob(x)):
        assert a.shape == b.shape


def test_global_branch_has_fewer_parameters_than_local():
    local = LocalBranch()
    glob = GlobalBranch()
    assert parameter_count(glob) < parameter_count(local)


def test_attention_rows_sum_to_one():
    torch.manual_seed(1)
    attn = SpatialReductionAttention(16, heads=2, sr_ratio=2)
    attn.keep_attn = True
    x = torch.rand(2, 6 * 8, 16)
    attn(x, 6, 8)
    weights = attn.last_attn
    assert weights is not None
    assert weights.shape[:2] == (2, 2)  # batch, heads
    sums = weights.sum(dim=-1)
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)


def test_attention_rejects_indivisible_heads():
    with pytest.raises(ValueError):
        SpatialReductionAttention(10, heads=3)


def test_spatial_reduction_shrinks_key_count():
    torch.manual_seed(2)
    attn = SpatialReductionAttention(8, heads=1, sr_ratio=4)
    attn.keep_attn = True
    attn(torch.rand(1, 8 * 12, 8), 8, 12)
    n_query, n_key = attn.last_attn.shape[-2:]
    assert n_query == 96
    assert n_key == 6  # ceil(8/4) * ceil(12/4)


def test_gradients_flow_to_both_branch_inputs():
    torch.manual_seed(3)
    local = LocalBranch(8, (8, 12, 16, 20, 24), (8, 8, 12, 16))
    glob = GlobalBranch(
        8, dims=(8, 12, 16, 20), depths=(1, 1, 1, 1), heads=(1, 2, 2, 4),
        sr_ratios=(4, 2, 2, 1), pyramid_widths=(8, 8, 12, 16),
    )
    x = torch.rand(1, 8, 24, 32, requires_grad=True)
    (local(x)[0].sum() + glob(x)[0].sum()).backward()
    assert x.grad is not None
    assert x.grad.abs().sum() > 0


def test_local_branch_validates_stage_counts():
    with pytest.raises(ValueError):
        LocalBranch(8, (8, 12, 16), (8, 8, 12, 16))
    with pytest.raises(ValueError):
        GlobalBranch(8, dims=(8, 12, 16))
