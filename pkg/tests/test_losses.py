import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bcae.losses import (
    FocalParams,
    LossState,
    TransformParams,
    combine_output,
    combine_output_without_transform,
    focal_loss,
    forward_transform,
    inverse_transform,
    regression_loss,
    soft_label,
    update_loss_weight,
)


def bce2(pred, lab, eps=1e-7):
    # scalar reference, written out voxel by voxel
    out = 0.0
    for p, l in zip(np.ravel(pred), np.ravel(lab)):
        p = min(max(p, eps), 1 - eps)
        out += -(l * math.log2(p) + (1 - l) * math.log2(1 - p))
    return out / np.size(pred)


def test_transform_anchor_values():
    assert forward_transform(65) == 0.0
    assert forward_transform(64 + math.e**6) == pytest.approx(1.0, abs=1e-12)
    assert inverse_transform(0.0) == 65.0


def test_transform_guard_is_finite():
    vals = forward_transform(np.array([0.0, 10.0, 64.0]))
    assert np.all(np.isfinite(vals))
    assert vals[0] == pytest.approx(math.log(1e-6) / 6)


def test_transform_roundtrip_integers():
    v = np.arange(65, 1024, dtype=np.float64)
    back = inverse_transform(forward_transform(v))
    assert np.max(np.abs(back - v) / v) < 1e-6


@given(st.floats(65.0, 1e4))
def test_transform_monotone_roundtrip(v):
    assert inverse_transform(forward_transform(v)) == pytest.approx(v, rel=1e-9)
    assert forward_transform(v + 1.0) > forward_transform(v)


def test_transform_custom_params():
    p = TransformParams(shift=10.0, scale=2.0)
    assert forward_transform(11.0, p) == 0.0
    assert inverse_transform(1.0, p) == pytest.approx(10 + math.e**2)


def test_soft_label_midpoint_and_tails():
    assert soft_label(63) == pytest.approx(0.5, abs=1e-9)
    assert soft_label(0) < 1e-50
    assert soft_label(1023) == 1.0
    assert soft_label(65) == pytest.approx(1 / (1 + math.exp(-20 * (math.log2(66) - 6))), rel=1e-12)


@given(st.floats(0, 1023), st.floats(0, 1023))
def test_soft_label_monotone(a, b):
    if a < b:
        assert soft_label(a) <= soft_label(b)


def test_soft_label_tensor_matches_numpy():
    v = torch.arange(0, 1024, dtype=torch.float64)
    assert np.allclose(soft_label(v).numpy(), soft_label(v.numpy()), rtol=0, atol=1e-15)


def test_focal_single_voxel_value():
    # (1 - 0.5)^2 * -log2(0.5) = 0.25
    assert focal_loss(np.array([0.5]), np.array([1.0]), FocalParams(2.0)) == 0.25


def test_focal_gamma_zero_is_bce_on_100_tensors():
    rng = np.random.default_rng(0)
    for _ in range(100):
        shape = tuple(rng.integers(1, 5, size=3))
        p = rng.uniform(0, 1, shape)
        l = rng.uniform(0, 1, shape)
        assert abs(focal_loss(p, l, FocalParams(0.0)) - bce2(p, l)) < 1e-6


def test_focal_clamps_predictions():
    val = focal_loss(np.array([0.0, 1.0]), np.array([1.0, 0.0]))
    assert np.isfinite(val)
    expected = -math.log2(1e-7) * (1 - 1e-7) ** 2
    assert val == pytest.approx(expected, rel=1e-9)


@given(arrays(np.float64, (2, 3), elements=st.floats(0, 1)), arrays(np.float64, (2, 3), elements=st.floats(0, 1)))
def test_focal_nonnegative_and_below_bce(p, l):
    f = focal_loss(p, l)
    assert f >= 0
    assert f <= focal_loss(p, l, FocalParams(0.0)) + 1e-12


def test_focal_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        focal_loss(np.zeros(3), np.zeros(4))


def test_combine_gate_boundary():
    reg = np.array([0.0, 0.0, 1.0])
    seg = np.array([0.5, 0.4999, 1.0])
    out = combine_output(reg, seg, 0.5)
    assert out[0] == 65.0 and out[1] == 0.0
    assert out[2] == pytest.approx(64 + math.e**6)


def test_combine_without_transform_passes_raw():
    out = combine_output_without_transform(np.array([3.5, 7.0]), np.array([0.9, 0.1]), 0.5)
    assert out.tolist() == [3.5, 0.0]


@pytest.mark.parametrize("h", [-0.1, 1.5])
def test_combine_rejects_threshold(h):
    with pytest.raises(ValueError):
        combine_output(np.zeros(2), np.zeros(2), h)


def test_combine_no_nan_grad_on_huge_gated_values():
    reg = torch.tensor([500.0, 0.1], dtype=torch.float64, requires_grad=True)
    seg = torch.tensor([0.1, 0.9], dtype=torch.float64, requires_grad=True)
    regression_loss(combine_output(reg, seg), torch.tensor([0.0, 70.0], dtype=torch.float64)).backward()
    assert torch.all(torch.isfinite(reg.grad))
    assert reg.grad[0] == 0
    # gate is a hard threshold: no gradient reaches the segmentation head
    assert seg.grad is None or torch.all(seg.grad == 0)


def test_regression_loss_value():
    assert regression_loss(np.array([1.0, 3.0]), np.array([0.0, 0.0])) == 5.0


def test_update_weight_ratio():
    s = update_loss_weight(LossState(epoch=3, rho_s=0.25, rho_r=100.0, seg_weight=7.0))
    assert s.seg_weight == 400.0 and s.epoch == 4 and not s.warnings


def test_update_weight_first_epoch_keeps_one():
    s = update_loss_weight(LossState())
    assert s.seg_weight == 1.0 and s.epoch == 1


def test_update_weight_zero_seg_loss_warns():
    s = update_loss_weight(LossState(epoch=2, rho_s=0.0, rho_r=5.0, seg_weight=3.0))
    assert s.seg_weight == 3.0
    assert len(s.warnings) == 1 and "rho_s" in s.warnings[0]


@settings(max_examples=50)
@given(st.floats(1e-6, 1e3), st.floats(0, 1e6))
def test_loss_state_roundtrip(rho_s, rho_r):
    s = update_loss_weight(LossState(rho_s=rho_s, rho_r=rho_r))
    assert LossState.from_dict(s.to_dict()) == s
    assert s.seg_weight == pytest.approx(rho_r / rho_s)


def _fd_check(fn, x, h=1e-6):
    x = x.clone().requires_grad_(True)
    fn(x).backward()
    num = torch.zeros_like(x)
    flat = x.detach().clone().view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = fn(flat.view_as(x)).item()
        flat[i] = old - h
        dn = fn(flat.view_as(x)).item()
        flat[i] = old
        num.view(-1)[i] = (up - dn) / (2 * h)
    return x.grad, num


def test_focal_gradient_matches_finite_differences():
    g = torch.Generator().manual_seed(0)
    p = torch.rand(4, 4, 4, generator=g, dtype=torch.float64) * 0.9 + 0.05
    lab = torch.rand(4, 4, 4, generator=g, dtype=torch.float64)
    ana, num = _fd_check(lambda x: focal_loss(x, lab), p)
    assert (ana - num).norm() / num.norm() < 1e-4


def test_regression_gradient_matches_finite_differences():
    g = torch.Generator().manual_seed(1)
    reg = torch.rand(4, 4, 4, generator=g, dtype=torch.float64)
    seg = torch.rand(4, 4, 4, generator=g, dtype=torch.float64)
    truth = torch.rand(4, 4, 4, generator=g, dtype=torch.float64) * 900 + 65
    ana, num = _fd_check(lambda x: regression_loss(combine_output(x, seg), truth), reg)
    assert (ana - num).norm() / num.norm() < 1e-4
