"""Value transform, soft labels, focal/regression losses and loss balancing.

All functions accept torch tensors (autograd-friendly) and also numpy arrays
or Python scalars, which are evaluated in float64 and returned as numpy.
Reductions are means over every voxel, accumulated in float64 when the input
is float64 and in the input dtype otherwise.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

log = logging.getLogger(__name__)

PRED_EPS = 1e-7


@dataclass(frozen=True)
class TransformParams:
    shift: float = 64.0
    scale: float = 6.0
    epsilon_guard: float = 1e-6

    def __post_init__(self):
        if self.shift < 0 or self.scale <= 0 or self.epsilon_guard <= 0:
            raise ValueError(f"invalid transform params {self}")


@dataclass(frozen=True)
class SoftLabelParams:
    mu: float = 6.0
    alpha: float = 20.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")


@dataclass(frozen=True)
class FocalParams:
    gamma: float = 2.0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")


@dataclass(frozen=True)
class LossState:
    """Epoch-level loss bookkeeping.

    ``rho_s``/``rho_r`` are the epoch-mean segmentation and regression losses
    of epoch ``epoch`` (``None`` before the first epoch finished) and
    ``seg_weight`` is the multiplier for the segmentation loss in the next
    epoch.
    """

    epoch: int = 0
    rho_s: float | None = None
    rho_r: float | None = None
    seg_weight: float = 1.0
    warnings: tuple[str, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "rho_s": self.rho_s,
            "rho_r": self.rho_r,
            "seg_weight": self.seg_weight,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossState":
        return cls(
            epoch=int(d["epoch"]),
            rho_s=d["rho_s"],
            rho_r=d["rho_r"],
            seg_weight=float(d["seg_weight"]),
            warnings=tuple(d.get("warnings", ())),
        )


def check_threshold(h: float) -> float:
    if not 0.0 <= h <= 1.0:
        raise ValueError(f"threshold h={h} outside [0, 1]")
    return float(h)


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x, False
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), True


def _out(t: torch.Tensor, was_numpy: bool):
    if not was_numpy:
        return t
    arr = t.detach().numpy()
    return arr.item() if arr.ndim == 0 else arr


def forward_transform(v, params: TransformParams = TransformParams()):
    """ln(v - shift) / scale, with the log argument floored at ``epsilon_guard``."""
    t, np_in = _as_tensor(v)
    arg = torch.clamp(t - params.shift, min=params.epsilon_guard)
    return _out(torch.log(arg) / params.scale, np_in)


def inverse_transform(y, params: TransformParams = TransformParams()):
    t, np_in = _as_tensor(y)
    return _out(torch.exp(params.scale * t) + params.shift, np_in)


def soft_label(v, params: SoftLabelParams = SoftLabelParams()):
    """Sigmoid step applied to the log ADC value log2(v + 1)."""
    t, np_in = _as_tensor(v)
    logv = torch.log2(t + 1.0)
    return _out(torch.sigmoid(params.alpha * (logv - params.mu)), np_in)


def _check_shapes(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def focal_loss(pred, labels, params: FocalParams = FocalParams(), eps: float = PRED_EPS):
    """Mean base-2 focal loss between segmentation output and soft labels."""
    p, np_in = _as_tensor(pred)
    lab, _ = _as_tensor(labels)
    _check_shapes(p, lab)
    lab = lab.to(p.dtype)
    p = torch.clamp(p, eps, 1.0 - eps)
    g = params.gamma
    pos = -lab * torch.log2(p) * (1.0 - p) ** g
    neg = -(1.0 - lab) * torch.log2(1.0 - p) * p**g
    return _out((pos + neg).mean(), np_in)


def combine_output(reg_out, seg_out, h: float = 0.5, params: TransformParams = TransformParams()):
    """Gate the inverse-transformed regression output by the segmentation map.

    The gate itself carries no gradient; gradient reaches ``reg_out`` only on
    voxels where ``seg_out >= h``.
    """
    h = check_threshold(h)
    r, np_in = _as_tensor(reg_out)
    s, _ = _as_tensor(seg_out)
    _check_shapes(r, s)
    gate = (s >= h).detach()
    # evaluate exp only on passed voxels so gated-off values cannot overflow into NaN grads
    safe = torch.where(gate, r, torch.zeros_like(r))
    val = torch.exp(params.scale * safe) + params.shift
    return _out(torch.where(gate, val, torch.zeros_like(val)), np_in)


def combine_output_without_transform(reg_out, seg_out, h: float = 0.5):
    h = check_threshold(h)
    r, np_in = _as_tensor(reg_out)
    s, _ = _as_tensor(seg_out)
    _check_shapes(r, s)
    gate = (s >= h).detach()
    return _out(torch.where(gate, r, torch.zeros_like(r)), np_in)


def regression_loss(combined, truth):
    c, np_in = _as_tensor(combined)
    t, _ = _as_tensor(truth)
    _check_shapes(c, t)
    return _out(((c - t.to(c.dtype)) ** 2).mean(), np_in)


def update_loss_weight(state: LossState) -> LossState:
    """Derive the next epoch's segmentation weight from the recorded epoch means.

    ``state`` must carry the epoch-mean losses ``rho_s``/``rho_r`` of epoch
    ``state.epoch``. Without history the weight stays at its initial value 1.
    """
    rho_s, rho_r = state.rho_s, state.rho_r
    warnings = state.warnings
    if rho_s is None or rho_r is None:
        weight = state.seg_weight
    elif rho_s > 0 and math.isfinite(rho_s) and math.isfinite(rho_r):
        weight = rho_r / rho_s
    else:
        weight = state.seg_weight
        msg = f"epoch {state.epoch}: rho_s={rho_s}, keeping seg_weight={weight}"
        log.warning(msg)
        warnings = warnings + (msg,)
    return replace(state, epoch=state.epoch + 1, seg_weight=float(weight), warnings=warnings)
