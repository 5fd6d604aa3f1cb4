"""Detector distillation losses, frozen-LUT re-id distillation, and the joint objective."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .oim import LookupTable, OimConfig, init_lut, read_lut
from .psmodel import Conv

KD_REID_LAMBDA_OIM = 0.1


class KdMode(str, Enum):
    NONE = "NONE"
    KD_DET = "KD_DET"
    KD_REID = "KD_REID"
    BOTH = "BOTH"

    @property
    def uses_det(self) -> bool:
        return self in (KdMode.KD_DET, KdMode.BOTH)

    @property
    def uses_reid(self) -> bool:
        return self in (KdMode.KD_REID, KdMode.BOTH)


@dataclass
class KdDetConfig:
    mu: float = 0.5
    gamma: float = 0.5
    lambda_hint: float = 0.5
    temperature: float = 10.0
    margin: float = 0.0
    # a plain sum over a whole feature map outweighs every other term by ~1000x at this scale
    hint_reduction: str = "mean"
    mu_rpn: float | None = None  # per-head override; defaults to mu

    def __post_init__(self):
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError(f"mu must lie in [0, 1], got {self.mu}")
        if self.mu_rpn is not None and not 0.0 <= self.mu_rpn <= 1.0:
            raise ValueError(f"mu_rpn must lie in [0, 1], got {self.mu_rpn}")
        if self.gamma < 0 or self.lambda_hint < 0 or self.margin < 0:
            raise ValueError("gamma, lambda_hint and margin must be non-negative")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.hint_reduction not in ("sum", "mean"):
            raise ValueError(f"hint_reduction must be 'sum' or 'mean', got {self.hint_reduction!r}")


@dataclass
class TeacherOutputs:
    """Teacher signals for one batch; computed under no_grad."""
    features: torch.Tensor
    rpn_logits: torch.Tensor  # (B*N, 2)
    rpn_deltas: torch.Tensor  # (B*N, 4)
    rcn_logits: torch.Tensor  # on the student's sampled regions
    rcn_deltas: torch.Tensor


@torch.no_grad()
def teacher_outputs(teacher, images: torch.Tensor, rois: list[np.ndarray]) -> TeacherOutputs:
    feats = teacher.backbone_forward(images)
    logits, deltas = teacher.rpn_forward(feats)
    rl, rd, _ = teacher.rcn_forward(feats, rois)
    return TeacherOutputs(feats, logits.reshape(-1, 2), deltas.reshape(-1, 4), rl, rd)


class AdaptationLayer(nn.Module):
    """1x1 convolution from student base channels to teacher base channels."""

    def __init__(self, student_channels: int, teacher_channels: int, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(int(seed) + 7919)
        self.conv = Conv(gen, student_channels, teacher_channels, k=1)

    def forward(self, x):
        return self.conv(x)


def hint_loss(adapted: torch.Tensor, teacher_feats: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """Squared L2 distance between adapted student features and teacher features."""
    if adapted.shape != teacher_feats.shape:
        raise nx.ShapeError(f"hint_loss: adapted student features {tuple(adapted.shape)} vs "
                            f"teacher features {tuple(teacher_feats.shape)}")
    sq = nx.squared_l2(nx.subtract(adapted, teacher_feats.detach()))
    return sq / adapted.numel() if reduction == "mean" else sq


def soft_cls_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor,
                  temperature: float = 10.0) -> torch.Tensor:
    """-sum P_t log P_s with both distributions softened by ``temperature``, averaged over rows."""
    if student_logits.shape != teacher_logits.shape:
        raise nx.ShapeError(f"soft_cls_loss: student {tuple(student_logits.shape)} vs "
                            f"teacher {tuple(teacher_logits.shape)}")
    if student_logits.shape[0] == 0:
        return student_logits.sum() * 0.0
    p_t = nx.softmax(teacher_logits.detach(), dim=1, temperature=temperature)
    log_p_s = nx.log_softmax(student_logits, dim=1, temperature=temperature)
    return -nx.mean(nx.sum(nx.multiply(p_t, log_p_s), dim=1))


def bounded_reg_loss(student: torch.Tensor, teacher: torch.Tensor, target: torch.Tensor,
                     margin: float = 0.0) -> torch.Tensor:
    """Teacher-bounded L2 regression over positive rows.

    A row contributes its squared error only while that error plus ``margin``
    still exceeds the teacher's squared error on the same row.
    """
    if not (student.shape == teacher.shape == target.shape):
        raise nx.ShapeError(f"bounded_reg_loss: shapes {tuple(student.shape)}, {tuple(teacher.shape)}, "
                            f"{tuple(target.shape)}")
    if student.shape[0] == 0:
        return student.sum() * 0.0
    err_s = nx.sum(nx.multiply(student - target, student - target), dim=1)
    diff_t = (teacher - target).detach()
    err_t = nx.sum(nx.multiply(diff_t, diff_t), dim=1)
    gate = ((err_s.detach() + margin) > err_t).to(student.dtype)
    return nx.mean(nx.multiply(gate, err_s))


def _value(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def combined_cls_loss(gt_loss, teacher_loss, mu: float):
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"mu must lie in [0, 1], got {mu}")
    if _value(gt_loss) < 0 or _value(teacher_loss) < 0:
        raise ValueError("classification losses must be non-negative")
    return mu * gt_loss + (1.0 - mu) * teacher_loss


def combined_reg_loss(gt_loss, teacher_loss, gamma: float):
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    if _value(gt_loss) < 0 or _value(teacher_loss) < 0:
        raise ValueError("regression losses must be non-negative")
    return gt_loss + gamma * teacher_loss


def total_objective(det_losses, hint=None, oim=None, lambda_hint: float = 0.5,
                    lambda_oim: float = 1.0):
    """rpn_cls + rpn_reg + rcn_cls + rcn_reg + lambda_hint * hint + lambda_oim * oim.

    ``det_losses`` are either pure ground-truth losses or their distillation
    combinations; ``hint`` is None when detector distillation is off.
    """
    total = det_losses[0] + det_losses[1] + det_losses[2] + det_losses[3]
    if hint is not None:
        total = total + lambda_hint * hint
    if oim is not None and lambda_oim:
        total = total + lambda_oim * oim
    return total


def kd_reid_attach(oim_cfg: OimConfig, lut_source, lambda_oim: float | None = None):
    """Frozen copy of a teacher LUT for a student, plus the student's OIM config.

    ``lut_source`` is a LUT file path or a LookupTable. The returned config
    carries lambda_oim = 0.1 unless ``lambda_oim`` overrides it.
    """
    teacher = lut_source if isinstance(lut_source, LookupTable) else read_lut(lut_source)
    if teacher.dim != oim_cfg.embed_dim or teacher.num_labeled != oim_cfg.num_labeled:
        raise ValueError(f"teacher LUT is D={teacher.dim}, P={teacher.num_labeled}; student expects "
                         f"D={oim_cfg.embed_dim}, P={oim_cfg.num_labeled} (same embedding size and "
                         f"labeled identity set required)")
    lut = init_lut(oim_cfg.embed_dim, oim_cfg.num_labeled, mode="copy", source=teacher)
    cfg = OimConfig(**{**oim_cfg.__dict__,
                       "lambda_oim": KD_REID_LAMBDA_OIM if lambda_oim is None else lambda_oim})
    return lut, cfg
