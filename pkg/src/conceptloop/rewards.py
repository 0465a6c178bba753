"""Unified reward: format + mask + meta, with ablation switches."""

from __future__ import annotations

from dataclasses import asdict, dataclass

from . import template
from .geometry import BoxN, MaskGrid, box_iou, mask_iou

ABLATIONS = ("all", "w/o meta", "w/o box & meta", "w/o mask")


@dataclass(frozen=True)
class RewardConfig:
    """Component weights; an ablation zeroes the matching component."""

    w_format: float = 1.0
    w_mask: float = 1.0
    w_meta: float = 1.0
    theta: float = 0.5

    @classmethod
    def ablation(cls, name: str, theta: float = 0.5) -> "RewardConfig":
        if name == "all":
            return cls(theta=theta)
        # the meta reward is the only box-derived term here, so both names coincide
        if name in ("w/o meta", "w/o box & meta"):
            return cls(w_meta=0.0, theta=theta)
        if name == "w/o mask":
            return cls(w_mask=0.0, theta=theta)
        raise ValueError(f"unknown reward ablation {name!r}; choose from {ABLATIONS}")


@dataclass(frozen=True)
class RewardBreakdown:
    r_format: float
    r_mask: float
    r_meta: float
    r_uni: float

    def as_dict(self) -> dict:
        return asdict(self)


def mask_reward(pred: MaskGrid, gt: MaskGrid, theta: float = 0.5) -> float:
    return mask_iou(pred, gt, theta)


def meta_reward(p_box: BoxN, gt_box: BoxN, p_check: BoxN, gt_check: BoxN | None) -> float:
    """Target-box IoU times proxy-check IoU; with no proxy the check factor is 1."""
    check = 1.0 if gt_check is None else box_iou(p_check, gt_check)
    return box_iou(p_box, gt_box) * check


def unified_reward(text: str, gt_box: BoxN, gt_check: BoxN | None, gt_mask: MaskGrid,
                   pred_mask: MaskGrid | None, cfg: RewardConfig = RewardConfig()) -> RewardBreakdown:
    """Score one trajectory.  Unparseable text earns nothing."""
    outcome = template.parse(text)
    if not outcome.ok:
        return RewardBreakdown(0.0, 0.0, 0.0, 0.0)
    r = outcome.response
    r_format = cfg.w_format * 1.0
    r_mask = cfg.w_mask * mask_reward(pred_mask, gt_mask, cfg.theta) if cfg.w_mask else 0.0
    r_meta = cfg.w_meta * meta_reward(r.bbox, gt_box, r.check, gt_check) if cfg.w_meta else 0.0
    return RewardBreakdown(r_format, r_mask, r_meta, r_format + r_mask + r_meta)
