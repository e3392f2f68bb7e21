"""Training objectives.

Text cross-entropy, mask losses (BCE + Dice), box losses (L1 + GIoU),
and the similarity losses (JS + MSE) used when fine-tuning against a
detached reference pass, plus the two compositions: the end-to-end
total txt + mask + bbox and the fine-tune total that adds sim.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .decoders import BBox, MaskLogits

DICE_EPS = 1e-6
_LOG_FLOOR = 1e-300


@dataclass(frozen=True)
class LossWeights:
    bce: float = 2.0
    dice: float = 0.5
    l1: float = 1.0
    giou: float = 1.0
    js: float = 2.0
    mse: float = 1.0

    def __post_init__(self):
        if any(v < 0 for v in vars(self).values()):
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossReport:
    """Named scalar tensors; fields absent from a mode stay None."""

    txt: Tensor | None = None
    bce: Tensor | None = None
    dice: Tensor | None = None
    l1: Tensor | None = None
    giou: Tensor | None = None
    js: Tensor | None = None
    mse: Tensor | None = None
    mask: Tensor | None = None
    bbox: Tensor | None = None
    sim: Tensor | None = None
    total: Tensor | None = None

    def scalars(self) -> dict[str, float]:
        return {
            k: float(v.data) for k, v in vars(self).items() if v is not None
        }


def _as_scalar_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(float(x))


def text_ce_loss(logits: Tensor, target_ids, mask=None) -> Tensor:
    """Mean negative log-likelihood of targets under row-wise softmax.

    ``mask`` (optional, length T, truthy = counted) drops padding
    positions; rejecting the all-masked case keeps the mean defined.
    """
    target_ids = np.asarray(target_ids, dtype=np.intp)
    T, V = logits.shape
    if target_ids.shape != (T,):
        raise ShapeError(f"text_ce_loss: {T} logit rows vs targets {target_ids.shape}")
    if target_ids.size and (target_ids.min() < 0 or target_ids.max() >= V):
        raise ValueError("text_ce_loss: target id out of vocabulary")
    if mask is None:
        weights = np.ones(T)
    else:
        weights = np.asarray(mask, dtype=np.float64)
        if weights.shape != (T,):
            raise ShapeError(f"text_ce_loss: mask shape {weights.shape} != ({T},)")
    count = weights.sum()
    if count == 0:
        raise ValueError("text_ce_loss: all positions masked")
    m = Tensor(logits.data.max(axis=1, keepdims=True))  # constant shift
    lse = ad.log(ad.exp(logits - m).sum(axis=1, keepdims=True)) + m
    onehot = np.zeros((T, V))
    onehot[np.arange(T), target_ids] = 1.0
    picked = (logits * onehot).sum(axis=1, keepdims=True)
    nll = (lse - picked).reshape(T)
    return (nll * weights).sum() / float(count)


def mask_loss(pred: MaskLogits, gt: np.ndarray, w: LossWeights) -> tuple[Tensor, Tensor, Tensor]:
    """(bce, dice, mask) with mask = w.bce*bce + w.dice*dice."""
    gt = np.asarray(gt, dtype=np.float64)
    if pred.grid.shape != gt.shape:
        raise ShapeError(f"mask_loss: pred {pred.grid.shape} vs gt {gt.shape}")
    z = pred.grid
    # BCE(sigmoid(z), y) = softplus(z) - z*y, stable for any logit magnitude
    bce = (ad.softplus(z) - z * gt).mean()
    p = ad.sigmoid(z)
    inter = (p * gt).sum()
    denom = p.sum() + float(gt.sum())
    dice = 1.0 - (inter * 2.0 + DICE_EPS) / (denom + DICE_EPS)
    total = bce * w.bce + dice * w.dice
    return bce, dice, total


def _box_corners(box: BBox) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    return tuple(_as_scalar_tensor(v) for v in (box.x1, box.y1, box.x2, box.y2))


def bbox_loss(pred: BBox, gt: BBox, w: LossWeights) -> tuple[Tensor, Tensor, Tensor]:
    """(l1, giou_loss, bbox) with bbox = w.l1*l1 + w.giou*giou_loss."""
    pred.validate()
    gt.validate()
    px1, py1, px2, py2 = _box_corners(pred)
    gx1, gy1, gx2, gy2 = _box_corners(gt)
    zero = Tensor(0.0)

    l1 = (
        ad.absolute(px1 - gx1) + ad.absolute(py1 - gy1)
        + ad.absolute(px2 - gx2) + ad.absolute(py2 - gy2)
    ) * 0.25

    iw = ad.maximum(ad.minimum(px2, gx2) - ad.maximum(px1, gx1), zero)
    ih = ad.maximum(ad.minimum(py2, gy2) - ad.maximum(py1, gy1), zero)
    inter = iw * ih
    union = (px2 - px1) * (py2 - py1) + (gx2 - gx1) * (gy2 - gy1) - inter
    hull = (ad.maximum(px2, gx2) - ad.minimum(px1, gx1)) * (
        ad.maximum(py2, gy2) - ad.minimum(py1, gy1)
    )
    # tiny floor keeps degenerate (zero-area) pairs defined
    iou = inter / (union + 1e-12)
    giou = iou - (hull - union) / (hull + 1e-12)
    giou_loss = 1.0 - giou
    total = l1 * w.l1 + giou_loss * w.giou
    return l1, giou_loss, total


def _log_clamped(p: Tensor) -> Tensor:
    return ad.log(ad.maximum(p, Tensor(_LOG_FLOOR)))


def sim_loss(sim_pred: Tensor, sim_ref: Tensor, w: LossWeights) -> tuple[Tensor, Tensor, Tensor]:
    """(js, mse, sim); the reference map is detached before use."""
    if sim_pred.shape != sim_ref.shape or sim_pred.data.ndim != 1:
        raise ShapeError(
            f"sim_loss: shapes {sim_pred.shape} vs {sim_ref.shape} (need equal 1-D)"
        )
    ref = sim_ref.detach()
    p = ad.softmax(sim_pred)
    q = ad.softmax(ref)
    mmid = (p + q) * 0.5
    logm = _log_clamped(mmid)
    js = ((p * (_log_clamped(p) - logm)).sum() + (q * (_log_clamped(q) - logm)).sum()) * 0.5
    diff = sim_pred - ref
    mse = (diff * diff).mean()
    total = js * w.js + mse * w.mse
    return js, mse, total


def compose_end(txt: Tensor, mask_total: Tensor, bbox_total: Tensor, **parts) -> LossReport:
    """Total = txt + mask + bbox; extra named parts are carried through."""
    for name, v in (("txt", txt), ("mask", mask_total), ("bbox", bbox_total)):
        if v is None:
            raise ValueError(f"compose_end: missing constituent {name}")
    total = txt + mask_total + bbox_total
    return LossReport(txt=txt, mask=mask_total, bbox=bbox_total, total=total, **parts)


def compose_ft(end: LossReport, sim_total: Tensor, **parts) -> LossReport:
    """Fine-tune total = end-to-end total + sim."""
    if end.total is None:
        raise ValueError("compose_ft: end report lacks a total")
    if sim_total is None:
        raise ValueError("compose_ft: missing constituent sim")
    return replace(end, sim=sim_total, total=end.total + sim_total, **parts)
