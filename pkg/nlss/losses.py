"""Weighted segmentation and consistency losses.

All losses are weighted averages: the per-pixel terms are multiplied by a weight mask and divided by
the sum of the weights that take part.  Segmentation terms only see labeled pixels (soft labels are
all-zero at unlabeled pixels); consistency terms see every pixel.  With all weights equal to one they
reduce to the plain cross entropy, Dice and KL losses.
"""
import logging
from typing import NamedTuple, Optional, Union
import numpy as np
from nlss.utils import exporter, ContractViolation, DimensionError
from nlss.tensor import Tensor, clamp_min, log, reduce_sum
from nlss.selection import WeightMask


__all__ = []
export = exporter(__all__)
logger = logging.getLogger("nlss")

LOG_EPS = 1e-12

Weights = Union[WeightMask, np.ndarray, None]


def _weights(W: Weights, Q: Tensor) -> np.ndarray:
    if W is None:
        return np.ones(Q.shape[:1] + Q.shape[2:])
    values = W.values if isinstance(W, WeightMask) else np.asarray(W, dtype=np.float64)
    if values.shape != Q.shape[:1] + Q.shape[2:]:
        raise DimensionError("weights", f"mask {values.shape} does not match prediction {Q.shape}")
    return values


def _soft(Z: np.ndarray, Q: Tensor) -> np.ndarray:
    Z = Z.data if isinstance(Z, Tensor) else np.asarray(Z, dtype=np.float64)
    if Z.shape != Q.shape:
        raise DimensionError("labels", f"soft labels {Z.shape} do not match prediction {Q.shape}")
    return Z


def _degenerate(name: str) -> Tensor:
    logger.warning("%s: all weights are zero, loss defined as 0", name)
    out = Tensor(0.0)
    out.flags.add("degenerate")
    return out


@export
def labeled_pixels(Z: np.ndarray) -> np.ndarray:
    """`[B, H, W]` indicator of pixels whose soft label is not all-zero"""
    return (np.asarray(Z).sum(axis=1) > 0).astype(np.float64)


@export
def ce_loss(Q: Tensor, Z: np.ndarray, W: Weights = None) -> Tensor:
    """Weighted distribution cross entropy `-sum w z log q / sum w` over labeled pixels

    :param Q: Predicted distribution `[B, C, H, W]`
    :param Z: Soft labels, all-zero at unlabeled pixels
    :param W: Per-pixel weights `[B, H, W]`, default ones
    :return: A scalar `Tensor`, flagged `degenerate` when no weight remains
    """
    z = _soft(Z, Q)
    w = _weights(W, Q) * labeled_pixels(z)
    denom = w.sum()
    if denom <= 0:
        return _degenerate("ce_loss")
    coef = z * w[:, None]
    return -reduce_sum(log(clamp_min(Q, LOG_EPS)) * coef) / denom


@export
def dice_loss(Q: Tensor, Z: np.ndarray, W: Weights = None) -> Tensor:
    """`1 - 2 sum w z q / sum w (z + q)` over labeled pixels and all classes jointly"""
    z = _soft(Z, Q)
    w = _weights(W, Q) * labeled_pixels(z)
    wb = w[:, None]
    if not np.any(w > 0):
        return _degenerate("dice_loss")
    intersection = reduce_sum(Q * (z * wb))
    total = reduce_sum(Q * wb) + float((z * wb).sum())
    return 1.0 - 2.0 * intersection / total


@export
def seg_loss(Q: Tensor, Z: np.ndarray, W: Weights = None) -> Tensor:
    ce = ce_loss(Q, Z, W)
    dice = dice_loss(Q, Z, W)
    out = ce + dice
    out.flags |= ce.flags | dice.flags
    return out


@export
def kl_consistency(P: Tensor, Q: Tensor, W_e: Weights = None) -> Tensor:
    """Weighted `KL(P || Q)` averaged over every pixel, P being another modality's detached prediction

    :param P: Detached target distribution
    :param Q: Prediction receiving the gradient
    :param W_e: Entity-based weights
    :return: A scalar `Tensor`
    """
    if isinstance(P, Tensor):
        if P.requires_grad:
            raise ContractViolation("the consistency target must be detached from its graph")
        p = P.data
    else:
        p = np.asarray(P, dtype=np.float64)
    if p.shape != Q.shape:
        raise DimensionError("kl_consistency", f"target {p.shape} does not match prediction {Q.shape}")
    w = _weights(W_e, Q)
    denom = w.sum()
    if denom <= 0:
        return _degenerate("kl_consistency")
    wb = w[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    cross = reduce_sum(log(clamp_min(Q, LOG_EPS)) * (p * wb))
    return (float((plogp * wb).sum()) - cross) / denom


@export
class LossBreakdown(NamedTuple):
    total: Tensor
    seg1: Tensor
    seg2: Tensor
    kl12: Tensor
    kl21: Tensor

    def values(self) -> dict:
        return {name: getattr(self, name).item() for name in self._fields}


@export
def compute_losses(
    Q1: Tensor,
    Q2: Tensor,
    Z: np.ndarray,
    W_l1: Weights = None,
    W_l2: Weights = None,
    W_e1: Weights = None,
    W_e2: Weights = None,
    P1: Optional[Tensor] = None,
    P2: Optional[Tensor] = None,
    consistency_weight: float = 1.0,
) -> LossBreakdown:
    """Both segmentation terms plus `KL(P1 || Q2)` and `KL(P2 || Q1)`

    `P_d` defaults to `Q_d.detach()`.  The KL term that targets modality d' is weighted by modality d's
    entity-based mask, since that mask says how far modality d can be trusted to supervise the other.
    """
    P1 = Q1.detach() if P1 is None else P1
    P2 = Q2.detach() if P2 is None else P2
    seg1 = seg_loss(Q1, Z, W_l1)
    seg2 = seg_loss(Q2, Z, W_l2)
    kl12 = kl_consistency(P1, Q2, W_e1)
    kl21 = kl_consistency(P2, Q1, W_e2)
    total = seg1 + seg2 + (kl12 + kl21) * consistency_weight
    total.flags |= seg1.flags | seg2.flags | kl12.flags | kl21.flags
    return LossBreakdown(total, seg1, seg2, kl12, kl21)


@export
def total_loss(
    Q1: Tensor,
    Q2: Tensor,
    Z: np.ndarray,
    W_l1: Weights = None,
    W_l2: Weights = None,
    W_e1: Weights = None,
    W_e2: Weights = None,
    consistency_weight: float = 1.0,
) -> Tensor:
    return compute_losses(Q1, Q2, Z, W_l1, W_l2, W_e1, W_e2, consistency_weight=consistency_weight).total
