"""Per-pixel sample selection from the predictions of two modality models.

Three steps run on detached predictions every batch:

1. confidence masks, label based (probability of the given label) and entity based (one minus the
   normalized prediction entropy)
2. cross-modal enhancement, each modality's mask is refined by its partner's, `F' = F (1 + F_other) / 2`
3. weighting, label-based masks are thresholded per class at the `alpha` quantile and entity-based
   masks are blended towards one by the moderator `gamma`

`alpha` ramps exponentially from 1 down to `alpha0` and `gamma` linearly from 0 up to 1 over the
first `n_s` epochs.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Set, Tuple, Union
import numpy as np
from nlss.utils import exporter, dataclass_from_dict, Offsets, ConfigError, ContractViolation, DataError
from nlss.tensor import Tensor


__all__ = []
export = exporter(__all__)
logger = logging.getLogger("nlss")


@export
@dataclass
class ConfMask:
    """Per-pixel confidence `[B, H, W]` in [0, 1]; `enhanced` marks the cross-modal refinement"""

    values: np.ndarray
    kind: str
    enhanced: bool = False


@export
@dataclass
class WeightMask:
    """Per-pixel loss weights `[B, H, W]` in [0, 1]"""

    values: np.ndarray
    role: str
    flags: Set[str] = field(default_factory=set)

    @classmethod
    def ones_like(cls, labels: np.ndarray, role: str, labeled_only: bool = False) -> "WeightMask":
        """Unit weights, zero at unlabeled pixels when `labeled_only`"""
        values = np.ones(labels.shape, dtype=np.float64)
        if labeled_only:
            values *= labels != Offsets.UNLABELED
        return cls(values, role)


@export
@dataclass
class SelectionSchedule:
    alpha0: float = 0.5
    n_s: int = 24

    def __post_init__(self):
        if not 0.0 < self.alpha0 <= 1.0:
            raise ConfigError(f"alpha0 must lie in (0, 1], got {self.alpha0}")
        if self.n_s < 0:
            raise ConfigError(f"n_s must be >= 0, got {self.n_s}")

    @classmethod
    def from_dict(cls, **kwargs) -> "SelectionSchedule":
        return dataclass_from_dict(cls, kwargs)


def _probs(P: Union[Tensor, np.ndarray]) -> np.ndarray:
    if isinstance(P, Tensor):
        if P.requires_grad:
            raise ContractViolation("confidence masks must be computed from detached predictions")
        return P.data
    return np.asarray(P, dtype=np.float64)


@export
def label_confidence(P: Union[Tensor, np.ndarray], Y: np.ndarray) -> ConfMask:
    """Probability the model assigns to the given label, 0 at unlabeled pixels

    :param P: Detached predictions `[B, C, H, W]`
    :param Y: Label map `[B, H, W]`
    :return: A label-based `ConfMask`
    """
    p = _probs(P)
    Y = np.asarray(Y)
    labeled = Y != Offsets.UNLABELED
    if np.any(Y[labeled] >= p.shape[1]):
        raise DataError(f"label ids must be < {p.shape[1]} or {Offsets.UNLABELED}")
    safe = np.where(labeled, Y, 0).astype(np.int64)
    f = np.take_along_axis(p, safe[:, None], axis=1)[:, 0]
    return ConfMask(np.clip(f * labeled, 0.0, 1.0), "label")


@export
def entity_confidence(P: Union[Tensor, np.ndarray]) -> ConfMask:
    """`1 + sum_c p log p / log C`, with `0 log 0 = 0`; identically 1 when there is a single class"""
    p = _probs(P)
    C = p.shape[1]
    if C == 1:
        return ConfMask(np.ones(p.shape[:1] + p.shape[2:]), "entity")
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    f = 1.0 + plogp.sum(axis=1) / np.log(C)
    return ConfMask(np.clip(f, 0.0, 1.0), "entity")


@export
def enhance(F_d: ConfMask, F_dprime: ConfMask) -> ConfMask:
    """Refine modality d's confidence by its partner's: `F'_d = F_d (1 + F_d') / 2`"""
    if F_d.kind != F_dprime.kind:
        raise ContractViolation(f"cannot enhance a {F_d.kind} mask with a {F_dprime.kind} mask")
    if F_d.values.shape != F_dprime.values.shape:
        raise ContractViolation(f"mask shapes differ: {F_d.values.shape} vs {F_dprime.values.shape}")
    return ConfMask(0.5 * F_d.values * (1.0 + F_dprime.values), F_d.kind, enhanced=True)


@export
def selection_count(alpha: float, n: int) -> int:
    """How many pixels of a class with n labeled pixels get full weight, at least one"""
    return max(1, int(np.floor(alpha * n + 1e-9)))


@export
def threshold_label(Fp: ConfMask, Y: np.ndarray, alpha: float) -> WeightMask:
    """Per-class soft thresholding of the label-based confidence within the batch

    For every class c with N_c labeled pixels the threshold `t_c` is the `max(1, floor(alpha N_c))`-th
    largest confidence among them; weights are `min(1, f / t_c)`.  A class whose threshold is zero
    gets unit weights and the mask is flagged `zero_threshold`.

    :param Fp: Enhanced label-based confidence
    :param Y: Labels `[B, H, W]`
    :param alpha: Selection ratio in (0, 1]
    :return: The label-based `WeightMask`
    """
    if not 0.0 < alpha <= 1.0:
        raise ConfigError(f"alpha must lie in (0, 1], got {alpha}")
    f = Fp.values
    Y = np.asarray(Y)
    W = np.zeros_like(f)
    flags = set()
    for c in np.unique(Y[Y != Offsets.UNLABELED]):
        in_class = Y == c
        scores = f[in_class]
        k = selection_count(alpha, scores.size)
        t = np.partition(scores, scores.size - k)[scores.size - k]
        if t <= 0.0:
            logger.warning("class %d: all %d confidences are zero, using unit weights", c, scores.size)
            flags.add("zero_threshold")
            W[in_class] = 1.0
            continue
        W[in_class] = np.minimum(1.0, scores / t)
    return WeightMask(W, "label", flags)


@export
def weight_entity(Fp_e: ConfMask, gamma: float) -> WeightMask:
    """`(1 - gamma) + gamma f`"""
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError(f"gamma must lie in [0, 1], got {gamma}")
    return WeightMask((1.0 - gamma) + gamma * Fp_e.values, "entity")


@export
def schedule(epoch: int, sched: SelectionSchedule) -> Tuple[float, float]:
    """Selection ratio and moderator for an epoch: `(alpha0 ** r, r)` with `r = min(epoch, n_s) / n_s`"""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    if sched.n_s == 0:
        return sched.alpha0, 1.0
    r = min(epoch, sched.n_s) / sched.n_s
    return float(sched.alpha0 ** r), float(r)


@export
def selection_masks(
    P1: Union[Tensor, np.ndarray], P2: Union[Tensor, np.ndarray], Y: np.ndarray, alpha: float, gamma: float
) -> Dict[str, Dict[int, Union[ConfMask, WeightMask]]]:
    """Run the whole pipeline for both modalities

    :return: `{"F_l": {1: .., 2: ..}, "F_e": .., "Fp_l": .., "Fp_e": .., "W_l": .., "W_e": ..}`
    """
    F_l = {1: label_confidence(P1, Y), 2: label_confidence(P2, Y)}
    F_e = {1: entity_confidence(P1), 2: entity_confidence(P2)}
    Fp_l = {1: enhance(F_l[1], F_l[2]), 2: enhance(F_l[2], F_l[1])}
    Fp_e = {1: enhance(F_e[1], F_e[2]), 2: enhance(F_e[2], F_e[1])}
    W_l = {d: threshold_label(Fp_l[d], Y, alpha) for d in (1, 2)}
    W_e = {d: weight_entity(Fp_e[d], gamma) for d in (1, 2)}
    return {"F_l": F_l, "F_e": F_e, "Fp_l": Fp_l, "Fp_e": Fp_e, "W_l": W_l, "W_e": W_e}
