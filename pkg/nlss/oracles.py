"""Closed-form checks of the numerical core, run by `nlss selftest`.

Every oracle yields `(label, got, expected, tol)` tuples; an oracle that raises counts as failed.
"""
import math
import logging
from typing import Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple
import numpy as np
from nlss.utils import exporter, optional_params, register, one_hot
from nlss.tensor import Tensor, conv2d, gradcheck, reduce_sum, relu, softmax
from nlss.layers import Module
from nlss.models import MiniUNetConfig, FusionSpec, ModelPair
from nlss.losses import ce_loss, dice_loss, seg_loss, kl_consistency, compute_losses
from nlss.selection import (
    ConfMask,
    SelectionSchedule,
    enhance,
    entity_confidence,
    schedule,
    selection_masks,
    threshold_label,
    weight_entity,
)
from nlss.smoothing import SmoothingParams, gaussian_kernel, smooth, spatial_mask, temporal_mask
from nlss.confusion import ConfusionMatrix
from nlss.optz import Adam, ReduceLROnPlateauScheduler


__all__ = []
export = exporter(__all__)
logger = logging.getLogger("nlss")

ORACLES: Dict[str, Callable] = {}

Check = Tuple[str, object, object, float]


@export
@optional_params
def register_oracle(fn, name=None):
    return register(fn, ORACLES, name, "oracle")


@export
class OracleResult(NamedTuple):
    name: str
    passed: bool
    detail: str


def _prob(values: Sequence[float]) -> Tensor:
    """A one-pixel `[1, C, 1, 1]` distribution"""
    return Tensor(np.asarray(values, dtype=np.float64).reshape(1, -1, 1, 1))


@register_oracle(name="tensor-ops")
def tensor_ops() -> Iterable[Check]:
    yield "relu", relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0], 0.0
    yield "softmax", softmax(Tensor([[0.0, 0.0]]), axis=1).data, [[0.5, 0.5]], 1e-12
    yield "conv2d", conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3)))).data, [[[[9.0]]]], 1e-12
    x = Tensor([1.0, 2.0], requires_grad=True)
    reduce_sum(x * x).backward()
    yield "backward x*x", x.grad, [2.0, 4.0], 1e-12
    logits = Tensor([[0.3, -1.2, 0.8]], requires_grad=True)
    target = np.array([[0.0, 0.0, 1.0]])
    (-reduce_sum(softmax(logits, axis=1).log() * target)).backward()
    yield "softmax-ce grad", logits.grad, softmax(Tensor(logits.data), axis=1).data - target, 1e-9


@register_oracle(name="losses")
def loss_values() -> Iterable[Check]:
    z = np.array([1.0, 0.0]).reshape(1, 2, 1, 1)
    yield "ce (1,0) vs (.5,.5)", ce_loss(_prob([0.5, 0.5]), z).item(), math.log(2.0), 1e-6
    q = _prob([0.3, 0.7])
    yield "ce entropy (.3,.7)", ce_loss(q, q.data).item(), 0.610864, 1e-6
    yield "dice (1,0) vs (.6,.4)", dice_loss(_prob([0.6, 0.4]), z).item(), 0.4, 1e-9
    yield "seg = ce + dice", seg_loss(q, z).item(), ce_loss(q, z).item() + dice_loss(q, z).item(), 1e-12
    yield "kl (1,0)||(.5,.5)", kl_consistency(_prob([1.0, 0.0]), _prob([0.5, 0.5])).item(), math.log(2.0), 1e-6
    yield "kl p||p", kl_consistency(q, q).item(), 0.0, 1e-12
    yield "ce zero weights", ce_loss(q, z, np.zeros((1, 1, 1))).item(), 0.0, 0.0


@register_oracle(name="selection")
def selection_values() -> Iterable[Check]:
    yield "entity (.9,.1)", entity_confidence(_prob([0.9, 0.1])).values.item(), 0.531004, 1e-6
    half = ConfMask(np.full((1, 1, 1), 0.5), "label")
    yield "enhance (.5,.5)", enhance(half, half).values.item(), 0.375, 1e-12
    strong = ConfMask(np.full((1, 1, 1), 0.8), "label")
    weak = ConfMask(np.full((1, 1, 1), 0.2), "label")
    yield "enhance (.8,.2)", enhance(strong, weak).values.item(), 0.48, 1e-12
    yield "enhance (.2,.8)", enhance(weak, strong).values.item(), 0.18, 1e-12
    scores = ConfMask(np.array([0.9, 0.8, 0.4, 0.2]).reshape(1, 1, 4), "label", enhanced=True)
    weights = threshold_label(scores, np.zeros((1, 1, 4), dtype=np.int64), 0.5)
    yield "threshold alpha=.5", weights.values.ravel(), [1.0, 1.0, 0.5, 0.25], 1e-12
    yield "weight_entity", weight_entity(ConfMask(np.full((1, 1, 1), 0.4), "entity"), 0.5).values.item(), 0.7, 1e-12
    sched = SelectionSchedule(alpha0=0.5, n_s=24)
    yield "schedule e=0", schedule(0, sched), (1.0, 0.0), 1e-12
    yield "schedule e=n_s", schedule(24, sched), (0.5, 1.0), 1e-12
    yield "schedule e>n_s", schedule(40, sched), (0.5, 1.0), 1e-12
    yield "schedule e=n_s/2", schedule(12, sched)[0], 0.707107, 1e-6


@register_oracle(name="smoothing")
def smoothing_values() -> Iterable[Check]:
    yield "gaussian size 1", gaussian_kernel(1, 1.0), [[1.0]], 1e-12
    yield "gaussian flat", gaussian_kernel(3, math.inf), np.full((3, 3), 1.0 / 9.0), 1e-12
    yield "gaussian center", gaussian_kernel(3, 1.0)[1, 1], 0.204180, 1e-6
    labels = np.zeros((1, 5, 6), dtype=np.int64)
    labels[:, :, 3:] = 1
    flat = gaussian_kernel(3, math.inf)
    yield "half-plane boundary", spatial_mask(one_hot(labels, 2), flat)[0, :, 2, 2], [2.0 / 3.0, 1.0 / 3.0], 1e-9
    seasons = np.zeros((1, 4, 5, 5), dtype=np.int64)
    seasons[:, 3] = 1
    yield "temporal 3:1", temporal_mask(seasons, 2, gaussian_kernel(5, 1.0))[0, :, 2, 2], [0.75, 0.25], 1e-9
    Z = one_hot(np.zeros((1, 7, 7), dtype=np.int64), 2)
    out = smooth(Z, np.zeros((1, 4, 7, 7), dtype=np.int64), SmoothingParams(beta=0.05, mu=0.15))
    yield "smoothed pixel", out[0, :, 3, 3], [0.975, 0.025], 1e-9


@register_oracle(name="metrics")
def metric_values() -> Iterable[Check]:
    cm = ConfusionMatrix(2)
    cm.add_maps(np.array([0, 0, 1, 1]), np.array([0, 0, 0, 1]))
    m = cm.get_all_metrics()
    yield "oa", m["oa"], 0.75, 1e-9
    yield "aa", m["aa"], 0.75, 1e-9
    yield "miou", m["miou"], 0.583333, 1e-6
    yield "mf1", m["mf1"], 0.733333, 1e-6


@register_oracle(name="optimizer")
def optimizer_values() -> Iterable[Check]:
    p = Tensor(np.zeros(3), requires_grad=True)
    adam = Adam([("p", p)], lr=1e-3)
    p.grad = np.ones(3)
    adam.step()
    yield "adam first step", p.data, np.full(3, -1e-3 / (1.0 + 1e-8)), 1e-12
    q = Tensor(np.full(2, 0.7), requires_grad=True)
    still = Adam([("q", q)], lr=1e-3)
    for _ in range(5):
        q.grad = np.zeros(2)
        still.step()
    yield "adam zero grad", q.data, [0.7, 0.7], 0.0
    patience = 3
    once = ReduceLROnPlateauScheduler(lr=1.0, patience=patience)
    yield "plateau once", [once.step(1.0) for _ in range(patience + 1)][-1], 0.5, 0.0
    twice = ReduceLROnPlateauScheduler(lr=1.0, patience=patience)
    yield "plateau twice", [twice.step(1.0) for _ in range(1 + 2 * patience)][-1], 0.25, 0.0
    falling = ReduceLROnPlateauScheduler(lr=1.0, patience=patience)
    yield "plateau falling", [falling.step(10.0 - e) for e in range(10)][-1], 1.0, 0.0


def micro_pair(mode: str, seed: int) -> ModelPair:
    """Two-class, 8x8, one-stage pair used by the gradient checks"""
    config = MiniUNetConfig(in_channels=(2, 3), base_width=2, depth=1, num_classes=2, input_size=8)
    return ModelPair(config, FusionSpec(mode), seed)


def _micro_batch(seed: int):
    rng = np.random.default_rng(seed)
    x1 = Tensor(rng.standard_normal((2, 2, 8, 8)))
    x2 = Tensor(rng.standard_normal((2, 3, 8, 8)))
    labels = rng.integers(0, 2, size=(2, 8, 8))
    return x1, x2, labels


def gradient_errors(seed: int, max_entries: int = 8) -> Dict[str, float]:
    """Relative error of the analytic gradients of the three losses w.r.t. every parameter of a micro pair"""
    pair = micro_pair("late", seed)
    params = pair.parameters()
    x1, x2, labels = _micro_batch(seed)
    Z = one_hot(labels, 2)
    # targets and masks are frozen before the parameters get perturbed
    P1 = Tensor(pair(1, x1).data.copy())
    P2 = Tensor(pair(2, x2).data.copy())
    masks = selection_masks(P1, P2, labels, 0.5, 0.5)
    rng = np.random.default_rng(seed)
    errors = {
        "seg_loss": gradcheck(
            lambda: seg_loss(pair(1, x1), Z, masks["W_l"][1]), params, max_entries=max_entries, rng=rng
        ),
        "kl_consistency": gradcheck(
            lambda: kl_consistency(P1, pair(2, x2), masks["W_e"][1]), params, max_entries=max_entries, rng=rng
        ),
        "total_loss": gradcheck(
            lambda: compute_losses(
                pair(1, x1),
                pair(2, x2),
                Z,
                masks["W_l"][1],
                masks["W_l"][2],
                masks["W_e"][1],
                masks["W_e"][2],
                P1=P1,
                P2=P2,
            ).total,
            params,
            max_entries=max_entries,
            rng=rng,
        ),
    }
    return errors


@register_oracle(name="gradients")
def gradient_values(seeds: Sequence[int] = (0, 1, 2)) -> Iterable[Check]:
    for seed in seeds:
        for name, error in gradient_errors(seed).items():
            yield f"{name} seed {seed}", error < 1e-4, True, 0.0


def _grad_norm(module: Module) -> float:
    return float(sum(np.abs(p.grad).sum() for p in module.parameters() if p.grad is not None))


@register_oracle(name="contracts")
def contract_values() -> Iterable[Check]:
    pair = micro_pair("late", 0)
    x1, x2, _ = _micro_batch(0)
    kl_consistency(pair(1, x1).detach(), pair(2, x2)).backward()
    yield "late: KL(P1||Q2) leaves encoder1 alone", _grad_norm(pair.encoder(1)), 0.0, 0.0
    yield "late: KL(P1||Q2) leaves decoder1 alone", _grad_norm(pair.decoder(1)), 0.0, 0.0
    yield "late: KL(P1||Q2) reaches encoder2", _grad_norm(pair.encoder(2)) > 0, True, 0.0
    shared = micro_pair("middle", 0)
    adam = Adam(shared.named_parameters(), lr=1e-2)
    for step in range(10):
        x1, x2, labels = _micro_batch(step)
        compute_losses(shared(1, x1), shared(2, x2), one_hot(labels, 2)).total.backward()
        adam.step()
    yield "middle: one decoder object", shared.decoder(1) is shared.decoder(2), True, 0.0
    same = all(
        np.array_equal(a.data, b.data)
        for a, b in zip(shared.decoder(1).parameters(), shared.decoder(2).parameters())
    )
    yield "middle: decoder parameters equal after 10 steps", same, True, 0.0


def _passes(got, expected, tol: float) -> bool:
    if isinstance(expected, bool):
        return bool(got) is expected
    got = np.asarray(got, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    return got.shape == expected.shape and bool(np.all(np.abs(got - expected) <= tol))


@export
def run_oracles(names: Optional[Sequence[str]] = None) -> List[OracleResult]:
    """Run the named oracles (all by default) and report every check"""
    results = []
    for name in names or list(ORACLES):
        try:
            for label, got, expected, tol in ORACLES[name]():
                passed = _passes(got, expected, tol)
                results.append(OracleResult(f"{name}: {label}", passed, f"got {got}, expected {expected} (tol {tol})"))
        except Exception as e:
            logger.exception("oracle %s raised", name)
            results.append(OracleResult(name, False, f"{type(e).__name__}: {e}"))
    failed = [r for r in results if not r.passed]
    logger.info("selftest: %d checks, %d failed", len(results), len(failed))
    for r in failed:
        logger.error("FAILED %s: %s", r.name, r.detail)
    return results
