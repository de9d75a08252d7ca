import math
import logging
from collections import OrderedDict
from typing import Dict, Optional, Sequence, Tuple
import numpy as np
from nlss.utils import exporter, optional_params, register, ConfigError, TrainingDiverged
from nlss.tensor import Tensor


__all__ = []
export = exporter(__all__)
logger = logging.getLogger("nlss")

NLSS_LR_SCHEDULERS = {}


@export
@optional_params
def register_lr_scheduler(cls, name=None):
    return register(cls, NLSS_LR_SCHEDULERS, name, "lr_scheduler")


@export
def create_lr_scheduler(**kwargs):
    """Create a learning rate scheduler.

    :Keyword Arguments:
      * *lr_scheduler_type* `str` The name of the learning rate scheduler, `default` (constant) or `plateau`
    """
    sched_type = kwargs.get("lr_scheduler_type", "default")
    if sched_type not in NLSS_LR_SCHEDULERS:
        raise ConfigError(f"unknown lr scheduler {sched_type!r}, expected one of {sorted(NLSS_LR_SCHEDULERS)}")
    return NLSS_LR_SCHEDULERS[sched_type](**kwargs)


@export
class LearningRateScheduler:
    """Epoch-level schedulers: `step` is called once per epoch with the validation loss"""

    def __init__(self, **kwargs):
        self.lr = kwargs.get("lr", kwargs.get("eta", 1.0))

    def step(self, val_loss: float) -> float:
        raise NotImplementedError

    def state_dict(self) -> Dict:
        return {"lr": self.lr}

    def load_state_dict(self, state: Dict):
        self.lr = state["lr"]


@export
@register_lr_scheduler(name="default")
class ConstantScheduler(LearningRateScheduler):
    def __init__(self, **kwargs):
        super().__init__(**kwargs)

    def step(self, val_loss: float) -> float:
        return self.lr


@export
@register_lr_scheduler(name="plateau")
class ReduceLROnPlateauScheduler(LearningRateScheduler):
    """Multiply the lr by `factor` once the validation loss has not improved for `patience` epochs

    Improvement is relative: `val < best * (1 - threshold)`.  The bad-epoch counter resets on
    improvement and after every reduction.
    """

    def __init__(self, patience: int = 9, factor: float = 0.5, threshold: float = 1e-4, min_lr: float = 0.0, **kwargs):
        super().__init__(**kwargs)
        if patience < 1 or not 0.0 < factor < 1.0:
            raise ConfigError(f"plateau scheduler needs patience >= 1 and factor in (0, 1), got {patience}, {factor}")
        self.patience = patience
        self.factor = factor
        self.threshold = threshold
        self.min_lr = min_lr
        self.best = math.inf
        self.num_bad = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best * (1.0 - self.threshold) or self.best == math.inf:
            self.best = val_loss
            self.num_bad = 0
        else:
            self.num_bad += 1
        if self.num_bad >= self.patience:
            new_lr = max(self.lr * self.factor, self.min_lr)
            logger.info("validation loss flat for %d epochs, lr %g -> %g", self.num_bad, self.lr, new_lr)
            self.lr = new_lr
            self.num_bad = 0
        return self.lr

    def state_dict(self) -> Dict:
        return {"lr": self.lr, "best": self.best if math.isfinite(self.best) else None, "num_bad": self.num_bad}

    def load_state_dict(self, state: Dict):
        self.lr = state["lr"]
        self.best = math.inf if state.get("best") is None else state["best"]
        self.num_bad = state.get("num_bad", 0)


@export
def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[Optional[np.ndarray]],
    state: Dict,
    lr: float,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> Dict:
    """One bias-corrected Adam update, applied to `params` in place

    :param params: Parameter arrays
    :param grads: Matching gradients, `None` skips a parameter
    :param state: `{"step": int, "m": [...], "v": [...]}`, empty on the first call
    :param lr: Learning rate
    :return: The updated state
    """
    for g in grads:
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingDiverged("non-finite gradient in adam step", step=state.get("step", 0))
    if not state:
        state.update(step=0, m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])
    beta1, beta2 = betas
    state["step"] += 1
    t = state["step"]
    bias_correction1 = 1.0 - beta1 ** t
    bias_correction2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g is None:
            continue
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / bias_correction1) / (np.sqrt(v / bias_correction2) + eps)
    return state


@export
class Adam:
    """Adam over named parameters; `step` applies the update and then zeroes the gradients"""

    def __init__(
        self,
        named_params: Sequence[Tuple[str, Tensor]],
        lr: float = 1e-3,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        seen = set()
        for name, p in named_params:
            if id(p) not in seen:
                seen.add(id(p))
                self.params[name] = p
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state: Dict = {}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        tensors = list(self.params.values())
        adam_step([p.data for p in tensors], [p.grad for p in tensors], self.state, self.lr, self.betas, self.eps)
        self.zero_grad()

    def state_dict(self) -> Tuple[Dict, Dict[str, np.ndarray]]:
        """Scalar state and the moment arrays keyed `adam/m/<param>` and `adam/v/<param>`"""
        arrays = OrderedDict()
        if self.state:
            for name, m, v in zip(self.params, self.state["m"], self.state["v"]):
                arrays[f"adam/m/{name}"] = m
                arrays[f"adam/v/{name}"] = v
        return {"step": self.state.get("step", 0), "lr": self.lr}, arrays

    def load_state_dict(self, scalars: Dict, arrays: Dict[str, np.ndarray]):
        self.lr = scalars.get("lr", self.lr)
        if scalars.get("step", 0) == 0:
            self.state = {}
            return
        try:
            m = [np.array(arrays[f"adam/m/{name}"]) for name in self.params]
            v = [np.array(arrays[f"adam/v/{name}"]) for name in self.params]
        except KeyError as e:
            raise ConfigError(f"optimizer state is missing {e}")
        self.state = {"step": scalars["step"], "m": m, "v": v}


@export
class OptimizerManager:
    """Adam plus an epoch-level lr scheduler, created from keyword arguments"""

    def __init__(self, named_params: Sequence[Tuple[str, Tensor]], **kwargs):
        self.current_lr = kwargs.get("eta", kwargs.get("lr", 5e-3))
        kwargs["lr"] = self.current_lr
        beta1 = kwargs.get("beta1", 0.9)
        beta2 = kwargs.get("beta2", 0.999)
        eps = kwargs.get("epsilon", 1e-8)
        logger.info("adam(eta=%f, beta1=%f, beta2=%f, epsilon=%g)", self.current_lr, beta1, beta2, eps)
        self.optimizer = Adam(named_params, lr=self.current_lr, betas=(beta1, beta2), eps=eps)
        self.lr_function = create_lr_scheduler(**kwargs)
        self.global_step = 0

    def step(self):
        self.optimizer.step()
        self.global_step += 1

    def zero_grad(self):
        self.optimizer.zero_grad()

    def end_epoch(self, val_loss: float) -> float:
        self.current_lr = self.lr_function.step(val_loss)
        self.optimizer.lr = self.current_lr
        return self.current_lr

    def state_dict(self) -> Tuple[Dict, Dict[str, np.ndarray]]:
        scalars, arrays = self.optimizer.state_dict()
        scalars = {"adam": scalars, "scheduler": self.lr_function.state_dict(), "global_step": self.global_step}
        return scalars, arrays

    def load_state_dict(self, scalars: Dict, arrays: Dict[str, np.ndarray]):
        self.optimizer.load_state_dict(scalars["adam"], arrays)
        self.lr_function.load_state_dict(scalars["scheduler"])
        self.global_step = scalars.get("global_step", 0)
        self.current_lr = self.lr_function.lr
        self.optimizer.lr = self.current_lr
