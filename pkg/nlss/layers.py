import logging
from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Tuple
import numpy as np
from nlss.utils import exporter, ConfigError
from nlss.tensor import Tensor, conv2d, batch_norm, relu


__all__ = []
export = exporter(__all__)
logger = logging.getLogger("nlss")


@export
def he_uniform(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    """He-uniform init for a `[Cout, Cin, kh, kw]` kernel, bound sqrt(6 / fan_in)"""
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@export
class Module:
    """Base for layers: parameters are `Tensor` attributes that require grad, buffers are registered arrays

    Sub-modules may be attributes or lists of modules.  A module reachable through two paths
    (a shared decoder) reports its parameters once, under the first path.
    """

    def __init__(self):
        self.training = True
        self._buffers: Dict[str, np.ndarray] = OrderedDict()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = value
        setattr(self, name, value)

    def named_children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def _walk(self, prefix: str, seen: set) -> Iterator[Tuple[str, "Module"]]:
        if id(self) in seen:
            return
        seen.add(id(self))
        yield prefix, self
        for name, child in self.named_children():
            yield from child._walk(f"{prefix}/{name}" if prefix else name, seen)

    def modules(self) -> Iterator[Tuple[str, "Module"]]:
        return self._walk("", set())

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        for prefix, module in self.modules():
            for name, value in vars(module).items():
                if isinstance(value, Tensor) and value.requires_grad:
                    yield (f"{prefix}/{name}" if prefix else name), value

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[Tuple[str, np.ndarray]]:
        for prefix, module in self.modules():
            for name, value in module._buffers.items():
                yield (f"{prefix}/{name}" if prefix else name), value

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for _, module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((name, p.data) for name, p in self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True):
        """Copy arrays into the existing storage so that aliasing between modules survives"""
        own = self.state_dict()
        missing = [k for k in own if k not in state]
        unexpected = [k for k in state if k not in own]
        if strict and (missing or unexpected):
            raise ConfigError(f"state mismatch, missing: {missing}, unexpected: {unexpected}")
        for name, target in own.items():
            if name not in state:
                continue
            source = np.asarray(state[name], dtype=target.dtype)
            if source.shape != target.shape:
                raise ConfigError(f"{name}: stored shape {source.shape} != model shape {target.shape}")
            target[...] = source


@export
class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        stride: int = 1,
        padding: Optional[int] = None,
        bias: bool = True,
        rng: Optional[np.random.Generator] = None,
    ):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        self.weight = Tensor(he_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


@export
class BatchNorm2d(Module):
    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(num_features))
        self.register_buffer("running_var", np.ones(num_features))

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.momentum, self.eps
        )


@export
class ConvBNReLU(Module):
    """3x3 convolution (no bias), batch norm, relu"""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False, rng=rng)
        self.bn = BatchNorm2d(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return relu(self.bn(self.conv(x)))
