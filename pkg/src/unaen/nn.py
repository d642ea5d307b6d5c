"""Small module system on top of :mod:`unaen.autodiff`."""

from __future__ import annotations

import contextlib
from typing import Dict, Iterator, List, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def Parameter(data: np.ndarray, name: str = None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=data.dtype, name=name)


class Module:
    """Base class; every Tensor attribute is a parameter.

    Submodules may be attributes or lists of modules; names follow attribute
    order, e.g. ``body.0.conv1.weight``.
    """

    training = True

    def forward(self, *args):
        raise NotImplementedError

    def __call__(self, *args):
        return self.forward(*args)

    def _children(self) -> Iterator[Tuple[str, object]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, (Module, Tensor)):
                yield key, value
            elif isinstance(value, list) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        out = []
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.name is None:
                    value.name = name
                out.append((name, value))
            else:
                out.extend(value.named_parameters(name + "."))
        return out

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> List[Tuple[str, np.ndarray]]:
        out = []
        for key, value in self._children():
            if isinstance(value, Module):
                out.extend(value.named_buffers(f"{prefix}{key}."))
        for key, value in getattr(self, "_buffers", {}).items():
            out.append((f"{prefix}{key}", value))
        return out

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    @contextlib.contextmanager
    def frozen(self):
        """Use as a fixed function: no parameter grads, no running-stat updates."""
        params = self.parameters()
        flags = [p.requires_grad for p in params]
        norms = [m for m in self.modules() if hasattr(m, "update_stats")]
        for p in params:
            p.requires_grad = False
        for m in norms:
            m.update_stats = False
        try:
            yield self
        finally:
            for p, f in zip(params, flags):
                p.requires_grad = f
            for m in norms:
                m.update_stats = True

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (e.g. to float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        unexpected = set(state) - set(own) - set(bufs)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {state[name].shape} != model shape {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)
        for name, buf in bufs.items():
            buf[...] = state[name]


def count_parameters(net: Module) -> int:
    """Total scalar count over weights, biases and norm affine parameters."""
    return int(sum(p.size for p in net.parameters()))


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1, rng=None, bias: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = kernel // 2
        self.weight = Parameter(ad.he_normal((out_ch, in_ch, kernel, kernel), rng))
        self.bias = Parameter(np.zeros(out_ch, dtype=ad.DEFAULT_DTYPE)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.momentum = momentum
        self.eps = eps
        self.update_stats = True
        self.gamma = Parameter(np.ones(channels, dtype=ad.DEFAULT_DTYPE))
        self.beta = Parameter(np.zeros(channels, dtype=ad.DEFAULT_DTYPE))
        self._buffers = {
            "running_mean": np.zeros(channels, dtype=ad.DEFAULT_DTYPE),
            "running_var": np.ones(channels, dtype=ad.DEFAULT_DTYPE),
        }

    def forward(self, x: Tensor) -> Tensor:
        keep = not self.training or self.update_stats
        return ad.batch_norm2d(
            x,
            self.gamma,
            self.beta,
            self._buffers["running_mean"] if keep else None,
            self._buffers["running_var"] if keep else None,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )
