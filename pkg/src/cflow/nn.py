"""Parameter containers shared by the flow layers and coupling networks."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor, conv2d


class Module:
    """Minimal parameter tree.

    Attributes holding a ``Tensor`` with ``requires_grad`` are parameters;
    attributes holding a ``Module`` (or a list of them) are children. Names
    are dotted paths in attribute-definition order, which keeps checkpoints
    and optimizer state deterministic.
    """

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_parameters(prefix + name + ".")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, child in self.named_children():
            yield from child.named_modules(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


class Conv2d(Module):
    """Same-padded convolution with weights drawn from N(0, std^2), or zeros."""

    def __init__(
        self,
        kernel_size: int,
        in_channels: int,
        out_channels: int,
        rng: np.random.Generator | None = None,
        std: float = 0.05,
        zero: bool = False,
    ):
        shape = (kernel_size, kernel_size, in_channels, out_channels)
        if zero or rng is None:
            w = np.zeros(shape)
        else:
            w = rng.normal(0.0, std, size=shape)
        self.kernel = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[2]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[3]

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.kernel, self.bias)
