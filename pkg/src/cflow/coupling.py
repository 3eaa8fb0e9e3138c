"""Unconditional, conditional and global-feature coupling layers."""

from __future__ import annotations

import numpy as np

from .couplingnet import CouplingNet, match_spatial
from .layers import FORWARD, INVERSE, _check_direction
from .nn import Conv2d, Module
from .tensor import ShapeError, Tensor, concat, reduce

AFFINE = "affine"
ADDITIVE = "additive"


class Coupling(Module):
    """Coupling layer updating channels ``c:`` of ``x`` from channels ``:c``.

    When ``cond_channels`` is positive the layer is conditional: the net also
    receives the first ``cond_channels`` channels of a conditioning tensor
    (the first half of the source branch activation). With
    ``global_feature`` the untouched half is summarised by a 1x1 conv and a
    max over all positions; that vector modulates the untouched half through
    a channel-wise affine map (first half scale, second half translation)
    and the result joins the adapter input.

    Parameters
    ----------
    channels : int
        Channel count ``C`` of the transformed tensor; must be even.
    mode : {"affine", "additive"}
    """

    def __init__(
        self,
        channels: int,
        hidden: int = 64,
        mode: str = AFFINE,
        cond_channels: int = 0,
        global_feature: bool = False,
        rng: np.random.Generator | None = None,
        init_std: float = 0.05,
        clamp: float = 5.0,
    ):
        if channels % 2:
            raise ShapeError(f"coupling needs an even channel count for c = C/2, got C = {channels}")
        if mode not in (AFFINE, ADDITIVE):
            raise ValueError(f"coupling mode must be 'affine' or 'additive', got {mode!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.split = channels // 2
        self.mode = mode
        self.cond_channels = cond_channels
        self.gf = Conv2d(1, self.split, 2 * self.split, rng, init_std) if global_feature else None
        adapter_in = cond_channels + (self.split if global_feature else 0)
        self.net = CouplingNet(
            self.split,
            channels - self.split,
            hidden=hidden,
            cond_channels=adapter_in,
            affine=mode == AFFINE,
            rng=rng,
            init_std=init_std,
            clamp=clamp,
        )

    def global_feature(self, x1: Tensor) -> Tensor:
        """Max over all positions of a 1x1 conv of the untouched half: ``[N, 2c]``."""
        return reduce("max", self.gf(x1), axes=(1, 2))

    def _net_input(self, x1: Tensor, cond: Tensor | None) -> Tensor | None:
        parts = []
        if cond is not None:
            if self.cond_channels == 0:
                raise ShapeError(f"unconditional coupling received a condition of shape {cond.shape}")
            if cond.shape[-1] < self.cond_channels:
                raise ShapeError(
                    f"condition shape {cond.shape} has fewer than {self.cond_channels} channels"
                )
            parts.append(cond[..., : self.cond_channels])
        if self.gf is not None:
            g = self.global_feature(x1)
            n, c = g.shape[0], self.split
            scale = g[:, :c].reshape(n, 1, 1, c)
            shift = g[:, c:].reshape(n, 1, 1, c)
            feat = x1 * scale + shift
            if parts and parts[0].shape[1:3] != feat.shape[1:3]:
                parts[0] = match_spatial(parts[0], feat.shape[1], feat.shape[2])
            parts.append(feat)
        if not parts:
            return None
        return parts[0] if len(parts) == 1 else concat(parts, axis=-1)

    def scale_shift(self, x1: Tensor, cond: Tensor | None = None):
        return self.net(x1, self._net_input(x1, cond))

    def forward(self, x: Tensor, cond: Tensor | None = None) -> tuple[Tensor, Tensor]:
        if x.shape[-1] != self.channels:
            raise ShapeError(f"input shape {x.shape} does not have {self.channels} channels")
        c = self.split
        x1, x2 = x[..., :c], x[..., c:]
        log_s, t = self.scale_shift(x1, cond)
        if log_s is None:
            y2 = x2 + t
            logdet = Tensor(np.zeros(x.shape[0]))
        else:
            y2 = x2 * log_s.exp() + t
            logdet = log_s.sum(axes=tuple(range(1, x.ndim)))
        return concat([x1, y2], axis=-1), logdet

    def inverse(self, y: Tensor, cond: Tensor | None = None) -> tuple[Tensor, Tensor]:
        if y.shape[-1] != self.channels:
            raise ShapeError(f"input shape {y.shape} does not have {self.channels} channels")
        c = self.split
        y1, y2 = y[..., :c], y[..., c:]
        log_s, t = self.scale_shift(y1, cond)
        if log_s is None:
            x2 = y2 - t
            logdet = Tensor(np.zeros(y.shape[0]))
        else:
            x2 = (y2 - t) * (-log_s).exp()
            logdet = -log_s.sum(axes=tuple(range(1, y.ndim)))
        return concat([y1, x2], axis=-1), logdet


def _apply(layer: Coupling, x: Tensor, cond: Tensor | None, direction: str):
    _check_direction(direction)
    unbatched = x.ndim == 3
    if unbatched:
        x = x.reshape((1,) + x.shape)
        if cond is not None:
            cond = cond.reshape((1,) + cond.shape)
    fn = layer.forward if direction == FORWARD else layer.inverse
    y, logdet = fn(x, cond)
    if unbatched:
        return y.reshape(y.shape[1:]), logdet.sum()
    return y, logdet


def coupling_forward(layer: Coupling, xb: Tensor, xa: Tensor | None = None):
    return _apply(layer, xb, xa, FORWARD)


def coupling_inverse(layer: Coupling, yb: Tensor, xa: Tensor | None = None):
    return _apply(layer, yb, xa, INVERSE)


def gf_coupling_forward(layer: Coupling, xb: Tensor, xa: Tensor | None = None):
    if layer.gf is None:
        raise ValueError("layer was built without global features")
    return _apply(layer, xb, xa, FORWARD)


def gf_coupling_inverse(layer: Coupling, yb: Tensor, xa: Tensor | None = None):
    if layer.gf is None:
        raise ValueError("layer was built without global features")
    return _apply(layer, yb, xa, INVERSE)
