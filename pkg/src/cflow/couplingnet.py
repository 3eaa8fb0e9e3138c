"""Convolutional regressors for the coupling scale and translation."""

from __future__ import annotations

import numpy as np

from .layers import ActNorm
from .nn import Conv2d, Module
from .tensor import ShapeError, Tensor, concat


def match_spatial(cond: Tensor, height: int, width: int) -> Tensor:
    """Center-crop or zero-pad ``cond`` ([N, h, w, C]) to ``height x width``."""
    n, h, w, c = cond.shape
    if (h, w) == (height, width):
        return cond
    if h > height:
        top = (h - height) // 2
        cond = cond[:, top : top + height]
    if w > width:
        left = (w - width) // 2
        cond = cond[:, :, left : left + width]
    h, w = cond.shape[1:3]
    if h < height or w < width:
        top, left = (height - h) // 2, (width - w) // 2
        parts = []
        if top:
            parts.append(Tensor(np.zeros((n, top, w, c))))
        parts.append(cond)
        if height - h - top:
            parts.append(Tensor(np.zeros((n, height - h - top, w, c))))
        cond = concat(parts, axis=1)
        parts = []
        if left:
            parts.append(Tensor(np.zeros((n, height, left, c))))
        parts.append(cond)
        if width - w - left:
            parts.append(Tensor(np.zeros((n, height, width - w - left, c))))
        cond = concat(parts, axis=2)
    return cond


class CouplingNet(Module):
    """conv3x3 -> actnorm -> relu -> conv1x1 -> actnorm -> relu (+ adapter) -> zero conv3x3.

    Parameters
    ----------
    in_channels : int
        Channels of the untouched half that drives the coupling.
    out_channels : int
        Channels of the transformed half.
    hidden : int
        Width of the hidden layers.
    cond_channels : int
        Channels of the conditioning input; 0 builds a net without adapter.
    affine : bool
        If true the net regresses ``(log_s, t)``, otherwise only ``t``.
    clamp : float
        ``log_s`` is squashed to ``clamp * tanh(raw / clamp)``.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        hidden: int = 64,
        cond_channels: int = 0,
        affine: bool = True,
        rng: np.random.Generator | None = None,
        init_std: float = 0.05,
        clamp: float = 5.0,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.affine = affine
        self.clamp = clamp
        self.out_channels = out_channels
        self.conv1 = Conv2d(3, in_channels, hidden, rng, init_std)
        self.norm1 = ActNorm(hidden)
        self.conv2 = Conv2d(1, hidden, hidden, rng, init_std)
        self.norm2 = ActNorm(hidden)
        if cond_channels:
            self.adapter = Conv2d(1, cond_channels, hidden, rng, init_std)
            self.adapter_norm = ActNorm(hidden)
        else:
            self.adapter = None
            self.adapter_norm = None
        self.conv3 = Conv2d(3, hidden, 2 * out_channels if affine else out_channels, zero=True)

    @property
    def cond_channels(self) -> int:
        return self.adapter.in_channels if self.adapter is not None else 0

    def hidden_features(self, x: Tensor, cond: Tensor | None = None) -> Tensor:
        h = self.norm2(self.conv2(self.norm1(self.conv1(x)).relu())).relu()
        if cond is None:
            return h
        if self.adapter is None:
            raise ShapeError(f"net has no adapter but received a condition of shape {cond.shape}")
        if cond.shape[-1] != self.cond_channels:
            raise ShapeError(
                f"condition shape {cond.shape} does not match adapter input channels {self.cond_channels}"
            )
        cond = match_spatial(cond, x.shape[1], x.shape[2])
        return h + self.adapter_norm(self.adapter(cond))

    def __call__(self, x: Tensor, cond: Tensor | None = None) -> tuple[Tensor | None, Tensor]:
        """Return ``(log_s, t)``; ``log_s`` is ``None`` in additive mode."""
        unbatched = x.ndim == 3
        if unbatched:
            x = x.reshape((1,) + x.shape)
            if cond is not None:
                cond = cond.reshape((1,) + cond.shape)
        raw = self.conv3(self.hidden_features(x, cond))
        if self.affine:
            n = self.out_channels
            log_s = (raw[..., :n] * (1.0 / self.clamp)).tanh() * self.clamp
            t = raw[..., n:]
        else:
            log_s, t = None, raw
        if unbatched:
            log_s = None if log_s is None else log_s.reshape(log_s.shape[1:])
            t = t.reshape(t.shape[1:])
        return log_s, t


def net_forward(net: CouplingNet, xb_half: Tensor, cond_half: Tensor | None = None):
    """Functional form of :meth:`CouplingNet.__call__`; additive nets report ``log_s = 0``."""
    log_s, t = net(xb_half, cond_half)
    if log_s is None:
        log_s = Tensor(np.zeros(t.shape))
    return log_s, t
