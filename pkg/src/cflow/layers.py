"""Invertible building blocks: actnorm, 1x1 convolution, squeeze and the latent prior.

Every layer maps in the data -> latent direction with ``forward`` and back
with ``inverse``. Both take batched ``[N, H, W, C]`` tensors and return the
transformed tensor with a per-sample log-determinant of shape ``[N]``; the
inverse log-determinant is the negation of the forward one. The functional
wrappers at the bottom also accept unbatched ``[H, W, C]`` input and then
return a scalar log-determinant.
"""

from __future__ import annotations

import math

import numpy as np

from .nn import Module
from .tensor import ShapeError, Tensor, channel_matmul, matrix_inverse, slogdet

FORWARD = "forward"
INVERSE = "inverse"

DET_FLOOR = 1e-12
ACTNORM_EPS = 1e-6


class NotInitializedError(RuntimeError):
    """An actnorm layer was run in the inverse direction before data-dependent init."""


class SingularWeightError(RuntimeError):
    """An invertible 1x1 convolution's weight has |det| below the floor."""

    def __init__(self, det: float):
        super().__init__(f"1x1 convolution weight is singular: |det| = {det:.3e} < {DET_FLOOR:g}")
        self.det = det


def _check_direction(direction: str) -> None:
    if direction not in (FORWARD, INVERSE):
        raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")


def _per_sample(value: Tensor, n: int) -> Tensor:
    return value * np.ones(n)


class ActNorm(Module):
    """Per-channel affine map ``y = scale * x + bias`` with data-dependent init."""

    def __init__(self, channels: int):
        self.scale = Tensor(np.ones(channels), requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)
        self.initialized = False

    @property
    def channels(self) -> int:
        return self.scale.shape[0]

    def initialize(self, x: np.ndarray) -> None:
        """Set scale/bias so that ``x`` maps to zero mean, unit variance per channel."""
        flat = x.reshape(-1, x.shape[-1])
        mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        scale = 1.0 / np.maximum(std, ACTNORM_EPS)
        self.scale.data = scale
        self.bias.data = -mean * scale
        self.initialized = True

    def set_identity(self) -> None:
        self.scale.data = np.ones(self.channels)
        self.bias.data = np.zeros(self.channels)
        self.initialized = True

    def __call__(self, x: Tensor) -> Tensor:
        """Normalize without a log-determinant (used inside coupling networks)."""
        if not self.initialized:
            self.initialize(x.data)
        return x * self.scale + self.bias

    def _logdet(self, x: Tensor) -> Tensor:
        hw = int(np.prod(x.shape[1:-1]))
        return _per_sample(self.scale.abs().log().sum() * float(hw), x.shape[0])

    def forward(self, x: Tensor, cond: Tensor | None = None) -> tuple[Tensor, Tensor]:
        if not self.initialized:
            self.initialize(x.data)
        return x * self.scale + self.bias, self._logdet(x)

    def inverse(self, y: Tensor, cond: Tensor | None = None) -> tuple[Tensor, Tensor]:
        if not self.initialized:
            raise NotInitializedError("actnorm inverse called before data-dependent initialization")
        return (y - self.bias) / self.scale, -self._logdet(y)


def random_rotation(channels: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(channels, channels)))
    return q * np.sign(np.diag(r))


class InvConv1x1(Module):
    """Invertible channel mixing ``y[h, w] = W x[h, w]`` stored as a plain matrix."""

    def __init__(self, channels: int, rng: np.random.Generator | None = None):
        w = np.eye(channels) if rng is None else random_rotation(channels, rng)
        self.weight = Tensor(w, requires_grad=True)

    def check(self) -> float:
        """Return log|det W|, raising :class:`SingularWeightError` below the floor."""
        sign, logabs = np.linalg.slogdet(self.weight.data)
        if sign == 0 or logabs < math.log(DET_FLOOR):
            raise SingularWeightError(0.0 if sign == 0 else math.exp(logabs))
        return logabs

    def _logdet(self, x: Tensor) -> Tensor:
        self.check()
        hw = int(np.prod(x.shape[1:-1]))
        return _per_sample(slogdet(self.weight) * float(hw), x.shape[0])

    def forward(self, x: Tensor, cond: Tensor | None = None) -> tuple[Tensor, Tensor]:
        logdet = self._logdet(x)
        return channel_matmul(x, self.weight), logdet

    def inverse(self, y: Tensor, cond: Tensor | None = None) -> tuple[Tensor, Tensor]:
        logdet = self._logdet(y)
        return channel_matmul(y, matrix_inverse(self.weight)), -logdet


def squeeze(x: Tensor) -> Tensor:
    """Space-to-depth by 2: ``[N, H, W, C] -> [N, H/2, W/2, 4C]``.

    Output channel ``4c + k`` holds original channel ``c`` at sub-position
    ``k`` in (top-left, top-right, bottom-left, bottom-right) order.
    """
    unbatched = x.ndim == 3
    if unbatched:
        x = x.reshape((1,) + x.shape)
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"squeeze needs even spatial dims, got shape {x.shape}")
    y = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, 4 * c)
    return y.reshape(y.shape[1:]) if unbatched else y


def unsqueeze(y: Tensor) -> Tensor:
    """Exact inverse of :func:`squeeze`."""
    unbatched = y.ndim == 3
    if unbatched:
        y = y.reshape((1,) + y.shape)
    n, h, w, c4 = y.shape
    if c4 % 4:
        raise ShapeError(f"unsqueeze needs a channel count divisible by 4, got shape {y.shape}")
    c = c4 // 4
    x = y.reshape(n, h, w, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h, 2 * w, c)
    return x.reshape(x.shape[1:]) if unbatched else x


LOG_2PI = math.log(2.0 * math.pi)


class GaussianPrior(Module):
    """Diagonal Gaussian over a latent of fixed shape with learnable mean and log-variance."""

    def __init__(self, shape: tuple[int, ...]):
        self.mean = Tensor(np.zeros(shape), requires_grad=True)
        self.log_var = Tensor(np.zeros(shape), requires_grad=True)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mean.shape

    def log_prob(self, z: Tensor) -> Tensor:
        """Per-sample log density of batched ``z`` (``[N, *shape]``)."""
        if z.shape[1:] != self.shape:
            raise ShapeError(f"latent shape {z.shape[1:]} does not match prior shape {self.shape}")
        diff = z - self.mean
        dens = diff.square() * (-self.log_var).exp() + self.log_var + LOG_2PI
        return dens.sum(axes=tuple(range(1, z.ndim))) * -0.5

    def sample(self, n: int, temperature: float, rng: np.random.Generator) -> Tensor:
        """Draw ``n`` samples with variance ``exp(log_var) * temperature``."""
        if temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {temperature}")
        eps = rng.standard_normal((n,) + self.shape)
        std = np.sqrt(np.exp(self.log_var.data) * temperature)
        return Tensor(self.mean.data + std * eps)


# -- functional wrappers -------------------------------------------------------


def _apply(layer, x: Tensor, direction: str, cond: Tensor | None = None):
    _check_direction(direction)
    unbatched = x.ndim == 3
    if unbatched:
        x = x.reshape((1,) + x.shape)
        if cond is not None:
            cond = cond.reshape((1,) + cond.shape)
    fn = layer.forward if direction == FORWARD else layer.inverse
    y, logdet = fn(x, cond) if cond is not None else fn(x)
    if unbatched:
        return y.reshape(y.shape[1:]), logdet.sum()
    return y, logdet


def actnorm_apply(layer: ActNorm, x: Tensor, direction: str = FORWARD):
    return _apply(layer, x, direction)


def invconv_apply(layer: InvConv1x1, x: Tensor, direction: str = FORWARD):
    return _apply(layer, x, direction)


def prior_logprob(prior: GaussianPrior, z: Tensor) -> Tensor:
    if z.shape == prior.shape:
        return prior.log_prob(z.reshape((1,) + z.shape)).sum()
    return prior.log_prob(z)


def prior_sample(prior: GaussianPrior, temperature: float, seed: int | np.random.Generator) -> Tensor:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    s = prior.sample(1, temperature, rng)
    return s.reshape(prior.shape)
