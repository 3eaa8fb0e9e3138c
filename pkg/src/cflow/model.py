"""Two-branch conditional flow: multi-scale assembly, likelihood, sampling and latent procedures.

Branch A (``g``) is an unconditional multi-scale flow over the source
domain. Branch B (``f``) has the same level/step layout and every coupling
in it also sees the first half of branch A's activation at the same level
and step (taken after A's own coupling). All tensors are batched
``[N, H, W, C]`` internally; the public entry points also take a single
``[H, W, C]`` sample and return results without the batch axis.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
import os
import struct
import tempfile
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .coupling import ADDITIVE, AFFINE, Coupling
from .layers import ActNorm, GaussianPrior, InvConv1x1, squeeze, unsqueeze
from .nn import Module
from .pointcloud import chamfer_tensor
from .tensor import ParamSet, ShapeError, Tensor, adam_step, concat, no_grad, tsr_bytes, tsr_from_bytes

LN2 = math.log(2.0)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or parameter."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed, truncated or incompatible."""


# -- configuration -------------------------------------------------------------


@dataclass
class ModelConfig:
    """Architecture, objective and optimizer settings.

    Desk-scale defaults: 8x8 inputs, two levels of four steps, hidden
    width 64. Branch A couplings default to affine, branch B to additive.
    ``cycle_distance`` resolves to ``"chamfer"`` when branch B holds point
    grids and ``"l1"`` otherwise.
    """

    height_a: int = 8
    width_a: int = 8
    channels_a: int = 1
    height_b: int = 8
    width_b: int = 8
    channels_b: int = 1
    levels: int = 2
    steps: int = 4
    hidden: int = 64
    coupling_a: str = AFFINE
    coupling_b: str = ADDITIVE
    pointcloud_a: bool = False
    pointcloud_b: bool = False
    cycle_weight: float = 10.0
    cycle_distance: str | None = None
    temperature: float = 0.9
    squeeze: bool = True
    clamp: float = 5.0
    init_std: float = 0.05
    dequantize_a: bool = False
    dequantize_b: bool = False
    hilbert_order: int = 10
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.cycle_distance is None:
            self.cycle_distance = "chamfer" if self.pointcloud_b else "l1"
        self.validate()

    def validate(self) -> None:
        if self.levels < 1 or self.steps < 1 or self.hidden < 1:
            raise ValueError("levels, steps and hidden must be positive")
        if self.cycle_weight < 0:
            raise ValueError(f"cycle_weight must be >= 0, got {self.cycle_weight}")
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if self.cycle_distance not in ("l1", "chamfer"):
            raise ValueError(f"cycle_distance must be 'l1' or 'chamfer', got {self.cycle_distance!r}")
        if self.cycle_distance == "chamfer" and self.channels_b != 3:
            raise ValueError("chamfer cycle distance needs a 3-channel point grid in branch B")
        for mode in (self.coupling_a, self.coupling_b):
            if mode not in (AFFINE, ADDITIVE):
                raise ValueError(f"coupling mode must be 'affine' or 'additive', got {mode!r}")
        for tag, flag, ch in (("a", self.pointcloud_a, self.channels_a), ("b", self.pointcloud_b, self.channels_b)):
            if flag and ch != 3:
                raise ValueError(f"point-cloud branch {tag} needs 3 channels, got {ch}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        for tag in ("a", "b"):
            h, w = getattr(self, f"height_{tag}"), getattr(self, f"width_{tag}")
            c = getattr(self, f"channels_{tag}")
            if self.squeeze:
                div = 2**self.levels
                if h % div or w % div:
                    raise ValueError(f"branch {tag}: H and W ({h}x{w}) must be divisible by 2^L = {div}")
            else:
                if c % (2**self.levels):
                    raise ValueError(f"branch {tag}: without squeeze C ({c}) must be divisible by 2^L")

    def shape(self, branch: str) -> tuple[int, int, int]:
        return (
            getattr(self, f"height_{branch}"),
            getattr(self, f"width_{branch}"),
            getattr(self, f"channels_{branch}"),
        )

    def dims(self, branch: str) -> int:
        return int(np.prod(self.shape(branch)))

    def to_text(self) -> str:
        """Canonical ``key = value`` lines, sorted by key."""
        lines = []
        for f in sorted(dataclasses.fields(self), key=lambda f: f.name):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: "ModelConfig | None" = None) -> "ModelConfig":
        """Parse ``key = value`` lines (``#`` comments allowed); unknown keys are errors."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = dataclasses.asdict(base) if base is not None else {}
        if base is not None and "cycle_distance" in values:
            values["cycle_distance"] = None if not base.pointcloud_b and base.cycle_distance == "l1" else base.cycle_distance
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            values[key] = _parse_value(key, value, types[key])
        return cls(**values)


def _parse_value(key: str, value: str, typ) -> object:
    typ = str(typ)
    try:
        if typ == "bool":
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {value!r} as {typ}") from None
    if typ.startswith("str | None") and value.lower() in ("none", ""):
        return None
    return value


# -- branches --------------------------------------------------------------------


class FlowStep(Module):
    """actnorm -> invertible 1x1 conv -> coupling."""

    def __init__(self, channels: int, coupling: Coupling, rng: np.random.Generator):
        self.actnorm = ActNorm(channels)
        self.invconv = InvConv1x1(channels, rng)
        self.coupling = coupling

    def forward(self, h: Tensor, cond: Tensor | None = None) -> tuple[Tensor, Tensor]:
        h, ld1 = self.actnorm.forward(h)
        h, ld2 = self.invconv.forward(h)
        h, ld3 = self.coupling.forward(h, cond)
        return h, ld1 + ld2 + ld3

    def inverse(self, h: Tensor, cond: Tensor | None = None) -> tuple[Tensor, Tensor]:
        h, ld3 = self.coupling.inverse(h, cond)
        h, ld2 = self.invconv.inverse(h)
        h, ld1 = self.actnorm.inverse(h)
        return h, ld1 + ld2 + ld3


class FlowLevel(Module):
    """Optional squeeze, ``K`` steps, then a split whose factored half is scored by ``prior``."""

    def __init__(self, steps: list[FlowStep], prior: GaussianPrior, squeeze: bool, split: bool):
        self.steps = steps
        self.prior = prior
        self.squeeze = squeeze
        self.split = split


class Branch(Module):
    """One multi-scale flow. ``cond_channels`` lists the adapter width per level (branch B)."""

    def __init__(
        self,
        shape: tuple[int, int, int],
        levels: int,
        steps: int,
        hidden: int,
        mode: str,
        rng: np.random.Generator,
        cond_channels: Sequence[int] | None = None,
        global_feature: bool = False,
        use_squeeze: bool = True,
        init_std: float = 0.05,
        clamp: float = 5.0,
    ):
        h, w, c = shape
        self.input_shape = tuple(shape)
        self.levels: list[FlowLevel] = []
        self.step_channels: list[int] = []
        for lvl in range(levels):
            if use_squeeze:
                h, w, c = h // 2, w // 2, c * 4
            cc = cond_channels[lvl] if cond_channels else 0
            flow_steps = [
                FlowStep(
                    c,
                    Coupling(c, hidden, mode, cc, global_feature, rng, init_std, clamp),
                    rng,
                )
                for _ in range(steps)
            ]
            last = lvl == levels - 1
            zc = c if last else c - c // 2
            self.levels.append(FlowLevel(flow_steps, GaussianPrior((h, w, zc)), use_squeeze, not last))
            self.step_channels.append(c)
            if not last:
                c = c // 2

    @property
    def latent_shapes(self) -> list[tuple[int, ...]]:
        return [lvl.prior.shape for lvl in self.levels]

    def encode(self, x: Tensor, conds: Sequence[Tensor] | None = None):
        """x -> (latents per level, per-sample logdet, post-coupling activations per step)."""
        h = x
        zs, acts = [], []
        logdet = Tensor(np.zeros(x.shape[0]))
        k = 0
        for lvl in self.levels:
            if lvl.squeeze:
                h = squeeze(h)
            for step in lvl.steps:
                h, ld = step.forward(h, conds[k] if conds is not None else None)
                logdet = logdet + ld
                acts.append(h)
                k += 1
            if lvl.split:
                c = h.shape[-1] // 2
                zs.append(h[..., c:])
                h = h[..., :c]
        zs.append(h)
        return zs, logdet, acts

    def decode(self, zs: Sequence[Tensor], conds: Sequence[Tensor] | None = None):
        """latents -> (x, activations per step in forward order)."""
        if len(zs) != len(self.levels):
            raise ShapeError(f"expected {len(self.levels)} latent levels, got {len(zs)}")
        for z, lvl in zip(zs, self.levels):
            if tuple(z.shape[1:]) != lvl.prior.shape:
                raise ShapeError(f"latent shape {z.shape[1:]} does not match level shape {lvl.prior.shape}")
        k = sum(len(lvl.steps) for lvl in self.levels)
        acts: list[Tensor] = [None] * k  # type: ignore[list-item]
        h = zs[-1]
        for li in range(len(self.levels) - 1, -1, -1):
            lvl = self.levels[li]
            if lvl.split:
                h = concat([h, zs[li]], axis=-1)
            for step in reversed(lvl.steps):
                k -= 1
                acts[k] = h
                h, _ = step.inverse(h, conds[k] if conds is not None else None)
            if lvl.squeeze:
                h = unsqueeze(h)
        return h, acts

    def log_prior(self, zs: Sequence[Tensor]) -> Tensor:
        total = None
        for z, lvl in zip(zs, self.levels):
            lp = lvl.prior.log_prob(z)
            total = lp if total is None else total + lp
        return total


# -- latent containers -----------------------------------------------------------


@dataclass
class LatentStack:
    """Per-level latents ``[z_1, ..., z_L]`` (batched), first level = finest detail.

    ``activations`` caches branch A's per-step activations when the stack
    came from encoding branch A, so branch B can be decoded against it
    without recomputation.
    """

    levels: list[Tensor]
    activations: list[Tensor] | None = None
    unbatched: bool = False

    def __len__(self) -> int:
        return len(self.levels)

    def numel(self) -> int:
        return sum(int(np.prod(z.shape[1:])) for z in self.levels)

    def arrays(self) -> list[np.ndarray]:
        return [z.data[0] if self.unbatched else z.data for z in self.levels]

    def detach(self) -> "LatentStack":
        acts = None if self.activations is None else [a.detach() for a in self.activations]
        return LatentStack([z.detach() for z in self.levels], acts, self.unbatched)

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray], unbatched: bool = False) -> "LatentStack":
        levels = [Tensor(a[None] if unbatched else a) for a in arrays]
        return cls(levels, None, unbatched)


def _batch(x) -> tuple[Tensor, bool]:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.ndim == 3:
        return t.reshape((1,) + t.shape), True
    if t.ndim != 4:
        raise ShapeError(f"expected [H,W,C] or [N,H,W,C], got shape {t.shape}")
    return t, False


def _unbatch(t: Tensor, unbatched: bool) -> Tensor:
    return t.reshape(t.shape[1:]) if unbatched else t


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


# -- the model -------------------------------------------------------------------


class ConditionalFlowModel(Module):
    """Source branch ``g`` (A) and target branch ``f`` (B) coupled at every step."""

    def __init__(self, config: ModelConfig | None = None):
        self.config = config = config or ModelConfig()
        rng = np.random.default_rng(config.seed)
        self.branch_a = Branch(
            config.shape("a"),
            config.levels,
            config.steps,
            config.hidden,
            config.coupling_a,
            rng,
            None,
            config.pointcloud_a,
            config.squeeze,
            config.init_std,
            config.clamp,
        )
        cond = [c // 2 for c in self.branch_a.step_channels]
        self.branch_b = Branch(
            config.shape("b"),
            config.levels,
            config.steps,
            config.hidden,
            config.coupling_b,
            rng,
            cond,
            config.pointcloud_b,
            config.squeeze,
            config.init_std,
            config.clamp,
        )
        self.params = ParamSet(self.named_parameters())

    # -- state ------------------------------------------------------------------
    def actnorms(self, branch: str | None = None) -> list[ActNorm]:
        mods = []
        for name, mod in self.named_modules():
            if isinstance(mod, ActNorm) and (branch is None or name.startswith(f"branch_{branch}")):
                mods.append(mod)
        return mods

    @property
    def initialized(self) -> bool:
        return all(m.initialized for m in self.actnorms())

    def initialize(self, xa, xb=None) -> None:
        """Run a gradient-free encode so every actnorm gets its data-dependent init."""
        with no_grad():
            self.encode(xa, xb)

    def set_identity(self) -> None:
        """Make every layer the identity and every prior standard normal."""
        for _, mod in self.named_modules():
            if isinstance(mod, ActNorm):
                mod.set_identity()
            elif isinstance(mod, InvConv1x1):
                mod.weight.data = np.eye(mod.weight.shape[0])
            elif isinstance(mod, GaussianPrior):
                mod.mean.data = np.zeros(mod.shape)
                mod.log_var.data = np.zeros(mod.shape)
            elif isinstance(mod, Coupling):
                mod.net.conv3.kernel.data = np.zeros(mod.net.conv3.kernel.shape)
                mod.net.conv3.bias.data = np.zeros(mod.net.conv3.bias.shape)

    def branch_parameters(self, branch: str) -> dict[str, Tensor]:
        prefix = f"branch_{branch}."
        return {k: p for k, p in self.params if k.startswith(prefix)}

    def state_arrays(self) -> dict[str, np.ndarray]:
        state = {k: p.data for k, p in self.params}
        for name, mod in self.named_modules():
            if isinstance(mod, ActNorm):
                state[f"{name}.initialized"] = np.array(1.0 if mod.initialized else 0.0)
        return state

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        expected = self.state_arrays()
        missing = sorted(set(expected) - set(state))
        extra = sorted(set(state) - set(expected))
        if missing or extra:
            raise CheckpointError(f"parameter mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for k, arr in state.items():
            if arr.shape != expected[k].shape:
                raise CheckpointError(f"{k}: shape {arr.shape} does not match model shape {expected[k].shape}")
        for k, p in self.params:
            p.data = state[k].copy()
        for name, mod in self.named_modules():
            if isinstance(mod, ActNorm):
                mod.initialized = bool(state[f"{name}.initialized"] != 0)

    # -- core maps -------------------------------------------------------------
    def _check_shape(self, t: Tensor, branch: str) -> None:
        if tuple(t.shape[1:]) != self.config.shape(branch):
            raise ShapeError(
                f"branch {branch} expects samples of shape {self.config.shape(branch)}, got {tuple(t.shape[1:])}"
            )

    def encode(self, xa, xb=None):
        """Return ``(zA, zB, logdetA, logdetB)``; ``zB``/``logdetB`` are ``None`` without ``xb``."""
        ta, unbatched = _batch(xa)
        self._check_shape(ta, "a")
        za, lda, acts = self.branch_a.encode(ta)
        stack_a = LatentStack(za, acts, unbatched)
        if xb is None:
            return stack_a, None, _unbatch(lda, unbatched), None
        tb, _ = _batch(xb)
        self._check_shape(tb, "b")
        if tb.shape[0] != ta.shape[0]:
            raise ShapeError(f"batch sizes differ: {ta.shape[0]} vs {tb.shape[0]}")
        zb, ldb, _ = self.branch_b.encode(tb, acts)
        return stack_a, LatentStack(zb, None, unbatched), _unbatch(lda, unbatched), _unbatch(ldb, unbatched)

    def activations(self, za: LatentStack) -> list[Tensor]:
        if za.activations is not None:
            return za.activations
        _, acts = self.branch_a.decode(za.levels)
        za.activations = acts
        return acts

    def decode(self, zb: LatentStack, za: LatentStack) -> Tensor:
        """``xB = f(zB | zA)``."""
        xb, _ = self.branch_b.decode(zb.levels, self.activations(za))
        return _unbatch(xb, zb.unbatched)

    def decode_a(self, za: LatentStack) -> Tensor:
        xa, acts = self.branch_a.decode(za.levels)
        return _unbatch(xa, za.unbatched)

    def log_likelihood(self, xa, xb):
        """Exact ``(log p(xA), log p(xB | xA))`` in nats, per sample for batched input."""
        za, zb, lda, ldb = self.encode(xa, xb)
        unbatched = za.unbatched
        lpa = self.branch_a.log_prior(za.levels) + (lda if not unbatched else lda.reshape(1))
        lpb = self.branch_b.log_prior(zb.levels) + (ldb if not unbatched else ldb.reshape(1))
        if unbatched:
            return lpa.sum(), lpb.sum()
        return lpa, lpb

    def sample_prior(self, branch: str, n: int, temperature: float, rng) -> LatentStack:
        rng = _rng(rng)
        br = self.branch_a if branch == "a" else self.branch_b
        return LatentStack([lvl.prior.sample(n, temperature, rng) for lvl in br.levels])

    def sample_conditional(self, xa, temperature: float | None = None, seed=0) -> Tensor:
        """Encode ``xa``, draw ``zB`` from the priors at ``temperature`` and decode."""
        t = self.config.temperature if temperature is None else temperature
        za, _, _, _ = self.encode(xa)
        n = za.levels[0].shape[0]
        zb = self.sample_prior("b", n, t, seed)
        zb.unbatched = za.unbatched
        return self.decode(zb, za)

    def cycle_reconstruct(self, xa, xb, seed=0, resample_levels: int | None = None) -> Tensor:
        """Encode both, replace the first ``resample_levels`` (default L-1) B latents with N(0, I), decode."""
        za, zb, _, _ = self.encode(xa, xb)
        return self._cycle_from_latents(za, zb, _rng(seed), resample_levels)

    def _cycle_from_latents(self, za, zb, rng, resample_levels=None) -> Tensor:
        k = len(zb) - 1 if resample_levels is None else resample_levels
        levels = [Tensor(rng.standard_normal(z.shape)) if i < k else z for i, z in enumerate(zb.levels)]
        return self.decode(LatentStack(levels, None, zb.unbatched), za)

    def cycle_distance(self, xb: Tensor, xb_hat: Tensor) -> Tensor:
        """Per-sample L1 mean or symmetric Chamfer between batched targets and reconstructions."""
        if self.config.cycle_distance == "chamfer":
            n = xb.shape[0]
            return chamfer_tensor(xb_hat.reshape(n, -1, 3), xb.reshape(n, -1, 3))
        return (xb - xb_hat).abs().mean(axes=(1, 2, 3))

    # -- objective --------------------------------------------------------------
    def loss_terms(self, xa, xb, rng=0, cycle_weight: float | None = None) -> "LossTerms":
        """Joint NLL in bits per dimension plus ``cycle_weight`` times the cycle distance."""
        lam = self.config.cycle_weight if cycle_weight is None else cycle_weight
        ta, _ = _batch(xa)
        tb, _ = _batch(xb)
        rng = _rng(rng)
        za, zb, lda, ldb = self.encode(ta, tb)
        lpa = self.branch_a.log_prior(za.levels) + lda
        lpb = self.branch_b.log_prior(zb.levels) + ldb
        da, db = self.config.dims("a"), self.config.dims("b")
        nll = ((lpa + lpb) * -1.0).mean() * (1.0 / ((da + db) * LN2))
        loss = nll
        cyc_value = float("nan")
        if lam > 0:
            xb_hat = self._cycle_from_latents(za, zb, rng)
            cyc = self.cycle_distance(tb, xb_hat).mean()
            cyc_value = cyc.item()
            loss = nll + cyc * lam
        return LossTerms(
            loss=loss,
            bpd_a=float(-lpa.data.mean() / (da * LN2)),
            bpd_b_given_a=float(-lpb.data.mean() / (db * LN2)),
            bpd_joint=nll.item(),
            cycle=cyc_value,
        )


@dataclass
class LossTerms:
    loss: Tensor
    bpd_a: float
    bpd_b_given_a: float
    bpd_joint: float
    cycle: float


# -- functional surface ----------------------------------------------------------


def encode(model: ConditionalFlowModel, xa, xb=None):
    return model.encode(xa, xb)


def decode(model: ConditionalFlowModel, zb: LatentStack, za: LatentStack) -> Tensor:
    return model.decode(zb, za)


def log_likelihood(model: ConditionalFlowModel, xa, xb):
    return model.log_likelihood(xa, xb)


def sample_conditional(model: ConditionalFlowModel, xa, temperature: float | None = None, seed=0) -> Tensor:
    with no_grad():
        return model.sample_conditional(xa, temperature, seed)


def cycle_reconstruct(model: ConditionalFlowModel, xa, xb, seed=0, resample_levels=None) -> Tensor:
    return model.cycle_reconstruct(xa, xb, seed, resample_levels)


def total_loss(model: ConditionalFlowModel, batch, rng=0, cycle_weight: float | None = None) -> Tensor:
    """Scalar training objective on a ``(xA, xB)`` batch."""
    xa, xb = batch
    return model.loss_terms(xa, xb, rng, cycle_weight).loss


# -- training --------------------------------------------------------------------


@dataclass
class TrainRecord:
    step: int
    phase: str
    loss: float
    bpd_a: float
    bpd_b_given_a: float
    cycle: float
    wall_time: float

    COLUMNS = ("step", "phase", "loss", "bpd_a", "bpd_b_given_a", "cycle", "wall_time")

    def to_line(self) -> str:
        return "\t".join(
            [str(self.step), self.phase] + [repr(float(getattr(self, c))) for c in self.COLUMNS[2:]]
        )

    @classmethod
    def from_line(cls, line: str) -> "TrainRecord":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != len(cls.COLUMNS):
            raise ValueError(f"metrics line has {len(parts)} fields, expected {len(cls.COLUMNS)}")
        return cls(int(parts[0]), parts[1], *(float(p) for p in parts[2:]))


def metrics_header() -> str:
    return "\t".join(TrainRecord.COLUMNS)


def read_metrics(path) -> list[TrainRecord]:
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        if header != metrics_header():
            raise ValueError(f"{path}: unexpected metrics header {header!r}")
        return [TrainRecord.from_line(line) for line in fh if line.strip()]


@dataclass
class TrainResult:
    model: ConditionalFlowModel
    records: list[TrainRecord] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records if r.phase == "train"]


def _dataset_arrays(dataset) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(dataset, "a") and hasattr(dataset, "b"):
        return np.asarray(dataset.a, dtype=np.float64), np.asarray(dataset.b, dtype=np.float64)
    a, b = dataset
    return np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)


def evaluate(model: ConditionalFlowModel, dataset, batch_size: int = 64, seed: int = 0) -> dict[str, float]:
    """Deterministic full-dataset BPD (no dequantization noise) and cycle distance."""
    a, b = _dataset_arrays(dataset)
    rng = np.random.default_rng(seed)
    cfg = model.config
    sums = {"bpd_a": 0.0, "bpd_b_given_a": 0.0, "cycle": 0.0}
    with no_grad():
        for start in range(0, len(a), batch_size):
            xa, xb = Tensor(a[start : start + batch_size]), Tensor(b[start : start + batch_size])
            lpa, lpb = model.log_likelihood(xa, xb)
            sums["bpd_a"] += float(-lpa.data.sum()) / (cfg.dims("a") * LN2)
            sums["bpd_b_given_a"] += float(-lpb.data.sum()) / (cfg.dims("b") * LN2)
            za, zb, _, _ = model.encode(xa, xb)
            xb_hat = model._cycle_from_latents(za, zb, rng)
            sums["cycle"] += float(model.cycle_distance(xb, xb_hat).data.sum())
    n = len(a)
    out = {k: v / n for k, v in sums.items()}
    if cfg.dequantize_a:
        out["bpd_a"] += 8.0
    if cfg.dequantize_b:
        out["bpd_b_given_a"] += 8.0
    da, db = cfg.dims("a"), cfg.dims("b")
    out["bpd_joint"] = (out["bpd_a"] * da + out["bpd_b_given_a"] * db) / (da + db)
    return out


def train(
    model: ConditionalFlowModel,
    dataset,
    steps: int,
    *,
    log_path: str | os.PathLike | None = None,
    checkpoint_path: str | os.PathLike | None = None,
    final_eval: bool = False,
    callback: Callable[[TrainRecord], None] | None = None,
) -> TrainResult:
    """Minimize the joint NLL + cycle objective with Adam.

    Batches are drawn from per-epoch permutations of a generator seeded from
    ``config.seed``, so two runs with the same config and data produce the
    same loss sequence. A non-finite loss or parameter raises
    :class:`DivergenceError`; the last periodic checkpoint (if any) is left
    untouched.
    """
    cfg = model.config
    a, b = _dataset_arrays(dataset)
    result = TrainResult(model)
    log = None
    if log_path is not None:
        log = open(log_path, "w")
        log.write(metrics_header() + "\n")
    try:
        if steps <= 0 or len(a) == 0:
            if checkpoint_path is not None:
                save_checkpoint(model, checkpoint_path)
            return result
        rng = np.random.default_rng([cfg.seed, 1])
        order = rng.permutation(len(a))
        pos = 0
        start = time.perf_counter()
        for step in range(1, steps + 1):
            if pos + cfg.batch_size > len(a):
                order = rng.permutation(len(a))
                pos = 0
            idx = order[pos : pos + cfg.batch_size]
            pos += cfg.batch_size
            xa, xb = a[idx], b[idx]
            if cfg.dequantize_a:
                xa = xa + rng.uniform(0.0, 1.0 / 256.0, size=xa.shape)
            if cfg.dequantize_b:
                xb = xb + rng.uniform(0.0, 1.0 / 256.0, size=xb.shape)
            if not model.initialized:
                model.initialize(xa, xb)
            model.params.zero_grad()
            terms = model.loss_terms(xa, xb, rng)
            if not terms.loss.is_finite():
                raise DivergenceError(_divergence_message(model, step, "loss"))
            terms.loss.backward()
            adam_step(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
            if not all(np.all(np.isfinite(p.data)) for _, p in model.params):
                raise DivergenceError(_divergence_message(model, step, "parameters"))
            rec = TrainRecord(
                step,
                "train",
                terms.loss.item(),
                terms.bpd_a,
                terms.bpd_b_given_a,
                terms.cycle,
                time.perf_counter() - start,
            )
            result.records.append(rec)
            if log is not None:
                log.write(rec.to_line() + "\n")
            if callback is not None:
                callback(rec)
            if checkpoint_path is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(model, checkpoint_path)
        if final_eval:
            ev = evaluate(model, (a, b))
            rec = TrainRecord(
                steps, "eval", ev["bpd_joint"], ev["bpd_a"], ev["bpd_b_given_a"], ev["cycle"],
                time.perf_counter() - start,
            )
            result.records.append(rec)
            if log is not None:
                log.write(rec.to_line() + "\n")
        if checkpoint_path is not None:
            save_checkpoint(model, checkpoint_path)
        return result
    finally:
        if log is not None:
            log.close()


def _divergence_message(model: ConditionalFlowModel, step: int, what: str) -> str:
    norms = model.params.norms()
    worst = sorted(norms.items(), key=lambda kv: -kv[1] if np.isfinite(kv[1]) else -np.inf)[:5]
    text = ", ".join(f"{k}={v:.3g}" for k, v in worst)
    return f"non-finite {what} at step {step}; largest parameter norms: {text}"


# -- latent-space procedures -------------------------------------------------------


def partial_embedding(model: ConditionalFlowModel, x, level: int, seed=0, cond=None) -> Tensor:
    """Encode, replace latents ``z_1..z_level`` with N(0, I) samples and decode.

    Works on branch A, or on branch B given ``cond`` (the branch A input).
    """
    L = model.config.levels
    if not 0 <= level <= L:
        raise ValueError(f"level must be in [0, {L}], got {level}")
    rng = _rng(seed)
    with no_grad():
        if cond is None:
            za, _, _, _ = model.encode(x)
            levels = [Tensor(rng.standard_normal(z.shape)) if i < level else z for i, z in enumerate(za.levels)]
            return model.decode_a(LatentStack(levels, None, za.unbatched))
        za, zb, _, _ = model.encode(cond, x)
        levels = [Tensor(rng.standard_normal(z.shape)) if i < level else z for i, z in enumerate(zb.levels)]
        return model.decode(LatentStack(levels, None, zb.unbatched), za)


def densify(model: ConditionalFlowModel, x, passes: int, seed=0, cond=None, levels: int = 1) -> np.ndarray:
    """Union of ``passes`` decodes, each with the first ``levels`` latents resampled.

    ``x`` is one point grid ``[H, W, 3]``; returns ``[passes * H * W, 3]``.
    """
    if passes < 1:
        raise ValueError("passes must be >= 1")
    rng = _rng(seed)
    clouds = []
    for _ in range(passes):
        out = partial_embedding(model, x, levels, rng, cond)
        clouds.append(out.data.reshape(-1, 3))
    return np.concatenate(clouds, axis=0)


def interpolate(model: ConditionalFlowModel, x1, x2, t: float, cond1=None, cond2=None) -> Tensor:
    """Decode ``(1 - t) z(x1) + t z(x2)`` level by level.

    Without conditions this interpolates in branch A; with ``cond1``/``cond2``
    it interpolates branch B and its conditioning latents together.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must be in [0, 1], got {t}")
    with no_grad():
        if (cond1 is None) != (cond2 is None):
            raise ValueError("give both conditions or neither")
        if cond1 is None:
            z1, _, _, _ = model.encode(x1)
            z2, _, _, _ = model.encode(x2)
            if t == 0.0:
                return model.decode_a(z1)
            if t == 1.0:
                return model.decode_a(z2)
            mix = [a * (1.0 - t) + b * t for a, b in zip(z1.levels, z2.levels)]
            return model.decode_a(LatentStack(mix, None, z1.unbatched))
        a1, b1, _, _ = model.encode(cond1, x1)
        a2, b2, _, _ = model.encode(cond2, x2)
        if t == 0.0:
            return model.decode(b1, a1)
        if t == 1.0:
            return model.decode(b2, a2)
        za = LatentStack([p * (1.0 - t) + q * t for p, q in zip(a1.levels, a2.levels)], None, a1.unbatched)
        zb = LatentStack([p * (1.0 - t) + q * t for p, q in zip(b1.levels, b2.levels)], None, b1.unbatched)
        return model.decode(zb, za)


def manipulate(model: ConditionalFlowModel, xb1, xa1, xa2) -> Tensor:
    """Re-synthesise ``xb1`` under a new source ``xa2``: ``f(f^-1(xb1 | xa1) | g^-1(xa2))``."""
    with no_grad():
        za1, zb1, _, _ = model.encode(xa1, xb1)
        za2, _, _, _ = model.encode(xa2)
        if za2.unbatched != zb1.unbatched:
            raise ShapeError("xb1 and xa2 must both be batched or both single samples")
        return model.decode(zb1, za2)


def style_transfer(
    model_ab: ConditionalFlowModel,
    model_ba: ConditionalFlowModel,
    content,
    style,
) -> Tensor:
    """Render ``content``'s structure with ``style``'s appearance.

    ``model_ba`` maps images to structure and supplies the most likely
    (T = 0) structure of both images; ``model_ab`` then re-synthesises the
    style image under the content's structure.
    """
    if model_ab.config.shape("a") != model_ba.config.shape("b") or model_ab.config.shape("b") != model_ba.config.shape("a"):
        raise ShapeError("style transfer needs two models with swapped domains")
    structure_content = sample_conditional(model_ba, content, 0.0, 0)
    structure_style = sample_conditional(model_ba, style, 0.0, 0)
    return manipulate(model_ab, style, structure_style, structure_content)


# -- checkpoints -----------------------------------------------------------------

_CKPT_MAGIC = b"CFW1"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(model: ConditionalFlowModel) -> bytes:
    """CFW1: magic, u32 version, u32 config length + config text, u32 count,
    ``count`` x (u32 name length, name, TSR1 blob), then an 8-byte blake2b checksum."""
    cfg = model.config.to_text().encode()
    state = model.state_arrays()
    parts = [_CKPT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg, struct.pack("<I", len(state))]
    for name, arr in state.items():
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(tsr_bytes(arr))
    body = b"".join(parts)
    return body + hashlib.blake2b(body, digest_size=8).digest()


def save_checkpoint(model: ConditionalFlowModel, path) -> None:
    """Write atomically (temporary file in the same directory, then rename)."""
    data = checkpoint_bytes(model)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".ckpt-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def model_from_bytes(buf: bytes) -> ConditionalFlowModel:
    if len(buf) < 4 + 8 + 8 or buf[:4] != _CKPT_MAGIC:
        raise CheckpointError("not a CFW1 checkpoint (bad magic or too short)")
    body, digest = buf[:-8], buf[-8:]
    if hashlib.blake2b(body, digest_size=8).digest() != digest:
        raise CheckpointError("checksum mismatch: checkpoint is truncated or corrupted")
    version, cfg_len = struct.unpack_from("<II", body, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    pos = 12
    try:
        config = ModelConfig.from_text(body[pos : pos + cfg_len].decode())
    except (ValueError, TypeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"bad config section: {exc}") from None
    pos += cfg_len
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    state = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos : pos + nlen].decode()
            pos += nlen
            arr, pos = tsr_from_bytes(body, pos)
            state[name] = arr
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"bad parameter section: {exc}") from None
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} unexpected bytes after parameters")
    model = ConditionalFlowModel(config)
    model.load_state_arrays(state)
    return model


def load_checkpoint(path) -> ConditionalFlowModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
