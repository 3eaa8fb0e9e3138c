"""Dataset ingestion, 8-bit PGM/PPM codecs and synthetic paired datasets."""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pointcloud import HilbertConfig, PointCloud, read_xyz, resample_reshape
from .tensor import load_tsr

IMAGE_SUFFIXES = (".pgm", ".ppm")
CLOUD_SUFFIXES = (".xyz", ".txt")
TENSOR_SUFFIXES = (".tsr",)
SUPPORTED_SUFFIXES = IMAGE_SUFFIXES + CLOUD_SUFFIXES + TENSOR_SUFFIXES


@dataclass
class PairedDataset:
    """Aligned samples ``a[i] <-> b[i]`` sharing the stem ``stems[i]``."""

    a: np.ndarray
    b: np.ndarray
    stems: list[str] = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.a) != len(self.b):
            raise ValueError(f"branch sizes differ: {len(self.a)} vs {len(self.b)}")
        if not self.stems:
            self.stems = [f"{i:04d}" for i in range(len(self.a))]

    def __len__(self) -> int:
        return len(self.a)

    def subset(self, idx) -> "PairedDataset":
        idx = np.asarray(idx)
        extras = {k: v[idx] for k, v in self.extras.items()}
        return PairedDataset(self.a[idx], self.b[idx], [self.stems[i] for i in idx], extras)


# -- PGM / PPM -------------------------------------------------------------------


def _header_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise ValueError("truncated PNM header")
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    return tokens, pos + 1  # one whitespace byte separates header and raster


def read_pnm(path) -> np.ndarray:
    """Read a binary 8-bit PGM (P5) or PPM (P6) as ``[H, W, C]`` floats in [0, 1]."""
    buf = Path(path).read_bytes()
    tokens, pos = _header_tokens(buf, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: not a binary PGM/PPM (magic {magic!r})")
    width, height, maxval = (int(t) for t in tokens[1:])
    if not 0 < maxval < 256:
        raise ValueError(f"{path}: only 8-bit images are supported (maxval {maxval})")
    channels = 1 if magic == b"P5" else 3
    size = width * height * channels
    raster = buf[pos : pos + size]
    if len(raster) != size:
        raise ValueError(f"{path}: truncated raster ({len(raster)} of {size} bytes)")
    img = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    return img.astype(np.float64) / maxval


def write_pnm(path, image) -> None:
    """Write ``[H, W]``, ``[H, W, 1]`` or ``[H, W, 3]`` values in [0, 1] as 8-bit PGM/PPM."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"PNM images need 1 or 3 channels, got shape {img.shape}")
    h, w, c = img.shape
    raster = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + raster.tobytes())


# -- ingestion -------------------------------------------------------------------


def load_sample(path, shape: tuple[int, int, int], seed=0, hilbert: HilbertConfig | None = None) -> np.ndarray:
    """Load one sample and bring it to ``shape`` = (H, W, C).

    Point-cloud text is normalised into the unit cube and resampled onto the
    grid; images and tensors must already have the configured shape.
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in IMAGE_SUFFIXES:
        x = read_pnm(path)
    elif suffix in TENSOR_SUFFIXES:
        x = load_tsr(path)
    elif suffix in CLOUD_SUFFIXES:
        if shape[2] != 3:
            raise ValueError(f"{path}: point clouds need a 3-channel branch, configured {shape}")
        pts = read_xyz(path)
        x = resample_reshape(PointCloud.normalize(pts), shape[0], shape[1], seed, hilbert)
    else:
        raise ValueError(f"{path}: unsupported file type {suffix!r}")
    if x.shape != tuple(shape):
        raise ValueError(f"{path}: sample shape {x.shape} does not match configured shape {tuple(shape)}")
    return x


def _index_dir(directory) -> dict[str, Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory}: not a directory")
    files: dict[str, Path] = {}
    for p in sorted(directory.iterdir()):
        if p.is_file() and p.suffix.lower() in SUPPORTED_SUFFIXES:
            if p.stem in files:
                raise ValueError(f"{directory}: two files share the stem {p.stem!r}")
            files[p.stem] = p
    return files


def ingest_pairs(dir_a, dir_b, config=None) -> PairedDataset:
    """Pair files with equal stems from two directories, in sorted stem order.

    ``config`` (a :class:`~cflow.model.ModelConfig`) fixes the branch shapes,
    the resampling seed and the Hilbert order; without it default 8x8
    shapes are assumed.
    """
    if config is None:
        from .model import ModelConfig

        config = ModelConfig()
    files_a, files_b = _index_dir(dir_a), _index_dir(dir_b)
    only_a = sorted(set(files_a) - set(files_b))
    only_b = sorted(set(files_b) - set(files_a))
    if only_a or only_b:
        raise ValueError(f"unmatched stems: only in {dir_a}: {only_a}; only in {dir_b}: {only_b}")
    stems = sorted(files_a)
    shape_a, shape_b = config.shape("a"), config.shape("b")
    if not stems:
        warnings.warn(f"no samples found in {dir_a} and {dir_b}", stacklevel=2)
        return PairedDataset(np.zeros((0,) + shape_a), np.zeros((0,) + shape_b), [])
    hilbert = HilbertConfig(config.hilbert_order)
    a, b = [], []
    for i, stem in enumerate(stems):
        for branch, files, shape, out in (("a", files_a, shape_a, a), ("b", files_b, shape_b, b)):
            rng = np.random.default_rng([config.seed, i, ord(branch)])
            try:
                out.append(load_sample(files[stem], shape, rng, hilbert))
            except (OSError, ValueError) as exc:
                raise ValueError(f"cannot read {files[stem]}: {exc}") from None
    return PairedDataset(np.stack(a), np.stack(b), stems)


def save_pairs(dataset: PairedDataset, dir_a, dir_b) -> None:
    """Write a dataset as ``<stem>.pgm``/``.ppm`` images or ``<stem>.tsr`` tensors."""
    from .tensor import save_tsr

    for directory, arr in ((dir_a, dataset.a), (dir_b, dataset.b)):
        os.makedirs(directory, exist_ok=True)
        for stem, x in zip(dataset.stems, arr):
            is_image = x.shape[-1] in (1, 3) and x.min() >= 0.0 and x.max() <= 1.0 and _is_8bit(x)
            if is_image:
                write_pnm(Path(directory) / f"{stem}{'.pgm' if x.shape[-1] == 1 else '.ppm'}", x)
            else:
                save_tsr(Path(directory) / f"{stem}.tsr", x)


def _is_8bit(x: np.ndarray) -> bool:
    return bool(np.all(np.abs(x * 255.0 - np.rint(x * 255.0)) < 1e-9))


# -- synthetic data --------------------------------------------------------------


def smooth_fields(n: int, size: int = 8, rng=None, modes: int = 3) -> np.ndarray:
    """Random low-frequency fields in [0, 1], shape ``[n, size, size, 1]``."""
    rng = np.random.default_rng(rng)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    out = np.zeros((n, size, size))
    for _ in range(modes):
        fy, fx = rng.uniform(0.0, 1.2, size=(2, n, 1, 1)) * (2 * np.pi / size)
        phase = rng.uniform(0, 2 * np.pi, size=(n, 1, 1))
        amp = rng.uniform(0.5, 1.0, size=(n, 1, 1))
        out += amp * np.cos(fy * yy + fx * xx + phase)
    lo = out.min(axis=(1, 2), keepdims=True)
    hi = out.max(axis=(1, 2), keepdims=True)
    return ((out - lo) / np.maximum(hi - lo, 1e-12) * 0.8 + 0.1)[..., None]


def toy_image_pairs(n: int = 512, size: int = 8, noise: float = 0.02, seed: int = 0) -> PairedDataset:
    """Image -> image pairs: ``xB = 1 - xA`` mirrored left-right, plus Gaussian noise."""
    rng = np.random.default_rng(seed)
    a = smooth_fields(n, size, rng)
    target = 1.0 - a[:, :, ::-1]
    b = target + noise * rng.standard_normal(a.shape)
    return PairedDataset(a, b, extras={"target": target})


def ellipsoid_points(radii: np.ndarray, count: int, rng, center: float = 0.5) -> np.ndarray:
    """``count`` points uniform in angle on an axis-aligned ellipsoid surface."""
    v = rng.standard_normal((count, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return center + v * radii


def render_ellipse(radii: np.ndarray, size: int) -> np.ndarray:
    """Top-down silhouette of the ellipsoid, brightness proportional to its height."""
    c = (np.arange(size) + 0.5) / size - 0.5
    yy, xx = np.meshgrid(c, c, indexing="ij")
    inside = (xx / radii[0]) ** 2 + (yy / radii[1]) ** 2
    depth = np.sqrt(np.clip(1.0 - inside, 0.0, None)) * radii[2] / 0.45
    return np.clip(depth, 0.0, 1.0)[..., None]


def toy_pointgrid_pairs(
    n: int = 512,
    size: int = 8,
    dense: int = 512,
    seed: int = 0,
    hilbert: HilbertConfig | None = None,
) -> PairedDataset:
    """Image -> point-grid pairs.

    Each sample is an axis-aligned ellipsoid with random radii. Branch A is a
    ``size x size`` height-map render of it, branch B holds ``size * size``
    surface points resampled onto the grid in Hilbert order. ``extras``
    carries the radii and a ``dense``-point ground-truth cloud per sample.
    """
    rng = np.random.default_rng(seed)
    radii = rng.uniform(0.15, 0.45, size=(n, 3))
    a = np.stack([render_ellipse(r, size) for r in radii])
    b = np.empty((n, size, size, 3))
    gt = np.empty((n, dense, 3))
    for i, r in enumerate(radii):
        b[i] = resample_reshape(ellipsoid_points(r, size * size, rng), size, size, rng, hilbert)
        gt[i] = ellipsoid_points(r, dense, rng)
    return PairedDataset(a, b, extras={"radii": radii, "dense": gt})


def structure_masks(n: int, size: int = 8, rng=None) -> np.ndarray:
    """Binary rectangle masks ``[n, size, size, 1]`` with random extent and position."""
    rng = np.random.default_rng(rng)
    masks = np.zeros((n, size, size, 1))
    for i in range(n):
        h, w = rng.integers(2, size - 1, size=2)
        top, left = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
        masks[i, top : top + h, left : left + w] = 1.0
    return masks


def toy_structure_texture(n: int = 512, size: int = 8, noise: float = 0.03, seed: int = 0) -> PairedDataset:
    """Structure mask (A) -> RGB rendering (B) with per-sample foreground/background colours."""
    rng = np.random.default_rng(seed)
    mask = structure_masks(n, size, rng)
    fg = rng.uniform(0.55, 0.95, size=(n, 1, 1, 3))
    bg = rng.uniform(0.05, 0.45, size=(n, 1, 1, 3))
    b = mask * fg + (1.0 - mask) * bg + noise * rng.standard_normal((n, size, size, 3))
    return PairedDataset(mask, b, extras={"fg": fg[:, 0, 0], "bg": bg[:, 0, 0]})
