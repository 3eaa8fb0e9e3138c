"""Point-cloud preprocessing: Hilbert ordering, grid resampling and Chamfer distance."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .tensor import Tensor

__all__ = [
    "PointCloud",
    "HilbertConfig",
    "hilbert_index",
    "hilbert_indices",
    "hilbert_sort",
    "resample_reshape",
    "chamfer",
    "chamfer_tensor",
    "read_xyz",
    "write_xyz",
]


@dataclass
class HilbertConfig:
    """Quantization depth of the 3-D Hilbert curve (bits per axis)."""

    order: int = 10

    def __post_init__(self):
        if not 1 <= self.order <= 21:
            raise ValueError(f"hilbert order must be in [1, 21], got {self.order}")


@dataclass
class PointCloud:
    """Points in the unit cube plus the affine map back to the original frame.

    ``original = points * scale + offset``.
    """

    points: np.ndarray
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape [n, 3], got {pts.shape}")
        if len(pts) == 0:
            raise ValueError("point cloud is empty")
        self.points = pts
        self.offset = np.asarray(self.offset, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def normalize(cls, points) -> "PointCloud":
        """Fit the bounding box into the unit cube with one uniform scale (aspect kept)."""
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
            raise ValueError(f"expected a non-empty [n, 3] array, got shape {pts.shape}")
        lo = pts.min(axis=0)
        extent = float((pts.max(axis=0) - lo).max())
        scale = extent if extent > 0 else 1.0
        return cls(np.clip((pts - lo) / scale, 0.0, 1.0), lo, scale)

    def denormalized(self) -> np.ndarray:
        return self.points * self.scale + self.offset


def _points(pc) -> np.ndarray:
    return pc.points if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64)


def _quantize(points: np.ndarray, order: int) -> np.ndarray:
    if np.any(points < 0.0) or np.any(points > 1.0) or not np.all(np.isfinite(points)):
        raise ValueError("hilbert coordinates must lie in [0, 1]")
    side = 1 << order
    return np.minimum((points * side).astype(np.int64), side - 1)


def hilbert_indices(points, cfg: HilbertConfig | None = None) -> np.ndarray:
    """Vectorised Hilbert distance of each point in ``[n, 3]``.

    Uses Skilling's transpose algorithm: undo the excess work on the
    axis bits, Gray-encode, then interleave with axis 0 as the most
    significant bit.
    """
    cfg = cfg or HilbertConfig()
    order = cfg.order
    x = [c.copy() for c in _quantize(np.atleast_2d(_points(points)), order).T]
    n = len(x)
    q = 1 << (order - 1)
    while q > 1:
        p = q - 1
        for i in range(n):
            hit = (x[i] & q) != 0
            t = (x[0] ^ x[i]) & p
            x[0] = np.where(hit, x[0] ^ p, x[0] ^ t)
            if i:
                x[i] = np.where(hit, x[i], x[i] ^ t)
        q >>= 1
    for i in range(1, n):
        x[i] = x[i] ^ x[i - 1]
    t = np.zeros_like(x[0])
    q = 1 << (order - 1)
    while q > 1:
        t = np.where((x[n - 1] & q) != 0, t ^ (q - 1), t)
        q >>= 1
    for i in range(n):
        x[i] = x[i] ^ t
    index = np.zeros_like(x[0])
    for b in range(order - 1, -1, -1):
        for i in range(n):
            index = (index << 1) | ((x[i] >> b) & 1)
    return index


def hilbert_index(p, cfg: HilbertConfig | None = None) -> int:
    """Distance along the 3-D Hilbert curve of the cell containing ``p``."""
    pt = np.asarray(p, dtype=np.float64).reshape(1, 3)
    return int(hilbert_indices(pt, cfg)[0])


def hilbert_sort(pc, cfg: HilbertConfig | None = None) -> np.ndarray:
    """Permutation ordering the points along the curve; ties keep input order."""
    return np.argsort(hilbert_indices(_points(pc), cfg), kind="stable")


def resample_reshape(
    pc,
    height: int,
    width: int,
    seed: int | np.random.Generator = 0,
    cfg: HilbertConfig | None = None,
) -> np.ndarray:
    """Select ``height * width`` points, Hilbert-sort them and fill an ``[H, W, 3]`` grid row-major.

    Clouds larger than the grid are subsampled without replacement; smaller
    ones keep every point and draw the deficit with replacement.
    """
    pts = _points(pc)
    if len(pts) == 0:
        raise ValueError("cannot resample an empty point cloud")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    target = height * width
    n = len(pts)
    if n >= target:
        idx = np.sort(rng.choice(n, size=target, replace=False)) if n > target else np.arange(n)
    else:
        idx = np.concatenate([np.arange(n), rng.choice(n, size=target - n, replace=True)])
    chosen = pts[idx]
    return chosen[hilbert_sort(chosen, cfg)].reshape(height, width, 3)


def _nearest(a: np.ndarray, b: np.ndarray, method: str) -> tuple[np.ndarray, np.ndarray]:
    if method == "kdtree":
        dist, idx = cKDTree(b).query(a, k=1)
        return dist, idx
    if method == "brute":
        d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
        idx = d2.argmin(axis=1)
        return np.sqrt(d2[np.arange(len(a)), idx]), idx
    raise ValueError(f"unknown chamfer method {method!r}")


def chamfer(a, b, method: str = "kdtree") -> float:
    """Symmetric Chamfer distance ``0.5 * (mean_a min_b |p-q| + mean_b min_a |p-q|)``.

    ``method="kdtree"`` uses a k-d tree for the nearest-neighbour queries;
    ``method="brute"`` evaluates the full distance matrix.
    """
    pa = _points(a).reshape(-1, 3)
    pb = _points(b).reshape(-1, 3)
    if len(pa) == 0 or len(pb) == 0:
        raise ValueError("chamfer distance needs non-empty point clouds")
    da, _ = _nearest(pa, pb, method)
    db, _ = _nearest(pb, pa, method)
    return 0.5 * (float(da.mean()) + float(db.mean()))


def chamfer_tensor(a: Tensor, b) -> Tensor:
    """Per-sample symmetric Chamfer distance of batched clouds ``[N, P, 3]`` vs ``[N, Q, 3]``.

    Nearest-neighbour assignments are computed once and held fixed for the
    gradient, which then flows into the coordinates of both arguments.
    """
    if not isinstance(b, Tensor):
        b = Tensor(b)
    ad, bd = a.data, b.data
    n, p, _ = ad.shape
    q = bd.shape[1]
    ia = np.empty((n, p), dtype=np.int64)
    ib = np.empty((n, q), dtype=np.int64)
    for k in range(n):
        ia[k] = _nearest(ad[k], bd[k], "brute")[1]
        ib[k] = _nearest(bd[k], ad[k], "brute")[1]
    rows = np.arange(n)[:, None]
    da = a - b[rows, ia]
    db = b - a[rows, ib]
    # sqrt(x) is not differentiable at 0; coincident pairs contribute a zero subgradient
    na = (da.square().sum(axes=2) + 1e-300).sqrt()
    nb = (db.square().sum(axes=2) + 1e-300).sqrt()
    return (na.mean(axes=1) + nb.mean(axes=1)) * 0.5


def read_xyz(path: str | os.PathLike) -> np.ndarray:
    """Read ``x y z`` lines; blank lines and ``#`` comments are skipped."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            parts = text.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 coordinates, got {len(parts)}")
            rows.append([float(v) for v in parts])
    if not rows:
        return np.zeros((0, 3))
    return np.asarray(rows, dtype=np.float64)


def write_xyz(path: str | os.PathLike, points) -> None:
    pts = _points(points).reshape(-1, 3)
    with open(path, "w") as fh:
        for x, y, z in pts.tolist():
            fh.write(f"{x!r} {y!r} {z!r}\n")
