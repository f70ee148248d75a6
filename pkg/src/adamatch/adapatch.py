"""Adaptive patch extraction.

Every grid cell predicts an offset of its patch center and a patch size,
both in full-image normalized units: offsets go through Tanh so a center can
move anywhere in (-1, 1), sizes through ReLU(Tanh(.)) so they span [0, 1).
Corners follow from center + offset +/- size/2, and patch features are m x m
bilinear samples inside the corners, flattened and projected.

Out-of-bounds corners are legal; sampling clamps to the border cell centers,
so gradients never die at the image edge. Zero-size patches are legal too
(all samples collapse onto the center point).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nm
from .errors import ContractViolation
from .numerics import Tape, Tensor


@dataclass
class FeatureGrid:
    """A H x W grid of feature vectors; cell (r, c) has normalized center
    ((c + 0.5) / W, (r + 0.5) / H)."""

    data: Tensor  # [H, W, C]

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ContractViolation(f"FeatureGrid wants [H, W, C], got {self.data.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def cell_centers(self) -> np.ndarray:
        """Normalized (x, y) centers of all cells, row-major, shape [H*W, 2]."""
        return grid_cell_centers(self.height, self.width)


def grid_cell_centers(H: int, W: int) -> np.ndarray:
    xs = (np.arange(W) + 0.5) / W
    ys = (np.arange(H) + 0.5) / H
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=-1)


@dataclass
class AdaptivePatch:
    """One predicted patch in normalized image units."""

    cx: float
    cy: float
    dx: float
    dy: float
    sw: float
    sh: float

    @property
    def ax(self) -> float:
        return self.cx + self.dx - self.sw / 2.0

    @property
    def ay(self) -> float:
        return self.cy + self.dy - self.sh / 2.0

    @property
    def bx(self) -> float:
        return self.cx + self.dx + self.sw / 2.0

    @property
    def by(self) -> float:
        return self.cy + self.dy + self.sh / 2.0

    def as_record(self, index: int) -> dict:
        return {"index": index, "cx": self.cx, "cy": self.cy, "dx": self.dx,
                "dy": self.dy, "sw": self.sw, "sh": self.sh,
                "ax": self.ax, "ay": self.ay, "bx": self.bx, "by": self.by}


@dataclass
class Geometry:
    """Differentiable batched patch geometry, each field shaped [B, N]."""

    centers: np.ndarray  # [N, 2] constant lattice
    dx: Tensor
    dy: Tensor
    sw: Tensor
    sh: Tensor
    ax: Tensor
    ay: Tensor
    bx: Tensor
    by: Tensor

    def patches(self, batch_index: int = 0) -> list[AdaptivePatch]:
        out = []
        for n in range(self.centers.shape[0]):
            out.append(AdaptivePatch(
                cx=float(self.centers[n, 0]), cy=float(self.centers[n, 1]),
                dx=float(self.dx.values[batch_index, n]),
                dy=float(self.dy.values[batch_index, n]),
                sw=float(self.sw.values[batch_index, n]),
                sh=float(self.sh.values[batch_index, n])))
        return out


class AdaPatchParams:
    """Shared projection, four geometry heads, output projection, lattice side m.

    The heads map the geometry query dim to 1; f5 maps m*m*source_channels to
    the stage output dim. A min_size floor (default 0) exists for experiments.
    """

    def __init__(self, shared_w: Tensor, shared_b: Tensor,
                 head_ws: list[Tensor], head_bs: list[Tensor],
                 f5_w: Tensor, f5_b: Tensor, m: int, min_size: float = 0.0):
        if m < 1:
            raise ContractViolation("sample lattice side m must be >= 1")
        if len(head_ws) != 4 or len(head_bs) != 4:
            raise ContractViolation("AdaPatch needs exactly four geometry heads")
        self.shared_w = shared_w
        self.shared_b = shared_b
        self.head_ws = head_ws
        self.head_bs = head_bs
        self.f5_w = f5_w
        self.f5_b = f5_b
        self.m = m
        self.min_size = min_size

    @property
    def geom_dim(self) -> int:
        return self.shared_w.shape[0]

    @property
    def f5_in(self) -> int:
        return self.f5_w.shape[0]

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.shared.W": self.shared_w, f"{prefix}.shared.b": self.shared_b,
               f"{prefix}.f5.W": self.f5_w, f"{prefix}.f5.b": self.f5_b}
        for i, (w, b) in enumerate(zip(self.head_ws, self.head_bs), start=1):
            out[f"{prefix}.f{i}.W"] = w
            out[f"{prefix}.f{i}.b"] = b
        return out


def init_adapatch_params(rng: np.random.Generator, tape: Tape, geom_dim: int,
                         source_channels: int, m: int, out_dim: int,
                         init_size: float = 0.0, min_size: float = 0.0) -> AdaPatchParams:
    """Heads start near zero so initial patches sit close to the fixed
    lattice; size biases start at atanh(init_size) so patches begin roughly
    covering their cell. Exactly-zero heads would leave the shared layer
    without gradient until the first step, so a small symmetry break is used.
    """
    mk = tape.parameter
    shared_w = mk(rng.normal(0.0, 1.0 / math.sqrt(geom_dim), (geom_dim, geom_dim)))
    shared_b = mk(np.zeros(geom_dim))
    head_ws = [mk(rng.normal(0.0, 0.02, (geom_dim, 1))) for _ in range(4)]
    size_bias = math.atanh(min(max(init_size, 0.0), 0.999))
    head_bs = [mk(np.zeros(1)), mk(np.zeros(1)),
               mk(np.full(1, size_bias)), mk(np.full(1, size_bias))]
    f5_in = m * m * source_channels
    f5_w = mk(rng.normal(0.0, 1.0 / math.sqrt(f5_in), (f5_in, out_dim)))
    f5_b = mk(np.zeros(out_dim))
    return AdaPatchParams(shared_w, shared_b, head_ws, head_bs, f5_w, f5_b, m,
                          min_size=min_size)


def predict_geometry_tensors(params: AdaPatchParams, grid_values: Tensor,
                             H: int, W: int) -> Geometry:
    """Batched differentiable geometry for a [B, H, W, C] query grid."""
    B = grid_values.shape[0]
    z = nm.reshape(grid_values, (B, H * W, grid_values.shape[-1]))
    h = nm.affine(z, params.shared_w, params.shared_b)

    def head(i):
        return nm.reshape(nm.affine(h, params.head_ws[i], params.head_bs[i]),
                          (B, H * W))

    dx = nm.tanh(head(0))
    dy = nm.tanh(head(1))
    sw = nm.relu(nm.tanh(head(2)))
    sh = nm.relu(nm.tanh(head(3)))
    if params.min_size > 0.0:
        sw = nm.add(nm.relu(nm.sub(sw, params.min_size)), params.min_size)
        sh = nm.add(nm.relu(nm.sub(sh, params.min_size)), params.min_size)

    dtype = grid_values.values.dtype
    centers = grid_cell_centers(H, W)
    cx = Tensor(centers[:, 0].astype(dtype))
    cy = Tensor(centers[:, 1].astype(dtype))
    half_w = nm.mul(sw, 0.5)
    half_h = nm.mul(sh, 0.5)
    mx = nm.add(dx, cx)
    my = nm.add(dy, cy)
    return Geometry(centers=centers, dx=dx, dy=dy, sw=sw, sh=sh,
                    ax=nm.sub(mx, half_w), ay=nm.sub(my, half_h),
                    bx=nm.add(mx, half_w), by=nm.add(my, half_h))


def predict_geometry(params: AdaPatchParams, grid: FeatureGrid) -> list[AdaptivePatch]:
    """One adaptive patch per grid cell, row-major."""
    if grid.height * grid.width == 0:
        raise ContractViolation("predict_geometry on empty grid")
    data = nm.reshape(grid.data, (1,) + grid.data.shape)
    geom = predict_geometry_tensors(params, data, grid.height, grid.width)
    return geom.patches(0)


def _lattice_fractions(m: int) -> tuple[np.ndarray, np.ndarray]:
    # row-major m x m lattice: row index drives y, column index drives x
    f = (np.arange(m) + 0.5) / m
    fy, fx = np.meshgrid(f, f, indexing="ij")
    return fx.ravel(), fy.ravel()


def sample_points(patch: AdaptivePatch, m: int) -> np.ndarray:
    """Uniform m x m lattice inside the patch corners, shape [m*m, 2], row-major."""
    if m < 1:
        raise ContractViolation("m must be >= 1")
    fx, fy = _lattice_fractions(m)
    xs = patch.ax + fx * (patch.bx - patch.ax)
    ys = patch.ay + fy * (patch.by - patch.ay)
    return np.stack([xs, ys], axis=-1)


def sample_points_tensors(geom: Geometry, m: int) -> Tensor:
    """Differentiable sample lattice for every patch: [B, N, m*m, 2]."""
    fx, fy = _lattice_fractions(m)
    dtype = geom.ax.values.dtype
    B, N = geom.ax.shape
    full = (B, N, m * m)

    def spread(t):
        return nm.expand(nm.reshape(t, (B, N, 1)), full)

    xs = nm.add(spread(geom.ax), nm.mul(spread(nm.sub(geom.bx, geom.ax)),
                                        Tensor(fx.astype(dtype))))
    ys = nm.add(spread(geom.ay), nm.mul(spread(nm.sub(geom.by, geom.ay)),
                                        Tensor(fy.astype(dtype))))
    xs = nm.reshape(xs, (B, N, m * m, 1))
    ys = nm.reshape(ys, (B, N, m * m, 1))
    return nm.concat([xs, ys], axis=3)


def bilinear_sample(grid: FeatureGrid, point) -> Tensor:
    """Feature vector at one normalized (x, y) point, border-replicated."""
    pts = np.asarray(point, dtype=np.float64).reshape(1, 2)
    out = nm.bilinear(grid.data, Tensor(pts))
    return nm.reshape(out, (grid.channels,))


def extract_patch_embedding(params: AdaPatchParams, grid: FeatureGrid,
                            patch: AdaptivePatch) -> Tensor:
    """f5 over the flattened m x m samples of one patch (row-major order)."""
    m = params.m
    if m * m * grid.channels != params.f5_in:
        raise ContractViolation(
            f"f5 expects width {params.f5_in}, grid gives {m * m * grid.channels}")
    pts = sample_points(patch, m)
    sampled = nm.bilinear(grid.data, Tensor(pts))  # [m*m, C]
    flat = nm.reshape(sampled, (m * m * grid.channels,))
    return nm.affine(flat, params.f5_w, params.f5_b)


def extract_all_patch_embeddings(params: AdaPatchParams, source: Tensor,
                                 geom: Geometry) -> Tensor:
    """Differentiable batched extraction: [B, H, W, C] + geometry -> [B, N, d_out].

    Gradients reach the source grid, the geometry heads (through the sample
    coordinates), and f5.
    """
    B, H, W, C = source.shape
    if params.m * params.m * C != params.f5_in:
        raise ContractViolation(
            f"f5 expects width {params.f5_in}, source gives {params.m ** 2 * C}")
    N = geom.ax.shape[1]
    m2 = params.m * params.m
    pts = sample_points_tensors(geom, params.m)          # [B, N, m2, 2]
    flat_pts = nm.reshape(pts, (B, N * m2, 2))
    sampled = nm.bilinear(source, flat_pts)              # [B, N*m2, C]
    feats = nm.reshape(sampled, (B, N, m2 * C))
    return nm.affine(feats, params.f5_w, params.f5_b)


def fixed_grid_patches(H: int, W: int) -> list[AdaptivePatch]:
    """The non-adaptive baseline geometry: each patch exactly covers its cell."""
    centers = grid_cell_centers(H, W)
    return [AdaptivePatch(cx=float(x), cy=float(y), dx=0.0, dy=0.0,
                          sw=1.0 / W, sh=1.0 / H)
            for x, y in centers]


def dump_patches(path: str | Path, patches: list[AdaptivePatch]) -> None:
    """JSON-lines dump, one record per patch, for visualization."""
    with open(path, "w") as fh:
        for i, p in enumerate(patches):
            fh.write(json.dumps(p.as_record(i)) + "\n")


def load_patch_dump(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
