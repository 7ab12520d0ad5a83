"""Regular patch grids and inter-patch normalization of decoder features.

A pathway restores an image as a grid of independent tiles; normalization
equalizes how aggressively neighboring tiles restore by rescaling each
tile's features with the ratio of its neighbors' average restoring
intensity to its own.  Restoring intensity of a tile is the per-channel sum
of absolute output/input ratios across a decoder residual block.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

RATIO_EPS = 1e-6      # keeps the output/input ratio finite at zero inputs
_DENOM_EPS = 1e-12    # keeps the factor finite when a tile's intensity is zero


@dataclass
class PatchGrid:
    """Row-major list of equally shaped (B, C, h, w) tiles."""

    rows: int
    cols: int
    patches: list[Tensor]

    def __post_init__(self):
        if len(self.patches) != self.rows * self.cols:
            raise ShapeError(
                f"grid needs {self.rows * self.cols} patches, got {len(self.patches)}")
        first = self.patches[0].shape
        for p in self.patches[1:]:
            if p.shape != first:
                raise ShapeError(f"patch shape mismatch: {p.shape} vs {first}")

    @property
    def patch_h(self) -> int:
        return self.patches[0].shape[2]

    @property
    def patch_w(self) -> int:
        return self.patches[0].shape[3]

    def __len__(self) -> int:
        return len(self.patches)


@dataclass
class PnFactor:
    """Per-channel regularizing factor (B, C) and the neighbor count it used."""

    value: Tensor
    neighbor_count: int


def partition(x: Tensor, rows: int, cols: int) -> PatchGrid:
    """Split (B, C, H, W) into non-overlapping row-major tiles."""
    if x.ndim != 4:
        raise ShapeError(f"partition: expected (B,C,H,W), got {x.shape}")
    _, _, h, w = x.shape
    if rows < 1 or cols < 1 or h % rows or w % cols:
        raise ShapeError(f"partition: {h}x{w} not divisible into {rows}x{cols} grid")
    ph, pw = h // rows, w // cols
    tiles = []
    for r in range(rows):
        for c in range(cols):
            tiles.append(ad.spatial_crop(x, r * ph, (r + 1) * ph, c * pw, (c + 1) * pw))
    return PatchGrid(rows=rows, cols=cols, patches=tiles)


def assemble(grid: PatchGrid) -> Tensor:
    """Inverse of partition; differentiable (the gradient re-partitions)."""
    rows = []
    for r in range(grid.rows):
        row = grid.patches[r * grid.cols:(r + 1) * grid.cols]
        rows.append(ad.concat(row, axis=3) if grid.cols > 1 else row[0])
    return ad.concat(rows, axis=2) if grid.rows > 1 else rows[0]


def grid_neighbors(rows: int, cols: int, index: int) -> list[int]:
    """4-connected neighbors of a row-major grid index."""
    r, c = divmod(index, cols)
    out = []
    for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        rr, cc = r + dr, c + dc
        if 0 <= rr < rows and 0 <= cc < cols:
            out.append(rr * cols + cc)
    return out


def _restoring_intensity(x_in: Tensor, x_out: Tensor, eps: float) -> Tensor:
    """Per-channel sum of |out/in| over a tile -> (B, C)."""
    guard = Tensor(np.where(x_in.data >= 0, eps, -eps).astype(x_in.data.dtype))
    ratio = ad.apply_elementwise(x_out / (x_in + guard), "abs")
    return ratio.sum(axis=(2, 3))


def pn_factor(grid_in: PatchGrid, grid_out: PatchGrid, index: int,
              eps: float = RATIO_EPS) -> PnFactor:
    """Regularizing factor for tile ``index``.

    ``grid_in``/``grid_out`` are the input and output of one decoder residual
    block over the whole grid.  Boundary tiles use their available neighbors
    with the count adjusted; the factor is differentiated through, not
    detached.
    """
    if (grid_in.rows, grid_in.cols) != (grid_out.rows, grid_out.cols):
        raise ShapeError("pn_factor: grids must share geometry")
    if len(grid_in) < 2:
        raise ShapeError("pn_factor: single-patch grid has no neighbors; normalization "
                         "is inapplicable")
    neighbors = grid_neighbors(grid_in.rows, grid_in.cols, index)
    own = _restoring_intensity(grid_in.patches[index], grid_out.patches[index], eps)
    total = None
    for r in neighbors:
        s = _restoring_intensity(grid_in.patches[r], grid_out.patches[r], eps)
        total = s if total is None else total + s
    n = len(neighbors)
    value = total / (own * float(n) + _DENOM_EPS)
    return PnFactor(value=value, neighbor_count=n)


def pn_apply(x_out: Tensor, factor: PnFactor,
             bias_branch: Callable[[Tensor], Tensor]) -> Tensor:
    """Rescale a tile's features and add the learned convolution bias."""
    b, c = factor.value.shape
    if x_out.shape[0] != b or x_out.shape[1] != c:
        raise ShapeError(
            f"pn_apply: factor ({b},{c}) does not match features {x_out.shape}")
    scale = factor.value.reshape(b, c, 1, 1)
    return x_out * scale + bias_branch(x_out)


# -- stacked-grid fast path ----------------------------------------------------------
#
# Pathways fold their patch grid into the batch axis (patch-major) so shared
# convolutions run once per layer.  These helpers move between the two
# layouts and compute all tiles' factors in one pass over the stack.


def stack_grid(grid: PatchGrid) -> Tensor:
    """(B, C, h, w) tiles -> one (P*B, C, h, w) tensor, patch-major."""
    return ad.concat(grid.patches, axis=0) if len(grid) > 1 else grid.patches[0]


def unstack_grid(stacked: Tensor, rows: int, cols: int, batch: int) -> PatchGrid:
    """Inverse of :func:`stack_grid`."""
    parts = rows * cols
    if stacked.shape[0] != parts * batch:
        raise ShapeError(
            f"unstack_grid: {stacked.shape[0]} rows != {parts} patches x batch {batch}")
    tiles = [ad.slice_axis0(stacked, g * batch, (g + 1) * batch) for g in range(parts)]
    return PatchGrid(rows=rows, cols=cols, patches=tiles)


def pn_scales(stacked_in: Tensor, stacked_out: Tensor, rows: int, cols: int,
              batch: int, eps: float = RATIO_EPS) -> Tensor:
    """Regularizing factors for every tile of a stacked grid -> (P*B, C).

    Equivalent to :func:`pn_factor` per tile but computes each tile's
    restoring intensity exactly once.
    """
    parts = rows * cols
    if parts < 2:
        raise ShapeError("pn_scales: single-patch grid has no neighbors")
    if stacked_in.shape != stacked_out.shape or stacked_in.shape[0] != parts * batch:
        raise ShapeError(
            f"pn_scales: bad stack shapes {stacked_in.shape} vs {stacked_out.shape}")
    guard = Tensor(np.where(stacked_in.data >= 0, eps, -eps).astype(stacked_in.data.dtype))
    ratio = ad.apply_elementwise(stacked_out / (stacked_in + guard), "abs")
    intensity = ratio.sum(axis=(2, 3))  # (P*B, C)
    per_tile = [ad.slice_axis0(intensity, g * batch, (g + 1) * batch) for g in range(parts)]
    factors = []
    for g in range(parts):
        neighbors = grid_neighbors(rows, cols, g)
        total = per_tile[neighbors[0]]
        for r in neighbors[1:]:
            total = total + per_tile[r]
        factors.append(total / (per_tile[g] * float(len(neighbors)) + _DENOM_EPS))
    return ad.concat(factors, axis=0) if parts > 1 else factors[0]
