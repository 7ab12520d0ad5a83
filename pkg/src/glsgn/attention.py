"""Per-pathway spatial attention and the cross-pathway consistency fusion.

Each pathway owns an attention head: per-pixel channel mean/max pooling, a
7x7 two-to-one convolution, and a sigmoid.  A pathway's map is normalized by
averaging it with the maps handed over from the previous pathway and the
global pathway (weighted by sigma1/sigma2), then multiplied back onto the
encoded features so all pathways attend to the same degraded regions.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .patches import PatchGrid, assemble, partition

ATT_KERNEL = 7


@dataclass
class PacWeights:
    """Fusion weights for the previous-pathway and global-pathway terms."""

    sigma1: float = 0.5
    sigma2: float = 0.5

    def __post_init__(self):
        for name in ("sigma1", "sigma2"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be within [0, 1], got {v}")


@dataclass(frozen=True)
class MapGeometry:
    """Intact-map size at a pathway's scale plus its patch grid."""

    height: int
    width: int
    rows: int
    cols: int


def spatial_attention(features: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """(B, C, H, W) features -> (B, 1, H, W) map with values in (0, 1)."""
    stats = ad.channel_stats(features)
    pre = ad.conv2d(stats, weight, bias, stride=1, padding=(ATT_KERNEL - 1) // 2)
    return ad.sigmoid(pre)


def fuse_attention(own: Tensor, prev: Tensor | None, global_: Tensor | None,
                   weights: PacWeights) -> Tensor:
    """Weighted mean of the available maps.

    Absent maps contribute nothing and their weight leaves the denominator,
    so the result is always a convex combination of the present maps.
    """
    num = own
    den = 1.0
    for other, sigma, name in ((prev, weights.sigma1, "prev"),
                               (global_, weights.sigma2, "global")):
        if other is None:
            continue
        if other.shape != own.shape:
            raise ShapeError(
                f"fuse_attention: {name} map {other.shape} does not match own {own.shape}")
        num = num + other * sigma
        den += sigma
    return num * (1.0 / den)


def reweight(features: Tensor, amap: Tensor) -> Tensor:
    """Multiply features by a single-channel map, broadcast across channels."""
    if amap.ndim != 4 or amap.shape[1] != 1:
        raise ShapeError(f"reweight: map must be (B,1,H,W), got {amap.shape}")
    if features.shape[0] != amap.shape[0] or features.shape[2:] != amap.shape[2:]:
        raise ShapeError(
            f"reweight: spatial mismatch, features {features.shape} vs map {amap.shape}")
    return features * amap


def align_map(maps: PatchGrid, dst: MapGeometry) -> PatchGrid:
    """Re-express per-patch maps in another pathway's geometry.

    Assembles the source grid to an intact map, bilinearly resizes it to the
    destination intact size, and re-partitions to the destination grid.
    Identical geometries pass values through unchanged.
    """
    intact = assemble(maps)
    h, w = intact.shape[2], intact.shape[3]
    if (h, w) != (dst.height, dst.width):
        intact = ad.resize_bilinear(intact, dst.height, dst.width)
    if dst.height % dst.rows or dst.width % dst.cols:
        raise ShapeError(
            f"align_map: destination {dst.height}x{dst.width} not divisible into "
            f"{dst.rows}x{dst.cols} grid")
    return partition(intact, dst.rows, dst.cols)
