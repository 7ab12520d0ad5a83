"""Laplacian pyramid: build, mask, and invert for background synthesis.

One fixed operator pair is used everywhere: downsampling is 2x2 average
pooling, upsampling is bilinear 2x.  A decomposition stores per-scale
high-frequency residuals (finest first) plus the low-frequency base; with
identity masks the decomposition inverts exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


def _up2x(t: Tensor) -> Tensor:
    return ad.resize_bilinear(t, t.shape[2] * 2, t.shape[3] * 2)


@dataclass
class PyramidDecomposition:
    """Residual levels h_0..h_{k-1} (finest first) and the low-frequency base.

    ``masks`` are optional per-level single-channel weights in [0, 1] with the
    level's spatial size.
    """

    levels: list[Tensor]
    low: Tensor
    masks: list[Tensor] | None = None

    def __add__(self, other: "PyramidDecomposition") -> "PyramidDecomposition":
        if len(self.levels) != len(other.levels):
            raise ShapeError("pyramid add: level count mismatch")
        return PyramidDecomposition(
            levels=[a + b for a, b in zip(self.levels, other.levels)],
            low=self.low + other.low,
        )


def build(image: Tensor, num_levels: int) -> PyramidDecomposition:
    """Decompose into ``num_levels`` residuals plus a low-frequency base.

    Spatial dims must be divisible by 2**num_levels.
    """
    if image.ndim != 4:
        raise ShapeError(f"pyramid build: expected (B,C,H,W), got {image.shape}")
    h, w = image.shape[2], image.shape[3]
    div = 1 << num_levels
    if num_levels < 0 or h % div or w % div:
        raise ShapeError(
            f"pyramid build: {h}x{w} not divisible by 2^{num_levels}")
    levels: list[Tensor] = []
    current = image
    for _ in range(num_levels):
        down = ad.downsample2x(current)
        levels.append(current - _up2x(down))
        current = down
    return PyramidDecomposition(levels=levels, low=current)


def reconstruct(p: PyramidDecomposition) -> Tensor:
    """Fold the base back up through upsampling and residual addition."""
    current = p.low
    for h in reversed(p.levels):
        if h.shape[2] != current.shape[2] * 2 or h.shape[3] != current.shape[3] * 2:
            raise ShapeError(
                f"pyramid reconstruct: level {h.shape} does not stack on {current.shape}")
        current = _up2x(current) + h
    return current


def extract_highfreq(image: Tensor) -> Tensor:
    """One-level residual image - up(down(image)) of a restored output."""
    if image.ndim != 4:
        raise ShapeError(f"extract_highfreq: expected (B,C,H,W), got {image.shape}")
    if image.shape[2] % 2 or image.shape[3] % 2:
        raise ShapeError(
            f"extract_highfreq: spatial dims must be even, got {image.shape[2]}x{image.shape[3]}")
    return image - _up2x(ad.downsample2x(image))


def _check_mask(mask: Tensor, h: Tensor, name: str) -> None:
    if mask.ndim != 4 or mask.shape[1] != 1:
        raise ShapeError(f"fuse: {name} must be (B,1,H,W), got {mask.shape}")
    if mask.shape[0] != h.shape[0] or mask.shape[2:] != h.shape[2:]:
        raise ShapeError(f"fuse: {name} shape {mask.shape} does not match residual {h.shape}")


def fuse_glsgn(h1: Tensor, h2: Tensor, h3: Tensor, low: Tensor,
               masks: tuple[Tensor, Tensor, Tensor]) -> Tensor:
    """Masked synthesis out = m1*h1 + Up(m2*h2 + Up(m3*h3 + low)).

    h3 and low share one spatial size s, h2 is 2s, h1 is 4s; each mask is
    single-channel at its residual's size and broadcasts over RGB.
    """
    m1, m2, m3 = masks
    if h3.shape[2:] != low.shape[2:]:
        raise ShapeError(f"fuse: h3 {h3.shape} and low {low.shape} must share spatial size")
    if h2.shape[2] != 2 * h3.shape[2] or h2.shape[3] != 2 * h3.shape[3]:
        raise ShapeError(f"fuse: h2 {h2.shape} must be twice h3 {h3.shape}")
    if h1.shape[2] != 2 * h2.shape[2] or h1.shape[3] != 2 * h2.shape[3]:
        raise ShapeError(f"fuse: h1 {h1.shape} must be twice h2 {h2.shape}")
    _check_mask(m1, h1, "mask1")
    _check_mask(m2, h2, "mask2")
    _check_mask(m3, h3, "mask3")

    inner = h3 * m3 + low
    mid = h2 * m2 + _up2x(inner)
    return h1 * m1 + _up2x(mid)
