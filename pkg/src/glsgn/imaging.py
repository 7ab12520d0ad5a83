"""Image file I/O and the two evaluation metrics reported by the pipeline.

Binary PPM (P6, maxval 255) is the mandatory, dependency-free format; PNG is
available when Pillow is installed.  Pixel values live in [0, 1] as float64
(H, W, 3) arrays and are clamped at the file boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class ImageError(Exception):
    """Base class for image I/O failures."""


class MalformedHeaderError(ImageError):
    pass


class UnsupportedFormatError(ImageError):
    pass


class UnsupportedMaxvalError(ImageError):
    pass


class TruncatedPayloadError(ImageError):
    pass


@dataclass
class Image:
    """RGB image with float values in [0, 1] plus source provenance."""

    data: np.ndarray
    path: str | None = field(default=None, compare=False)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"image data must be (H, W, 3), got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"image dimensions must be >= 1, got {arr.shape[:2]}")
        self.data = np.clip(arr, 0.0, 1.0)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def _parse_ppm(raw: bytes, path: str) -> np.ndarray:
    pos = 0

    def skip_ws_and_comments(p: int) -> int:
        while p < len(raw):
            if raw[p:p + 1].isspace():
                p += 1
            elif raw[p:p + 1] == b"#":
                while p < len(raw) and raw[p] != 0x0A:
                    p += 1
            else:
                break
        return p

    def token(p: int) -> tuple[bytes, int]:
        p = skip_ws_and_comments(p)
        start = p
        while p < len(raw) and not raw[p:p + 1].isspace():
            p += 1
        if start == p:
            raise MalformedHeaderError(f"{path}: truncated PPM header")
        return raw[start:p], p

    magic, pos = token(pos)
    if magic != b"P6":
        raise UnsupportedFormatError(f"{path}: unsupported magic {magic!r}; only binary P6 is read")
    try:
        w_tok, pos = token(pos)
        h_tok, pos = token(pos)
        mv_tok, pos = token(pos)
        width, height, maxval = int(w_tok), int(h_tok), int(mv_tok)
    except (MalformedHeaderError, ValueError) as exc:
        raise MalformedHeaderError(f"{path}: malformed PPM header ({exc})") from None
    if width < 1 or height < 1:
        raise MalformedHeaderError(f"{path}: non-positive dimensions {width}x{height}")
    if maxval != 255:
        raise UnsupportedMaxvalError(f"{path}: maxval {maxval} unsupported; expected 255")

    pos += 1  # exactly one whitespace byte separates header from payload
    payload = raw[pos:pos + 3 * width * height]
    if len(payload) != 3 * width * height:
        raise TruncatedPayloadError(
            f"{path}: payload has {len(payload)} bytes, expected {3 * width * height}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3) / 255.0


def load_image(path, allow_png: bool = True) -> Image:
    """Load a binary PPM (or, when Pillow is available, a PNG) image."""
    p = Path(path)
    if p.suffix.lower() == ".png":
        if not allow_png:
            raise UnsupportedFormatError(f"{p}: PNG support disabled")
        try:
            from PIL import Image as PILImage
        except ImportError:
            raise UnsupportedFormatError(
                f"{p}: PNG requires Pillow (install the 'png' extra)") from None
        arr = np.asarray(PILImage.open(p).convert("RGB"), dtype=np.uint8)
        return Image(arr / 255.0, path=str(p))
    return Image(_parse_ppm(p.read_bytes(), str(p)), path=str(p))


def quantize(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to bytes with round-half-up, clamping out-of-range input."""
    return np.clip(np.floor(values * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_image(img: Image, path) -> None:
    """Write binary PPM (or PNG by extension); bit-exact across platforms."""
    p = Path(path)
    bytes_ = quantize(img.data)
    if p.suffix.lower() == ".png":
        try:
            from PIL import Image as PILImage
        except ImportError:
            raise UnsupportedFormatError(
                f"{p}: PNG requires Pillow (install the 'png' extra)") from None
        PILImage.fromarray(bytes_, mode="RGB").save(p)
        return
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    p.write_bytes(header + bytes_.tobytes())


def _check_same_size(a: Image, b: Image, what: str) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{what}: image sizes differ, {a.data.shape[:2]} vs {b.data.shape[:2]}")


def psnr(a: Image, b: Image) -> float:
    """Peak signal-to-noise ratio in dB with MAX=1; +inf for identical images."""
    _check_same_size(a, b, "psnr")
    mse = float(np.mean((a.data - b.data) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """2-D Gaussian weights normalized to sum 1."""
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(a: Image, b: Image) -> float:
    """Mean structural similarity over valid 11x11 Gaussian windows.

    Computed per channel with K1=0.01, K2=0.03 and dynamic range 1, then
    averaged across channels.
    """
    _check_same_size(a, b, "ssim")
    if a.height < SSIM_WINDOW or a.width < SSIM_WINDOW:
        raise ValueError(
            f"ssim: images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.height}x{a.width}")
    win = gaussian_window()
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2

    scores = []
    for ch in range(3):
        x = a.data[:, :, ch]
        y = b.data[:, :, ch]
        wx = sliding_window_view(x, (SSIM_WINDOW, SSIM_WINDOW))
        wy = sliding_window_view(y, (SSIM_WINDOW, SSIM_WINDOW))
        mu_x = np.tensordot(wx, win, axes=([2, 3], [0, 1]))
        mu_y = np.tensordot(wy, win, axes=([2, 3], [0, 1]))
        xx = np.tensordot(wx * wx, win, axes=([2, 3], [0, 1]))
        yy = np.tensordot(wy * wy, win, axes=([2, 3], [0, 1]))
        xy = np.tensordot(wx * wy, win, axes=([2, 3], [0, 1]))
        var_x = xx - mu_x ** 2
        var_y = yy - mu_y ** 2
        cov = xy - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def resize_image(img: Image, out_h: int, out_w: int) -> Image:
    """Bilinear resize at the image level (same kernel as the tensor op)."""
    if (img.height, img.width) == (out_h, out_w):
        return Image(img.data.copy(), path=img.path)
    from .autodiff import resize_bilinear
    t = Tensor(img.data.transpose(2, 0, 1)[None])
    out = resize_bilinear(t, out_h, out_w)
    return Image(out.data[0].transpose(1, 2, 0), path=img.path)


# -- tensor <-> image glue ----------------------------------------------------------


def image_to_tensor(img: Image, dtype=np.float32) -> Tensor:
    """(H, W, 3) image -> (1, 3, H, W) tensor."""
    chw = np.ascontiguousarray(img.data.transpose(2, 0, 1)[None])
    return Tensor(chw.astype(dtype))


def tensor_to_image(t: Tensor, batch_index: int = 0) -> Image:
    """(B, 3, H, W) tensor -> image; values are clamped to [0, 1]."""
    if t.ndim != 4 or t.shape[1] != 3:
        raise ValueError(f"expected (B, 3, H, W) tensor, got {t.shape}")
    hwc = np.asarray(t.data[batch_index]).transpose(1, 2, 0)
    return Image(np.clip(hwc.astype(np.float64), 0.0, 1.0))
