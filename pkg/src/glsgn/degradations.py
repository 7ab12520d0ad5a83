"""Deterministic generators of paired (degraded, clean) training samples.

Three degradation kinds are produced: reflections (blurred second image
blended additively), rain streaks (sparse noise convolved with an elongated
Gaussian kernel), and haze (scattering model with a vertical depth proxy).
Every generator is a pure function of its inputs and a 64-bit seed; sampled
parameters are recorded per sample for auditability.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imaging import Image, save_image
from .rng import derive_rng, derive_seed

KINDS = ("reflection", "rain", "haze")


@dataclass(frozen=True)
class SynthRanges:
    """Uniform sampling ranges for degradation parameters (desk scale)."""

    reflection_sigma: tuple[float, float] = (2.0, 5.0)
    reflection_beta: tuple[float, float] = (0.4, 0.8)
    rain_density: tuple[float, float] = (0.01, 0.10)
    rain_length: tuple[float, float] = (8.0, 24.0)
    rain_angle: tuple[float, float] = (60.0, 120.0)
    rain_sigma: tuple[float, float] = (0.5, 1.5)
    rain_contrast: tuple[float, float] = (0.5, 1.0)
    haze_airlight: tuple[float, float] = (0.7, 1.0)
    haze_beta: tuple[float, float] = (0.6, 1.6)

    def to_dict(self) -> dict:
        return {f.name: list(getattr(self, f.name)) for f in fields(self)}

    @staticmethod
    def from_dict(d: dict) -> "SynthRanges":
        known = {f.name for f in fields(SynthRanges)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synthesis range keys: {sorted(unknown)}")
        return SynthRanges(**{k: tuple(v) for k, v in d.items()})


@dataclass
class StreakKernel:
    """Line segment thickened by a Gaussian; entries sum to 1."""

    kernel: np.ndarray
    length: float
    angle_deg: float
    sigma: float


@dataclass
class DegradedSample:
    degraded: Image
    background: Image
    kind: str
    seed: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown degradation kind {self.kind!r}")
        if self.degraded.data.shape != self.background.data.shape:
            raise ValueError("degraded and background sizes differ")


def _uniform(rng: np.random.Generator, bounds: tuple[float, float]) -> float:
    lo, hi = bounds
    if hi < lo:
        raise ValueError(f"empty range {bounds}")
    return float(lo) if hi == lo else float(rng.uniform(lo, hi))


def make_streak_kernel(length: float, angle_deg: float, sigma: float) -> StreakKernel:
    """Anisotropic Gaussian elongated along ``angle_deg``.

    The kernel is exp(-d^2 / 2 sigma^2) of the distance d to a centered
    segment of the given length, truncated at 3 sigma and normalized to sum
    1.  Length 1 degenerates to an isotropic Gaussian.  Angles are measured
    from the +x axis toward +y (image rows), so 90 degrees is vertical.
    """
    if length < 1:
        raise ValueError(f"streak length must be >= 1, got {length}")
    if sigma <= 0:
        raise ValueError(f"streak sigma must be positive, got {sigma}")
    half = (length - 1) / 2.0
    radius = int(math.ceil(half + 3.0 * sigma))
    ys, xs = np.mgrid[-radius:radius + 1, -radius:radius + 1].astype(np.float64)
    theta = math.radians(angle_deg)
    along = xs * math.cos(theta) + ys * math.sin(theta)
    across = -xs * math.sin(theta) + ys * math.cos(theta)
    dist = np.hypot(np.maximum(np.abs(along) - half, 0.0), across)
    kernel = np.exp(-(dist ** 2) / (2.0 * sigma ** 2))
    kernel[dist > 3.0 * sigma] = 0.0
    kernel /= kernel.sum()
    return StreakKernel(kernel=kernel, length=float(length),
                        angle_deg=float(angle_deg), sigma=float(sigma))


def synth_reflection(background: Image, reflection_source: Image, seed: int,
                     ranges: SynthRanges = SynthRanges()) -> DegradedSample:
    """Blend a Gaussian-blurred second image onto the background."""
    if background.data.shape != reflection_source.data.shape:
        raise ValueError("background and reflection source sizes differ; resize first")
    rng = derive_rng(seed)
    sigma = _uniform(rng, ranges.reflection_sigma)
    beta = _uniform(rng, ranges.reflection_beta)
    blurred = ndimage.gaussian_filter(reflection_source.data, sigma=(sigma, sigma, 0.0))
    degraded = np.clip(background.data + beta * blurred, 0.0, 1.0)
    return DegradedSample(
        degraded=Image(degraded), background=Image(background.data.copy()),
        kind="reflection", seed=int(seed),
        params={"sigma": sigma, "beta": beta})


def synth_rain(background: Image, seed: int,
               ranges: SynthRanges = SynthRanges()) -> DegradedSample:
    """Superimpose streaks from sparse noise convolved with a streak kernel.

    The streak map uses the kernel rescaled to unit peak so an isolated
    noise point yields a bright full-contrast streak; the recorded kernel
    itself stays sum-normalized.
    """
    h, w = background.height, background.width
    if min(h, w) < 16:
        raise ValueError(f"rain synthesis needs at least 16x16 images, got {h}x{w}")
    rng = derive_rng(seed)
    density = _uniform(rng, ranges.rain_density)
    length = _uniform(rng, ranges.rain_length)
    angle = _uniform(rng, ranges.rain_angle)
    sigma = _uniform(rng, ranges.rain_sigma)
    contrast = _uniform(rng, ranges.rain_contrast)

    noise = (rng.random((h, w)) < density).astype(np.float64)
    if noise.any():
        kern = make_streak_kernel(length, angle, sigma).kernel
        streaks = ndimage.convolve(noise, kern / kern.max(), mode="constant", cval=0.0)
        streaks = np.clip(streaks, 0.0, 1.0)
    else:
        streaks = noise
    degraded = np.clip(background.data + contrast * streaks[:, :, None], 0.0, 1.0)
    return DegradedSample(
        degraded=Image(degraded), background=Image(background.data.copy()),
        kind="rain", seed=int(seed),
        params={"density": density, "length": length, "angle": angle,
                "sigma": sigma, "contrast": contrast})


def synth_haze(background: Image, seed: int,
               ranges: SynthRanges = SynthRanges()) -> DegradedSample:
    """Scattering model B*t + A*(1-t); depth grows linearly down the image."""
    rng = derive_rng(seed)
    airlight = _uniform(rng, ranges.haze_airlight)
    beta = _uniform(rng, ranges.haze_beta)
    h = background.height
    depth = np.linspace(0.0, 1.0, h)[:, None, None]
    t = np.exp(-beta * depth)
    degraded = np.clip(background.data * t + airlight * (1.0 - t), 0.0, 1.0)
    return DegradedSample(
        degraded=Image(degraded), background=Image(background.data.copy()),
        kind="haze", seed=int(seed),
        params={"airlight": airlight, "beta": beta})


_SYNTH_BY_KIND = {
    "reflection": synth_reflection,
    "rain": synth_rain,
    "haze": synth_haze,
}


def synth_background(seed: int, height: int, width: int) -> Image:
    """Procedural clean background: smooth gradients, soft blobs, fine texture.

    Gives the self-contained pipeline structured targets with both low- and
    high-frequency content.
    """
    rng = derive_rng(seed)
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    ys /= max(height - 1, 1)
    xs /= max(width - 1, 1)
    img = np.empty((height, width, 3))
    for c in range(3):
        gx, gy = rng.uniform(-0.5, 0.5, 2)
        img[:, :, c] = 0.5 + gx * (xs - 0.5) + gy * (ys - 0.5)
    for _ in range(4):
        cy, cx = rng.uniform(0.1, 0.9, 2)
        radius = rng.uniform(0.08, 0.3)
        color = rng.uniform(-0.4, 0.4, 3)
        blob = np.exp(-(((ys - cy) ** 2) + ((xs - cx) ** 2)) / (2 * radius ** 2))
        img += blob[:, :, None] * color[None, None, :]
    fy, fx = rng.uniform(2.0, 6.0, 2)
    phase = rng.uniform(0, 2 * np.pi, 2)
    img += 0.08 * (np.sin(2 * np.pi * fy * ys + phase[0])
                   * np.cos(2 * np.pi * fx * xs + phase[1]))[:, :, None]
    texture = ndimage.gaussian_filter(rng.standard_normal((height, width)), 0.8)
    img += 0.05 * texture[:, :, None]
    return Image(np.clip(img, 0.0, 1.0))


def build_split(entries: list[str], train_fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Seeded shuffle into disjoint, exhaustive train/test manifests."""
    if len(entries) < 2:
        raise ValueError(f"need at least 2 samples to split, got {len(entries)}")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train fraction must be in (0, 1), got {train_fraction}")
    order = derive_rng(seed, 0xC0FFEE).permutation(len(entries))
    n_train = int(round(len(entries) * train_fraction))
    n_train = min(max(n_train, 1), len(entries) - 1)
    train = [entries[i] for i in sorted(order[:n_train])]
    test = [entries[i] for i in sorted(order[n_train:])]
    return train, test


def generate_sample(kind: str, background: Image, seed: int, index: int,
                    ranges: SynthRanges = SynthRanges(),
                    reflection_source: Image | None = None) -> DegradedSample:
    """One sample on the stream derived from (seed, index)."""
    sample_seed = derive_seed(seed, index)
    if kind == "reflection":
        if reflection_source is None:
            raise ValueError("reflection synthesis needs a reflection source image")
        return synth_reflection(background, reflection_source, sample_seed, ranges)
    if kind == "rain":
        return synth_rain(background, sample_seed, ranges)
    if kind == "haze":
        return synth_haze(background, sample_seed, ranges)
    raise ValueError(f"unknown degradation kind {kind!r}")


def write_dataset(out_dir, kind: str, samples: list[DegradedSample],
                  train_fraction: float, seed: int) -> tuple[Path, Path]:
    """Emit sample pairs, train/test manifests and the parameter record.

    Layout: <out>/<kind>/<index>_in.ppm, <out>/<kind>/<index>_gt.ppm,
    manifest_train.txt, manifest_test.txt, params.jsonl.
    """
    out = Path(out_dir)
    (out / kind).mkdir(parents=True, exist_ok=True)
    entries = []
    with open(out / "params.jsonl", "w") as params_file:
        for i, sample in enumerate(samples):
            rel_in = f"{kind}/{i:05d}_in.ppm"
            rel_gt = f"{kind}/{i:05d}_gt.ppm"
            save_image(sample.degraded, out / rel_in)
            save_image(sample.background, out / rel_gt)
            entries.append(f"{rel_in} {rel_gt} {kind}")
            record = {"index": i, "kind": kind, "seed": sample.seed,
                      "params": sample.params}
            params_file.write(json.dumps(record, sort_keys=True) + "\n")

    train_path = out / "manifest_train.txt"
    test_path = out / "manifest_test.txt"
    if len(entries) == 0:
        train_path.write_text("")
        test_path.write_text("")
    elif len(entries) == 1:
        train_path.write_text(entries[0] + "\n")
        test_path.write_text("")
    else:
        train, test = build_split(entries, train_fraction, seed)
        train_path.write_text("".join(e + "\n" for e in train))
        test_path.write_text("".join(e + "\n" for e in test))
    return train_path, test_path


def generate_dataset(out_dir, kind: str, backgrounds: list[Image], count: int,
                     seed: int, ranges: SynthRanges = SynthRanges(),
                     train_fraction: float = 0.875, threads: int = 0) -> tuple[Path, Path]:
    """Synthesize ``count`` pairs and write the dataset tree.

    Backgrounds are used cyclically; for reflections the source image is the
    next background in the pool (flipped when the pool has a single entry).
    Per-sample streams are independent, so generation may fan out across
    ``threads`` workers without changing the output.
    """
    if count > 0 and not backgrounds:
        raise ValueError("no background images available")

    def make(i: int) -> DegradedSample:
        bg = backgrounds[i % len(backgrounds)]
        source = None
        if kind == "reflection":
            if len(backgrounds) > 1:
                source = backgrounds[(i + 1) % len(backgrounds)]
            else:
                source = Image(bg.data[::-1, ::-1].copy())
        return generate_sample(kind, bg, seed, i, ranges, reflection_source=source)

    if threads > 0 and count > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            samples = list(pool.map(make, range(count)))
    else:
        samples = [make(i) for i in range(count)]
    return write_dataset(out_dir, kind, samples, train_fraction, seed)
