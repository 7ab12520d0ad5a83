"""Training objective: pixel, perceptual and adversarial terms.

The discriminator applies spectral normalization (one persistent power
iteration per step) after every convolution.  Perceptual distance is
measured by a frozen random-weight convolution pyramid; a hook accepts an
externally trained weight file in the checkpoint container format for users
who have one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .config import LossWeights
from .rng import derive_rng

__all__ = [
    "LossWeights",
    "SpectralNormState",
    "spectral_normalize",
    "Discriminator",
    "PerceptualExtractor",
    "l1_loss",
    "pixel_loss",
    "perceptual_loss",
    "adversarial_g_loss",
    "discriminator_loss",
    "total_loss",
]


def uniform_fanin(rng: np.random.Generator, shape: tuple[int, ...], dtype) -> np.ndarray:
    """Symmetric uniform init scaled by fan-in (all dims past the first)."""
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# -- spectral normalization ---------------------------------------------------------


@dataclass
class SpectralNormState:
    """Persistent left/right singular-vector estimates for one weight."""

    u: np.ndarray
    v: np.ndarray
    sigma: float = 0.0

    @staticmethod
    def for_weight(weight_shape: tuple[int, ...], rng: np.random.Generator,
                   dtype) -> "SpectralNormState":
        o = weight_shape[0]
        rest = int(np.prod(weight_shape[1:]))
        u = rng.standard_normal(o).astype(dtype)
        v = rng.standard_normal(rest).astype(dtype)
        return SpectralNormState(u=u / np.linalg.norm(u), v=v / np.linalg.norm(v))


def spectral_normalize(weight: Tensor, state: SpectralNormState,
                       power_iterations: int = 1) -> Tensor:
    """weight / sigma_hat with sigma_hat = u^T W v after a power-iteration step.

    The iteration updates ``state`` in place on raw values; the returned
    tensor computes sigma_hat in-graph from the updated vectors, so gradients
    flow through both the numerator and the scale.
    """
    o = weight.shape[0]
    w2d_data = weight.data.reshape(o, -1)
    u, v = state.u, state.v
    for _ in range(power_iterations):
        v = w2d_data.T @ u
        v = v / max(np.linalg.norm(v), 1e-12)
        u = w2d_data @ v
        u = u / max(np.linalg.norm(u), 1e-12)
    state.u, state.v = u.astype(weight.data.dtype), v.astype(weight.data.dtype)
    state.sigma = float(u @ w2d_data @ v)

    w2d = weight.reshape(o, -1)
    u_t = Tensor(state.u.reshape(o, 1))
    v_t = Tensor(state.v.reshape(1, -1))
    sigma = (u_t * (w2d * v_t).sum(axis=1, keepdims=True)).sum()
    # tiny guard keeps all-zero weights finite (sigma would be exactly 0)
    return weight / (sigma + 1e-12)


# -- discriminator ------------------------------------------------------------------


class Discriminator:
    """Four stride-2 spectrally normalized convolutions and a 1x1 head.

    Channels grow 16 -> 128; scores are the spatial mean of the head output,
    one scalar per batch element.  An instance must not be shared across
    concurrent steps: normalization mutates its power-iteration state.
    """

    CHANNELS = (16, 32, 64, 128)

    def __init__(self, seed: int, in_channels: int = 3, dtype=np.float32):
        rng = derive_rng(seed, 0xD15C)
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        self.sn_states: dict[str, SpectralNormState] = {}
        prev = in_channels
        for i, ch in enumerate(self.CHANNELS):
            self._add_conv(f"disc.conv{i}", (ch, prev, 4, 4), rng)
            prev = ch
        self._add_conv("disc.out", (1, prev, 1, 1), rng)

    def _add_conv(self, name: str, shape: tuple[int, ...], rng) -> None:
        self.params[f"{name}.w"] = Tensor(uniform_fanin(rng, shape, self.dtype),
                                          requires_grad=True)
        self.params[f"{name}.b"] = Tensor(np.zeros(shape[0], dtype=self.dtype),
                                          requires_grad=True)
        self.sn_states[name] = SpectralNormState.for_weight(shape, rng, self.dtype)

    def score(self, images: Tensor, update_sn: bool = True) -> Tensor:
        """(B, C, H, W) -> (B,) realness scores.

        ``update_sn=False`` reuses the persistent singular-vector estimates
        without advancing them, so a training step that scores several
        batches still performs exactly one power iteration per layer.
        """
        iters = 1 if update_sn else 0
        x = images
        for i in range(len(self.CHANNELS)):
            name = f"disc.conv{i}"
            w = spectral_normalize(self.params[f"{name}.w"], self.sn_states[name], iters)
            x = ad.conv2d(x, w, self.params[f"{name}.b"], stride=2, padding=1)
            x = ad.leaky_relu(x)
        w = spectral_normalize(self.params["disc.out.w"], self.sn_states["disc.out"], iters)
        x = ad.conv2d(x, w, self.params["disc.out.b"], stride=1, padding=0)
        return x.mean(axis=(1, 2, 3))

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for name, st in self.sn_states.items():
            out[f"{name}.sn_u"] = st.u
            out[f"{name}.sn_v"] = st.v
        return out

    def load_buffers(self, buffers: dict[str, np.ndarray]) -> None:
        for name, st in self.sn_states.items():
            st.u = buffers[f"{name}.sn_u"].astype(self.dtype)
            st.v = buffers[f"{name}.sn_v"].astype(self.dtype)


# -- perceptual extractor -----------------------------------------------------------


class PerceptualExtractor:
    """Frozen 4-level conv pyramid; tap features after every level.

    Weights are random but fixed by seed and are never trained.  External
    weights in the same tap-layer layout can be loaded in their place.
    """

    CHANNELS = (8, 16, 32, 64)

    def __init__(self, seed: int, in_channels: int = 3, dtype=np.float32):
        rng = derive_rng(seed, 0xFEA7)
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        prev = in_channels
        for i, ch in enumerate(self.CHANNELS):
            self.params[f"perc.conv{i}.w"] = Tensor(
                uniform_fanin(rng, (ch, prev, 3, 3), dtype), requires_grad=False)
            self.params[f"perc.conv{i}.b"] = Tensor(
                np.zeros(ch, dtype=dtype), requires_grad=False)
            prev = ch

    def features(self, x: Tensor) -> list[Tensor]:
        taps = []
        for i in range(len(self.CHANNELS)):
            x = ad.leaky_relu(ad.conv2d(x, self.params[f"perc.conv{i}.w"],
                                        self.params[f"perc.conv{i}.b"],
                                        stride=2, padding=1))
            taps.append(x)
        return taps

    def load_weights(self, named: dict[str, np.ndarray]) -> None:
        for name, tensor in self.params.items():
            if name not in named:
                raise KeyError(f"perceptual weight file missing tensor {name!r}")
            arr = np.asarray(named[name], dtype=self.dtype)
            if arr.shape != tensor.shape:
                raise ShapeError(
                    f"perceptual weight {name}: shape {arr.shape} != expected {tensor.shape}")
            tensor.data = np.ascontiguousarray(arr)


# -- loss terms ---------------------------------------------------------------------


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"l1: shape mismatch {a.shape} vs {b.shape}")
    return ad.apply_elementwise(a - b, "abs").mean()


def _gt_at(gt_full: Tensor, like: Tensor) -> Tensor:
    if gt_full.shape[2:] == like.shape[2:]:
        return gt_full
    return ad.resize_bilinear(gt_full, like.shape[2], like.shape[3])


def pixel_loss(gt_full: Tensor, pathway_outputs: list[Tensor], final_out: Tensor,
               w: LossWeights) -> Tensor:
    """alpha1 * sum of per-pathway L1 (against interpolated targets) plus
    beta1 * final-output L1."""
    total = None
    for out in pathway_outputs:
        term = l1_loss(_gt_at(gt_full, out), out)
        total = term if total is None else total + term
    final_term = l1_loss(_gt_at(gt_full, final_out), final_out) * w.beta1
    return final_term if total is None else total * w.alpha1 + final_term


def perceptual_loss(gt_full: Tensor, pathway_outputs: list[Tensor], final_out: Tensor,
                    extractor: PerceptualExtractor, w: LossWeights) -> Tensor:
    """Same structure as the pixel term, measured in extractor feature space."""

    def feat_dist(a: Tensor, b: Tensor) -> Tensor:
        fa = extractor.features(a)
        fb = extractor.features(b)
        dist = None
        for ta, tb in zip(fa, fb):
            d = ad.apply_elementwise(ta - tb, "abs").mean()
            dist = d if dist is None else dist + d
        return dist * (1.0 / len(fa))

    total = None
    for out in pathway_outputs:
        term = feat_dist(_gt_at(gt_full, out), out)
        total = term if total is None else total + term
    final_term = feat_dist(_gt_at(gt_full, final_out), final_out) * w.beta2
    return final_term if total is None else total * w.alpha2 + final_term


def adversarial_g_loss(d: Discriminator, fake: Tensor, update_sn: bool = True) -> Tensor:
    """Negative mean discriminator score of generated images."""
    return -d.score(fake, update_sn=update_sn).mean()


def discriminator_loss(d: Discriminator, real: Tensor, fake: Tensor,
                       update_sn: bool = True) -> Tensor:
    """Hinge objective; ``fake`` must be detached from the generator graph."""
    real_term = ad.relu(1.0 - d.score(real, update_sn=update_sn)).mean()
    fake_term = ad.relu(1.0 + d.score(fake, update_sn=False)).mean()
    return real_term + fake_term


def total_loss(pixel: Tensor, perc: Tensor, adv: Tensor, w: LossWeights) -> Tensor:
    return pixel * w.lambda1 + perc * w.lambda2 + adv * w.lambda3
