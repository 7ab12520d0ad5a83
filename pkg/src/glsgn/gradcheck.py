"""Central finite-difference verification of every backward rule.

``check_gradients`` re-runs a graph builder with each leaf coordinate
perturbed by +-eps and compares the central difference against the analytic
gradient.  ``run_suite`` applies it to a fixture for every op in
``DIFFERENTIABLE_OPS``; fixtures keep inputs away from non-differentiable
kinks (relu/abs at 0, clip at its bounds) so the comparison is meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DIFFERENTIABLE_OPS, Tensor

DEFAULT_EPS = 1e-5
DEFAULT_TOLERANCE = 1e-4


@dataclass
class OpCheck:
    op: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def check_gradients(build: Callable[..., Tensor], leaves: Sequence[Tensor],
                    eps: float = DEFAULT_EPS, grad_scale: float = 1.0) -> float:
    """Max relative error between analytic and numeric gradients.

    ``build(*leaves)`` must return a scalar Tensor and be re-invocable (a
    fresh graph is built per evaluation).  Leaves should be float64 for the
    default eps.  ``grad_scale`` exists for negative-control fixtures that
    deliberately report a wrong analytic gradient.

    The error denominator is max(|analytic|, |numeric|, 1), i.e. relative for
    large gradients and absolute near zero.
    """
    for leaf in leaves:
        leaf.zero_grad()
    loss = build(*leaves)
    ad.backward(loss)
    analytic = [
        (leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data)) * grad_scale
        for leaf in leaves
    ]

    worst = 0.0
    for leaf, an in zip(leaves, analytic):
        flat = leaf.data.reshape(-1)
        an_flat = an.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = build(*leaves).item()
            flat[i] = orig - eps
            f_minus = build(*leaves).item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(an_flat[i] - numeric) / max(abs(an_flat[i]), abs(numeric), 1.0)
            worst = max(worst, err)
    return worst


def _away_from(x: np.ndarray, points: Sequence[float], margin: float = 0.05) -> np.ndarray:
    """Nudge entries of ``x`` so none lies within ``margin`` of the kinks."""
    out = x.copy()
    for p in points:
        close = np.abs(out - p) < margin
        out[close] = p + margin * np.where(out[close] >= p, 1.0, -1.0)
    return out


def _leaf(rng: np.random.Generator, shape, lo=-1.0, hi=1.0, avoid=()) -> Tensor:
    data = rng.uniform(lo, hi, size=shape)
    if avoid:
        data = _away_from(data, avoid)
    return Tensor(data, requires_grad=True, dtype=np.float64)


def _weighted(out: Tensor, key: int) -> Tensor:
    """Scalar loss with distinct per-coordinate weights (catches permutation bugs).

    Weights derive from ``key`` alone so re-invoking a builder is pure.
    """
    w = Tensor(np.random.default_rng(key).uniform(0.5, 1.5, size=out.shape), dtype=np.float64)
    return (out * w).sum()


def _fixtures(rng: np.random.Generator) -> dict[str, tuple[Callable[..., Tensor], list[Tensor]]]:
    fx: dict[str, tuple[Callable[..., Tensor], list[Tensor]]] = {}

    a = _leaf(rng, (2, 3))
    b = _leaf(rng, (1, 3))  # broadcast on purpose
    fx["add"] = (lambda x, y: _weighted(ad.add(x, y), 100), [a, b])
    fx["sub"] = (lambda x, y: _weighted(ad.sub(x, y), 101), [_leaf(rng, (2, 3)), _leaf(rng, (2, 1))])
    fx["mul"] = (lambda x, y: _weighted(ad.mul(x, y), 102), [_leaf(rng, (2, 3)), _leaf(rng, (1, 3))])
    den = _leaf(rng, (2, 3), avoid=(0.0,), lo=-1.0, hi=1.0)
    den.data[np.abs(den.data) < 0.2] = 0.3
    fx["div"] = (lambda x, y: _weighted(ad.div(x, y), 103), [_leaf(rng, (2, 3)), den])

    for fn in ("relu", "leaky_relu", "sigmoid", "tanh", "abs"):
        avoid = (0.0,) if fn in ("relu", "leaky_relu", "abs") else ()
        fx[fn] = (
            lambda x, fn=fn: _weighted(ad.apply_elementwise(x, fn), 104),
            [_leaf(rng, (2, 3, 2), avoid=avoid)],
        )

    fx["clip01"] = (
        lambda x: _weighted(ad.clip01(x), 105),
        [_leaf(rng, (3, 4), lo=-0.5, hi=1.5, avoid=(0.0, 1.0))],
    )
    fx["sum"] = (
        lambda x: (ad.mul(x.sum(axis=1, keepdims=True), x).sum() + x.sum()),
        [_leaf(rng, (2, 3))],
    )
    fx["mean"] = (
        lambda x: _weighted(x.mean(axis=(1, 2), keepdims=False), 106) + x.mean(),
        [_leaf(rng, (2, 3, 2))],
    )
    fx["reshape"] = (lambda x: _weighted(x.reshape(3, 4), 107), [_leaf(rng, (2, 6))])

    ci, cw, cb = _leaf(rng, (2, 3, 5, 5)), _leaf(rng, (4, 3, 3, 3)), _leaf(rng, (4,))
    sw = _leaf(rng, (2, 4, 4, 4))

    def conv_builder(x, w, bias, w2):
        y = ad.conv2d(x, w, bias, stride=1, padding=1)        # (2,4,5,5)
        y = ad.apply_elementwise(y, "tanh")
        z = ad.conv2d(y, w2, None, stride=2, padding=1)       # even kernel, stride 2
        return _weighted(z, 108)

    fx["conv2d"] = (conv_builder, [ci, cw, cb, sw])

    fx["resize_bilinear"] = (
        lambda x: _weighted(ad.resize_bilinear(x, 7, 5), 109)
        + _weighted(ad.resize_bilinear(x, 2, 3), 110),
        [_leaf(rng, (1, 2, 4, 6))],
    )
    fx["downsample2x"] = (lambda x: _weighted(ad.downsample2x(x), 111), [_leaf(rng, (1, 2, 4, 4))])

    p1, p2, p3 = _leaf(rng, (1, 2, 3, 3)), _leaf(rng, (1, 1, 3, 3)), _leaf(rng, (1, 3, 3, 3))
    fx["concat"] = (lambda x, y, z: _weighted(ad.concat([x, y, z], axis=1), 112), [p1, p2, p3])
    fx["spatial_crop"] = (
        lambda x: _weighted(ad.spatial_crop(x, 1, 4, 2, 5), 113),
        [_leaf(rng, (1, 2, 5, 6))],
    )
    fx["slice_axis0"] = (
        lambda x: _weighted(ad.slice_axis0(x, 1, 3), 116),
        [_leaf(rng, (4, 2, 3))],
    )

    cs = _leaf(rng, (2, 3, 3, 3))
    cs.data += rng.permutation(cs.data.size).reshape(cs.shape) * 1e-3  # break max ties
    fx["channel_stats"] = (lambda x: _weighted(ad.channel_stats(x), 114), [cs])
    return fx


def run_suite(seed: int = 0, tolerance: float = DEFAULT_TOLERANCE,
              eps: float = DEFAULT_EPS, sabotage: str | None = None) -> list[OpCheck]:
    """Finite-difference check of every differentiable op at 64-bit.

    ``sabotage`` names an op whose analytic gradient is deliberately scaled,
    as a negative control for the harness itself.
    """
    rng = np.random.default_rng(seed)
    fixtures = _fixtures(rng)
    missing = DIFFERENTIABLE_OPS - fixtures.keys()
    if missing:
        raise RuntimeError(f"gradcheck fixtures missing for ops: {sorted(missing)}")

    results = []
    for op in sorted(fixtures):
        build, leaves = fixtures[op]
        scale = 1.01 if op == sabotage else 1.0
        err = check_gradients(build, leaves, eps=eps, grad_scale=scale)
        results.append(OpCheck(op=op, max_rel_err=err, tolerance=tolerance))
    return results
