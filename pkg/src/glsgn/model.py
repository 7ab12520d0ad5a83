"""Four-pathway stepwise generator.

One coarse global pathway restores the intact scaled-down image first; local
pathways then restore patch grids of decreasing resolution, each consuming
the decoded features of its predecessor and of the global pathway.  All four
pathways share one encoder-decoder structure with independent parameters.
Per-pathway spatial attention maps are cross-normalized (perceptual
attention consistency), decoder residual blocks equalize restoring intensity
across tiles (patch normalization), and the final full-resolution output is
synthesized from masked pyramid residuals of three pathways on top of the
last pathway's low-frequency restoration.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .attention import MapGeometry, PacWeights, align_map, fuse_attention, reweight, spatial_attention
from .autodiff import ShapeError, Tensor
from .config import VARIANTS, GlsgnConfig
from .losses import uniform_fanin
from .patches import PatchGrid, assemble, partition, pn_scales, stack_grid, unstack_grid
from .pyramid import extract_highfreq, fuse_glsgn
from .rng import derive_rng

ATT_SHAPE = (1, 2, 7, 7)


@dataclass
class PathwayOutput:
    """Intact-resolution products of one pathway.

    ``attention`` is the map this pathway hands to its consumers: the raw
    encoder-bottleneck map for local pathways, the decoded-feature map for
    the global pathway.  ``mask`` weights this pathway's pyramid residual.
    """

    restored: Tensor
    decoded: Tensor
    attention: Tensor | None = None
    mask: Tensor | None = None


@dataclass
class GlsgnOutput:
    per_pathway: dict[str, PathwayOutput]
    final: Tensor


class GlsgnModel:
    """Stepwise global-local generator; construction is deterministic by seed."""

    MASKED_PATHWAYS = ("s1", "s2", "sg")  # sources of pyramid residuals

    def __init__(self, config: GlsgnConfig):
        self.config = config
        self.dtype = config.np_dtype
        self.params: dict[str, Tensor] = {}
        rng = derive_rng(config.seed, 0x6E7)
        for name, geom in config.pathway_geometries():
            self._build_pathway(name, geom, rng)

    # -- parameter construction -----------------------------------------------------

    def _conv(self, name: str, shape: tuple[int, ...], rng, zero: bool = False,
              trainable: bool = True) -> None:
        data = np.zeros(shape, dtype=self.dtype) if zero else uniform_fanin(rng, shape, self.dtype)
        self.params[f"{name}.w"] = Tensor(data, requires_grad=trainable)
        self.params[f"{name}.b"] = Tensor(np.zeros(shape[0], dtype=self.dtype),
                                          requires_grad=trainable)

    def _build_pathway(self, name: str, geom: tuple[int, int, int], rng) -> None:
        cfg = self.config
        c = cfg.base_channels
        depth = cfg.encoder_depth
        multi_patch = geom[1] * geom[2] > 1

        self._conv(f"{name}.stem", (c, 3, 3, 3), rng)
        prev_ch = 3 * c  # stem features plus two handoff feature slots
        for k in range(1, depth + 1):
            out_ch = (1 << k) * c
            self._conv(f"{name}.enc{k}", (out_ch, prev_ch, 3, 3), rng)
            prev_ch = out_ch
        if cfg.uses_pac:
            self._conv(f"{name}.att", ATT_SHAPE, rng)
        for k in range(depth - 1, -1, -1):
            width = (1 << k) * c
            skip_ch = (1 << k) * c if k >= 1 else c
            self._conv(f"{name}.dec{k}", (width, 2 * width + skip_ch, 3, 3), rng)
            for r in range(cfg.residual_blocks):
                self._conv(f"{name}.dec{k}.res{r}.a", (width, width, 3, 3), rng)
                self._conv(f"{name}.dec{k}.res{r}.b", (width, width, 3, 3), rng)
                if cfg.uses_pn and multi_patch:
                    # zero-init so normalization starts as a pure rescale
                    self._conv(f"{name}.dec{k}.res{r}.pn", (width, width, 3, 3), rng,
                               zero=True)
        self._conv(f"{name}.head", (3, c, 3, 3), rng)
        if name in self.MASKED_PATHWAYS:
            self._conv(f"{name}.mask", (1, c, 1, 1), rng, trainable=cfg.uses_lp)

    # -- parameter access ------------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def pathway_param_shapes(self, name: str, group: str = "enc") -> list[tuple[int, ...]]:
        """Shapes of a pathway's encoder stack (stem + strided blocks)."""
        keys = [k for k in self.params
                if k.startswith(f"{name}.stem") or
                (k.startswith(f"{name}.enc") and group == "enc")]
        return [self.params[k].shape for k in sorted(keys)]

    # -- forward ----------------------------------------------------------------------

    def forward(self, image: Tensor) -> GlsgnOutput:
        cfg = self.config
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"forward: expected (B,3,H,W), got {image.shape}")
        if image.shape[2] != cfg.input_h or image.shape[3] != cfg.input_w:
            raise ShapeError(
                f"forward: input {image.shape[2]}x{image.shape[3]} does not match "
                f"configured {cfg.input_h}x{cfg.input_w}")
        if image.dtype != self.dtype:
            raise ShapeError(f"forward: input dtype {image.dtype} != model dtype {self.dtype}")

        outputs: dict[str, PathwayOutput] = {}
        prev: PathwayOutput | None = None
        for name, geom in cfg.pathway_geometries():
            div = geom[0]
            inp = image if div == 1 else ad.resize_bilinear(
                image, cfg.input_h // div, cfg.input_w // div)
            glob = outputs.get("sg")
            out = self._pathway_forward(
                name, geom, inp,
                prev=prev if name not in ("sg", "s1") else None,
                glob=glob if name != "sg" else None)
            outputs[name] = out
            if name != "sg":
                prev = out
        final = ad.clip01(self._synthesize(outputs))
        return GlsgnOutput(per_pathway=outputs, final=final)

    def _bottleneck_geometry(self, geom: tuple[int, int, int]) -> MapGeometry:
        div, rows, cols = geom
        scale = div * (1 << self.config.encoder_depth)
        return MapGeometry(self.config.input_h // scale, self.config.input_w // scale,
                           rows, cols)

    def _patch_geometry(self, geom: tuple[int, int, int]) -> MapGeometry:
        div, rows, cols = geom
        return MapGeometry(self.config.input_h // div, self.config.input_w // div,
                           rows, cols)

    def _aligned_stack(self, intact: Tensor | None, dst: MapGeometry) -> Tensor | None:
        """Intact feature map -> destination-geometry tiles, stacked patch-major."""
        if intact is None:
            return None
        aligned = align_map(PatchGrid(1, 1, [intact]), dst)
        return stack_grid(aligned)

    def _pathway_forward(self, name: str, geom: tuple[int, int, int], inp: Tensor,
                         prev: PathwayOutput | None, glob: PathwayOutput | None) -> PathwayOutput:
        # tiles are folded into the batch axis (patch-major) so each shared
        # convolution runs once per layer; normalization and attention fusion
        # act on the stack with matching per-tile alignment
        cfg = self.config
        div, rows, cols = geom
        depth = cfg.encoder_depth
        c = cfg.base_channels
        multi_patch = rows * cols > 1
        grid = partition(inp, rows, cols)
        batch = inp.shape[0]
        ph, pw = grid.patch_h, grid.patch_w

        patch_geo = self._patch_geometry(geom)
        bneck_geo = self._bottleneck_geometry(geom)
        prev_feats = self._aligned_stack(prev.decoded if prev else None, patch_geo)
        glob_feats = self._aligned_stack(glob.decoded if glob else None, patch_geo)
        prev_maps = self._aligned_stack(prev.attention if prev else None, bneck_geo)
        glob_maps = self._aligned_stack(glob.attention if glob else None, bneck_geo)
        zeros_feat = Tensor(np.zeros((len(grid) * batch, c, ph, pw), dtype=self.dtype))

        x = stack_grid(grid)
        e = ad.leaky_relu(ad.conv2d(x, self.params[f"{name}.stem.w"],
                                    self.params[f"{name}.stem.b"], stride=1, padding=1))
        levels = [e]
        x = ad.concat([e,
                       prev_feats if prev_feats is not None else zeros_feat,
                       glob_feats if glob_feats is not None else zeros_feat], axis=1)
        for k in range(1, depth + 1):
            x = ad.leaky_relu(ad.conv2d(x, self.params[f"{name}.enc{k}.w"],
                                        self.params[f"{name}.enc{k}.b"],
                                        stride=2, padding=1))
            levels.append(x)

        own_stack = None
        if cfg.uses_pac:
            own_stack = spatial_attention(levels[depth], self.params[f"{name}.att.w"],
                                          self.params[f"{name}.att.b"])
            fused = fuse_attention(own_stack, prev_maps, glob_maps,
                                   PacWeights(cfg.pac_sigma1, cfg.pac_sigma2))
            levels[depth] = reweight(levels[depth], fused)

        current = levels[depth]
        for k in range(depth - 1, -1, -1):
            up = ad.resize_bilinear(current, current.shape[2] * 2, current.shape[3] * 2)
            x = ad.concat([up, levels[k]], axis=1)
            current = ad.leaky_relu(ad.conv2d(
                x, self.params[f"{name}.dec{k}.w"], self.params[f"{name}.dec{k}.b"],
                stride=1, padding=1))
            for r in range(cfg.residual_blocks):
                wa, ba = self.params[f"{name}.dec{k}.res{r}.a.w"], self.params[f"{name}.dec{k}.res{r}.a.b"]
                wb, bb = self.params[f"{name}.dec{k}.res{r}.b.w"], self.params[f"{name}.dec{k}.res{r}.b.b"]
                y = ad.conv2d(ad.leaky_relu(ad.conv2d(current, wa, ba, 1, 1)), wb, bb, 1, 1)
                block_out = current + y
                if cfg.uses_pn and multi_patch:
                    scales = pn_scales(current, block_out, rows, cols, batch, cfg.pn_epsilon)
                    scaled = block_out * scales.reshape(block_out.shape[0], -1, 1, 1)
                    bias = ad.conv2d(block_out, self.params[f"{name}.dec{k}.res{r}.pn.w"],
                                     self.params[f"{name}.dec{k}.res{r}.pn.b"], 1, 1)
                    block_out = scaled + bias
                current = block_out

        restored_stack = ad.sigmoid(ad.conv2d(current, self.params[f"{name}.head.w"],
                                              self.params[f"{name}.head.b"], 1, 1))
        restored = assemble(unstack_grid(restored_stack, rows, cols, batch))
        decoded = assemble(unstack_grid(current, rows, cols, batch))

        attention = None
        if cfg.uses_pac:
            if name == "sg":
                # consumers read the global map from the decoded features
                attention = spatial_attention(decoded, self.params[f"{name}.att.w"],
                                              self.params[f"{name}.att.b"])
            else:
                attention = assemble(unstack_grid(own_stack, rows, cols, batch))

        mask = None
        if cfg.uses_lp and name in self.MASKED_PATHWAYS:
            mask = ad.sigmoid(ad.conv2d(decoded, self.params[f"{name}.mask.w"],
                                        self.params[f"{name}.mask.b"], 1, 0))
        return PathwayOutput(restored=restored, decoded=decoded,
                             attention=attention, mask=mask)

    # -- synthesis --------------------------------------------------------------------

    def _synthesize(self, outputs: dict[str, PathwayOutput]) -> Tensor:
        cfg = self.config
        h, w = cfg.input_h, cfg.input_w

        def at_full(t: Tensor) -> Tensor:
            return t if t.shape[2:] == (h, w) else ad.resize_bilinear(t, h, w)

        if cfg.variant == "global-only":
            return at_full(outputs["sg"].restored)
        if not cfg.uses_lp:
            terms = [at_full(o.restored) for o in outputs.values()]
            total = terms[0]
            for t in terms[1:]:
                total = total + t
            return total * (1.0 / len(terms))
        return self.synthesize_pyramid(
            outputs["s1"].restored, outputs["s2"].restored, outputs["sg"].restored,
            outputs["s3"].restored,
            (outputs["s1"].mask, outputs["s2"].mask, outputs["sg"].mask))

    @staticmethod
    def synthesize_pyramid(b1: Tensor, b2: Tensor, bg: Tensor, b3: Tensor,
                           masks: tuple[Tensor, Tensor, Tensor]) -> Tensor:
        """Masked-residual synthesis from three restorations plus the coarse base."""
        h1 = extract_highfreq(b1)
        h2 = extract_highfreq(b2)
        h3 = extract_highfreq(bg)
        return fuse_glsgn(h1, h2, h3, b3, masks)


def ablation_variant(config: GlsgnConfig, variant: str) -> GlsgnModel:
    """Model for one ablation variant of the given base configuration."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; valid: {VARIANTS}")
    return GlsgnModel(replace(config, variant=variant))
