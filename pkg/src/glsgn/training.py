"""Optimization loop, paired augmentation, and the evaluation driver.

Training alternates one discriminator update and one generator update per
batch with Adam (lr 2e-4, standard betas).  All randomness flows through
streams derived from the run seed, so single-threaded runs produce
byte-identical checkpoints and logs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint, validate_against_model
from .config import GlsgnConfig, TrainRun
from .degradations import DegradedSample
from .imaging import Image, load_image, psnr, ssim
from .losses import (
    Discriminator,
    PerceptualExtractor,
    adversarial_g_loss,
    discriminator_loss,
    perceptual_loss,
    pixel_loss,
    total_loss,
)
from .model import GlsgnModel
from .rng import derive_rng

LOG_HEADER = "step,l_pixel,l_perc,l_adv_g,l_d,total"


class TrainingError(RuntimeError):
    pass


# -- Adam --------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @staticmethod
    def for_params(params: dict[str, Tensor], run: TrainRun) -> "AdamState":
        st = AdamState(lr=run.lr, beta1=run.adam_beta1, beta2=run.adam_beta2,
                       eps=run.adam_eps)
        for name, p in params.items():
            st.m[name] = np.zeros_like(p.data)
            st.v[name] = np.zeros_like(p.data)
        return st


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """Bias-corrected Adam update over named parameters, reading .grad."""
    for name, p in params.items():
        if p.grad is None:
            raise TrainingError(f"adam: parameter {name!r} has no gradient")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)


# -- paired augmentation -------------------------------------------------------------


def augment(sample: DegradedSample, rng: np.random.Generator) -> DegradedSample:
    """Joint flips and 90-degree rotations of degraded and background.

    Non-square pairs only rotate by multiples of 180 so dimensions hold.
    """
    deg = sample.degraded.data
    bg = sample.background.data
    h, w = deg.shape[:2]
    k = int(rng.integers(0, 4))
    if h != w and k % 2:
        k = (k + 1) % 4
    flip_h = bool(rng.integers(0, 2))
    flip_v = bool(rng.integers(0, 2))

    def apply(a: np.ndarray) -> np.ndarray:
        out = np.rot90(a, k, axes=(0, 1))
        if flip_h:
            out = out[:, ::-1]
        if flip_v:
            out = out[::-1, :]
        return np.ascontiguousarray(out)

    return DegradedSample(degraded=Image(apply(deg)), background=Image(apply(bg)),
                          kind=sample.kind, seed=sample.seed, params=dict(sample.params))


def crop_pair(sample: DegradedSample, crop_h: int, crop_w: int,
              rng: np.random.Generator) -> DegradedSample:
    """Identical seeded window on both images."""
    h, w = sample.degraded.data.shape[:2]
    if crop_h > h or crop_w > w:
        raise TrainingError(f"crop {crop_h}x{crop_w} larger than image {h}x{w}")
    y0 = int(rng.integers(0, h - crop_h + 1))
    x0 = int(rng.integers(0, w - crop_w + 1))
    take = lambda a: np.ascontiguousarray(a[y0:y0 + crop_h, x0:x0 + crop_w])
    return DegradedSample(degraded=Image(take(sample.degraded.data)),
                          background=Image(take(sample.background.data)),
                          kind=sample.kind, seed=sample.seed, params=dict(sample.params))


# -- manifest loading ----------------------------------------------------------------


def read_manifest(data_dir, manifest_path) -> list[tuple[Path, Path, str]]:
    base = Path(data_dir)
    rows = []
    for lineno, line in enumerate(Path(manifest_path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise TrainingError(f"{manifest_path}:{lineno}: expected 'in gt kind', got {line!r}")
        rows.append((base / parts[0], base / parts[1], parts[2]))
    return rows


def load_pairs(rows: list[tuple[Path, Path, str]]) -> list[DegradedSample]:
    out = []
    for in_path, gt_path, kind in rows:
        try:
            degraded = load_image(in_path)
            background = load_image(gt_path)
        except (OSError, ValueError) as exc:
            raise TrainingError(f"failed to load sample {in_path}: {exc}") from None
        out.append(DegradedSample(degraded=degraded, background=background,
                                  kind=kind, seed=0))
    return out


# -- checkpoint assembly -------------------------------------------------------------


def _pack_state(model: GlsgnModel, disc: Discriminator, opt_g: AdamState,
                opt_d: AdamState, seed: int, step: int) -> Checkpoint:
    tensors: dict[str, np.ndarray] = {}
    for name, p in model.params.items():
        tensors[f"param:{name}"] = p.data
    for name, p in disc.params.items():
        tensors[f"param:{name}"] = p.data
    for name, buf in disc.buffers().items():
        tensors[f"buffer:{name}"] = buf
    for prefix, opt in (("optim_g", opt_g), ("optim_d", opt_d)):
        for name, arr in opt.m.items():
            tensors[f"{prefix}:m:{name}"] = arr
        for name, arr in opt.v.items():
            tensors[f"{prefix}:v:{name}"] = arr
        tensors[f"{prefix}:step"] = np.array(opt.step, dtype=np.uint64)
    return Checkpoint(config=model.config, tensors=tensors, master_seed=seed, step=step)


def build_from_checkpoint(ckpt: Checkpoint) -> tuple[GlsgnModel, Discriminator]:
    """Reconstruct model and discriminator, validating names and shapes."""
    model = GlsgnModel(ckpt.config)
    disc = Discriminator(seed=ckpt.master_seed, dtype=ckpt.config.np_dtype)
    expected = {k: v.shape for k, v in model.params.items()}
    expected.update({k: v.shape for k, v in disc.params.items()})
    validate_against_model(ckpt, expected)
    named = ckpt.named("param")
    for name, p in model.params.items():
        p.data = np.ascontiguousarray(named[name].astype(p.data.dtype))
    for name, p in disc.params.items():
        p.data = np.ascontiguousarray(named[name].astype(p.data.dtype))
    disc.load_buffers(ckpt.named("buffer"))
    return model, disc


def _restore_opt(ckpt: Checkpoint, prefix: str, run: TrainRun,
                 params: dict[str, Tensor]) -> AdamState:
    st = AdamState.for_params(params, run)
    stored = ckpt.named(prefix)
    if stored:
        st.step = int(stored["step"])
        for name in params:
            st.m[name] = stored[f"m:{name}"].copy()
            st.v[name] = stored[f"v:{name}"].copy()
    return st


# -- training loop -------------------------------------------------------------------


def _batch_tensors(samples: list[DegradedSample], dtype) -> tuple[Tensor, Tensor]:
    deg = np.stack([s.degraded.data.transpose(2, 0, 1) for s in samples]).astype(dtype)
    bg = np.stack([s.background.data.transpose(2, 0, 1) for s in samples]).astype(dtype)
    return Tensor(deg), Tensor(bg)


def train(model: GlsgnModel, data_dir, manifest_path, run: TrainRun, out_dir,
          quiet: bool = False) -> tuple[Path, Path]:
    """Run the loop: returns (checkpoint path, metrics log path)."""
    rows = read_manifest(data_dir, manifest_path)
    if not rows:
        raise TrainingError(f"manifest {manifest_path} is empty")
    pool = load_pairs(rows)

    cfg = model.config
    dtype = cfg.np_dtype
    disc = Discriminator(seed=run.seed, dtype=dtype)
    extractor = PerceptualExtractor(seed=run.perceptual_seed, dtype=dtype)
    if run.perceptual_weights_path:
        ext_ckpt = load_checkpoint(run.perceptual_weights_path)
        extractor.load_weights(ext_ckpt.named("param"))
    gen_params = model.trainable_parameters()
    opt_g = AdamState.for_params(gen_params, run)
    opt_d = AdamState.for_params(disc.params, run)
    weights = cfg.loss_weights

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.csv"
    ckpt_path = out / "checkpoint.glsgn"

    def zero_all() -> None:
        for p in gen_params.values():
            p.zero_grad()
        for p in disc.params.values():
            p.zero_grad()

    with open(log_path, "w") as log:
        log.write(LOG_HEADER + "\n")
        for step in range(1, run.steps + 1):
            pick = derive_rng(run.seed, 1, step)
            idx = pick.integers(0, len(pool), size=run.batch_size)
            batch = []
            for slot, i in enumerate(idx):
                s = augment(pool[int(i)], derive_rng(run.seed, 2, step, slot))
                s = crop_pair(s, run.crop_h, run.crop_w, derive_rng(run.seed, 3, step, slot))
                batch.append(s)
            degraded, background = _batch_tensors(batch, dtype)

            gen_out = model.forward(degraded)
            restored = [po.restored for po in gen_out.per_pathway.values()]

            d_loss = discriminator_loss(disc, background, gen_out.final.detach())
            d_loss.backward()
            adam_step(disc.params, opt_d)
            zero_all()

            l_pix = pixel_loss(background, restored, gen_out.final, weights)
            l_perc = perceptual_loss(background, restored, gen_out.final, extractor, weights)
            l_adv = adversarial_g_loss(disc, gen_out.final, update_sn=False)
            l_total = total_loss(l_pix, l_perc, l_adv, weights)
            l_total.backward()
            adam_step(gen_params, opt_g)
            zero_all()

            log.write(f"{step},{l_pix.item():.10g},{l_perc.item():.10g},"
                      f"{l_adv.item():.10g},{d_loss.item():.10g},{l_total.item():.10g}\n")
            if not quiet and (step % run.log_every == 0 or step == 1):
                print(f"step {step:5d}  pixel {l_pix.item():.5f}  perc {l_perc.item():.5f}  "
                      f"adv {l_adv.item():.5f}  d {d_loss.item():.5f}  total {l_total.item():.5f}")

    save_checkpoint(ckpt_path, _pack_state(model, disc, opt_g, opt_d, run.seed, run.steps))
    return ckpt_path, log_path


# -- evaluation ----------------------------------------------------------------------


@dataclass
class EvalRow:
    index: int
    input_path: str
    psnr: float
    ssim: float
    baseline_psnr: float
    baseline_ssim: float


@dataclass
class EvalReport:
    rows: list[EvalRow]
    mean_psnr: float
    mean_ssim: float
    mean_baseline_psnr: float
    mean_baseline_ssim: float


def center_crop(img: Image, h: int, w: int) -> Image:
    ih, iw = img.data.shape[:2]
    if ih < h or iw < w:
        raise TrainingError(f"image {ih}x{iw} smaller than required {h}x{w}")
    y0 = (ih - h) // 2
    x0 = (iw - w) // 2
    return Image(img.data[y0:y0 + h, x0:x0 + w].copy(), path=img.path)


def restore_image(model: GlsgnModel, degraded: Image) -> Image:
    arr = degraded.data.transpose(2, 0, 1)[None].astype(model.config.np_dtype)
    out = model.forward(Tensor(arr))
    return Image(out.final.data[0].transpose(1, 2, 0).astype(np.float64))


def evaluate(model: GlsgnModel, data_dir, manifest_path) -> EvalReport:
    """Restore every manifest pair and report PSNR/SSIM plus the
    degraded-vs-ground-truth baseline."""
    rows = read_manifest(data_dir, manifest_path)
    if not rows:
        raise TrainingError(f"manifest {manifest_path} is empty")
    cfg = model.config
    out_rows = []
    for i, (in_path, gt_path, _) in enumerate(rows):
        degraded = center_crop(load_image(in_path), cfg.input_h, cfg.input_w)
        gt = center_crop(load_image(gt_path), cfg.input_h, cfg.input_w)
        restored = restore_image(model, degraded)
        out_rows.append(EvalRow(
            index=i, input_path=str(in_path),
            psnr=psnr(restored, gt), ssim=ssim(restored, gt),
            baseline_psnr=psnr(degraded, gt), baseline_ssim=ssim(degraded, gt)))

    def mean(vals: list[float]) -> float:
        finite = [v for v in vals if math.isfinite(v)]
        return float(np.mean(finite)) if finite else math.inf

    return EvalReport(
        rows=out_rows,
        mean_psnr=mean([r.psnr for r in out_rows]),
        mean_ssim=float(np.mean([r.ssim for r in out_rows])),
        mean_baseline_psnr=mean([r.baseline_psnr for r in out_rows]),
        mean_baseline_ssim=float(np.mean([r.baseline_ssim for r in out_rows])))
