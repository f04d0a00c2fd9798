"""Base pretraining and the customization loop with rendering-supervised pose layers."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .camera import CameraPose, crop_intrinsics, rescale_intrinsics
from .checkpoint import MissingArtifact, load_checkpoint, restore_optimizer, save_checkpoint
from .config import LossWeights, PretrainConfig, TrainConfig, dump_config
from .diffusion import NoiseSchedule, biased_timestep, forward_noise, masked_loss
from .featurenerf import RenderOutput
from .scene import VSTAR, SceneManifest, regularization_pool
from .text import TextVocab
from .unet import UNet, UNetConfig, make_references

log = logging.getLogger(__name__)

CROP_PAD = 0.10


class TrainingError(RuntimeError):
    def __init__(self, step: int, msg: str):
        super().__init__(f"step {step}: {msg}")
        self.step = step


def prompt_for(category: str) -> str:
    return f"photo of a {VSTAR} {category}"


# -- image plumbing ------------------------------------------------------------

def area_downsample(a: np.ndarray, size: int) -> np.ndarray:
    """Box-filter an (H, W[, C]) array to (size, size[, C]); H must be a multiple of size."""
    H, W = a.shape[:2]
    if H % size or W % size:
        raise ValueError(f"cannot area-downsample {H}x{W} to {size}")
    fh, fw = H // size, W // size
    return a.reshape(size, fh, size, fw, *a.shape[2:]).mean(axis=(1, 3))


def mask_at(mask: np.ndarray, size: int) -> np.ndarray:
    """Area average, then threshold at one half."""
    return (area_downsample(mask.astype(np.float64), size) >= 0.5).astype(np.float64)


def to_model(img: np.ndarray) -> torch.Tensor:
    """(H, W, 3) in [0, 1] -> (3, H, W) in [-1, 1]."""
    return torch.as_tensor(img.transpose(2, 0, 1) * 2 - 1, dtype=torch.get_default_dtype())


def crop_box(mask: np.ndarray, pad: float = CROP_PAD) -> tuple[float, float, float]:
    """Square (x0, y0, side) around the mask bounding box, padded and kept inside the image."""
    H, W = mask.shape
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return 0.0, 0.0, float(min(H, W))
    x0, x1, y0, y1 = xs.min(), xs.max() + 1, ys.min(), ys.max() + 1
    side = min(max(x1 - x0, y1 - y0) * (1 + 2 * pad), min(H, W))
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    bx = float(np.clip(cx - side / 2, 0, W - side))
    by = float(np.clip(cy - side / 2, 0, H - side))
    return bx, by, float(side)


def crop_resize(img: np.ndarray, x0: float, y0: float, side: float, out: int) -> np.ndarray:
    chans = [np.asarray(Image.fromarray(img[..., c].astype(np.float32), mode="F").resize(
        (out, out), Image.BOX, box=(x0, y0, x0 + side, y0 + side))) for c in range(img.shape[-1])]
    return np.stack(chans, -1).astype(np.float64)


# -- views -------------------------------------------------------------------

@dataclass
class ViewSample:
    indices: list[int]
    target: torch.Tensor  # (3, S, S) in [-1, 1]
    target_mask: np.ndarray  # full-resolution boolean mask
    target_rgb: np.ndarray  # full-resolution [0, 1] image
    target_pose: CameraPose  # at diffusion resolution
    refs: torch.Tensor  # (N-1, 3, S, S)
    ref_poses: list[CameraPose]


class SceneCache:
    """Decoded images/masks of a manifest plus its azimuth-sorted train split."""

    def __init__(self, manifest: SceneManifest, size: int = 32):
        self.manifest, self.size = manifest, size
        self.images = [manifest.load_image(i) for i in range(len(manifest.entries))]
        self.masks = [manifest.load_mask(i) for i in range(len(manifest.entries))]
        train = manifest.indices("train")
        self.train_sorted = sorted(train, key=manifest.azimuth)

    def reference_set(self, indices: list[int]) -> tuple[torch.Tensor, list[CameraPose]]:
        imgs, poses = [], []
        for i in indices:
            x0, y0, side = crop_box(self.masks[i])
            imgs.append(to_model(crop_resize(self.images[i], x0, y0, side, self.size)))
            poses.append(crop_intrinsics(self.manifest.entries[i].pose, x0, y0, side, side, self.size, self.size))
        return torch.stack(imgs), poses

    def equidistant(self, n: int, start: int = 0) -> list[int]:
        m = len(self.train_sorted)
        if n > m:
            raise ValueError(f"asked for {n} views but the train split has {m}")
        return [self.train_sorted[(start + round(k * m / n)) % m] for k in range(n)]


def sample_views(scene: SceneCache | SceneManifest, n: int, rng: np.random.Generator) -> ViewSample:
    """``n`` azimuth-equidistant train views from a random start; the first is the target."""
    if isinstance(scene, SceneManifest):
        scene = SceneCache(scene)
    idx = scene.equidistant(n, int(rng.integers(len(scene.train_sorted))))
    S = scene.size
    t = idx[0]
    refs, ref_poses = scene.reference_set(idx[1:])
    return ViewSample(
        indices=idx,
        target=to_model(area_downsample(scene.images[t], S)),
        target_mask=scene.masks[t],
        target_rgb=scene.images[t],
        target_pose=rescale_intrinsics(scene.manifest.entries[t].pose, S, S),
        refs=refs,
        ref_poses=ref_poses,
    )


# -- losses ------------------------------------------------------------------

def rgb_loss(render: RenderOutput, gt: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over rays of the masked L1 colour error; ``gt`` (B, 3, H, W), ``mask`` (B, H, W)."""
    return (mask.unsqueeze(1) * (gt - render.rgb)).abs().sum(1).mean()


def silhouette_loss(render: RenderOutput, mask: torch.Tensor) -> torch.Tensor:
    return (mask - render.opacity).abs().mean()


def background_loss(render: RenderOutput, mask: torch.Tensor) -> torch.Tensor:
    alpha = 1 - torch.exp(-render.sigma * torch.as_tensor(render.deltas, dtype=render.sigma.dtype))
    per_ray = alpha.abs().sum(-1).reshape(mask.shape)
    return ((1 - mask) * per_ray).mean()


def render_losses(renders: dict[str, RenderOutput], rgb_full: list[np.ndarray],
                  mask_full: list[np.ndarray]) -> dict[str, torch.Tensor]:
    """Auxiliary losses at every pose layer's resolution, averaged over layers."""
    terms = {"rgb": [], "sil": [], "bg": []}
    for r in renders.values():
        size = r.opacity.shape[-1]
        dt = r.opacity.dtype
        gt = torch.as_tensor(np.stack([area_downsample(c, size).transpose(2, 0, 1) for c in rgb_full]), dtype=dt)
        m = torch.as_tensor(np.stack([mask_at(mk, size) for mk in mask_full]), dtype=dt)
        terms["rgb"].append(rgb_loss(r, gt, m))
        terms["sil"].append(silhouette_loss(r, m))
        terms["bg"].append(background_loss(r, m))
    return {k: torch.stack(v).mean() for k, v in terms.items()}


def combine(diffusion: torch.Tensor, aux: dict[str, torch.Tensor] | None, w: LossWeights):
    """Weighted total and a float breakdown."""
    zero = diffusion.new_zeros(())
    aux = aux or {"rgb": zero, "sil": zero, "bg": zero}
    total = diffusion + w.rgb * aux["rgb"] + w.sil * aux["sil"] + w.bg * aux["bg"]
    parts = {"loss": total, "diffusion": diffusion, **aux}
    return total, {k: v.item() for k, v in parts.items()}


def total_loss(unet: UNet, vocab: TextVocab, views: ViewSample, prompt: str, sched: NoiseSchedule,
               weights: LossWeights, rng: np.random.Generator, use_refs: bool = True,
               importance_prob: float = 0.9):
    """Masked diffusion loss on the target plus the averaged FeatureNeRF losses."""
    S = views.target.shape[-1]
    text, tmask = vocab.encode([prompt])
    renders = None
    if use_refs:
        refs = make_references(unet, views.refs[None], [views.ref_poses], text, tmask)
        renders = unet.render_conditions(refs, text, tmask, [views.target_pose], rng, jitter=True,
                                         importance=bool(rng.random() < importance_prob))
    t = biased_timestep(rng, sched, 1)
    gen = torch.Generator().manual_seed(int(rng.integers(2**63)))
    eps = torch.randn(views.target[None].shape, generator=gen)
    x_t = forward_noise(views.target[None], t, eps, sched)
    pred = unet(x_t, torch.as_tensor(t), text, tmask, renders)
    m = torch.as_tensor(mask_at(views.target_mask, S), dtype=pred.dtype)[None]
    diff = masked_loss(eps, pred, m, sched.w[t])
    aux = render_losses(renders, [views.target_rgb], [views.target_mask]) if renders else None
    return combine(diff, aux, weights)


def plain_loss(unet: UNet, vocab: TextVocab, images: torch.Tensor, prompts: list[str],
               sched: NoiseSchedule, rng: np.random.Generator, t=None):
    """Unmasked denoising loss without any pose conditioning."""
    text, tmask = vocab.encode(prompts)
    if t is None:
        t = rng.integers(1, sched.T + 1, size=len(prompts))
    gen = torch.Generator().manual_seed(int(rng.integers(2**63)))
    eps = torch.randn(images.shape, generator=gen)
    x_t = forward_noise(images, t, eps, sched)
    pred = unet(x_t, torch.as_tensor(t), text, tmask)
    return masked_loss(eps, pred, torch.ones(images.shape[0], *images.shape[2:]))


# -- loops -------------------------------------------------------------------

class MetricLog:
    """Append-only JSON-lines log that can be truncated back to a resume point."""

    def __init__(self, path: Path, resume_step: int = 0):
        self.path = path
        if resume_step and path.exists():
            keep = [ln for ln in path.read_text().splitlines() if ln and json.loads(ln).get("step", -1) < resume_step]
            path.write_text("".join(k + "\n" for k in keep))
        elif path.exists():
            path.unlink()

    def write(self, rec: dict) -> None:
        with self.path.open("a") as f:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_log(path: str | Path) -> list[dict]:
    return [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln]


def pool_tensors(category: str, k: int, seed: int, size: int = 32):
    pool = regularization_pool(category, k, seed)
    images = torch.stack([to_model(area_downsample(p.image, size)) for p in pool])
    return images, [p.caption for p in pool]


def pretrain(category: str, cfg: PretrainConfig, out_dir: str | Path,
             unet_cfg: UNetConfig = UNetConfig(), sched: NoiseSchedule | None = None,
             progress=None) -> Path:
    """Fit the base denoiser on the category pool; writes ``out_dir/checkpoint``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sched = sched or NoiseSchedule.cosine()
    torch.manual_seed(cfg.seed)
    unet, vocab = UNet(unet_cfg), TextVocab(unet_cfg.text_dim, seed=cfg.seed)
    vocab.requires_grad_(False)
    base = unet.base_parameters()
    for p in unet.new_parameters().values():
        p.requires_grad_(False)
    opt = torch.optim.Adam(base.values(), lr=cfg.learning_rate, betas=(0.9, 0.999))
    images, captions = pool_tensors(category, cfg.pool_size, cfg.seed, unet_cfg.image_size)
    mlog = MetricLog(out / "metrics.jsonl")
    for step in range(cfg.steps):
        rng = np.random.default_rng([cfg.seed, step])
        idx = rng.choice(len(captions), size=cfg.batch, replace=False)
        prompts = ["" if rng.random() < cfg.text_drop else captions[i] for i in idx]
        loss = plain_loss(unet, vocab, images[idx], prompts, sched, rng)
        if not torch.isfinite(loss):
            mlog.write({"step": step, "error": "non-finite loss"})
            raise TrainingError(step, "non-finite pretraining loss")
        opt.zero_grad()
        loss.backward()
        opt.step()
        mlog.write({"step": step, "loss": loss.item()})
        if progress:
            progress(step, loss.item())
    meta = {"kind": "base", "category": category, "step": cfg.steps, "pool_seed": cfg.seed,
            "config": dump_config({"pretrain": cfg})}
    return save_checkpoint(out / "checkpoint", unet, vocab, meta)


def trainable(unet: UNet, vocab: TextVocab) -> dict[str, torch.nn.Parameter]:
    return {"text.vstar": vocab.vstar, **{f"unet.{k}": p for k, p in unet.new_parameters().items()}}


def frozen(unet: UNet, vocab: TextVocab) -> dict[str, torch.Tensor]:
    out = {f"unet.{k}": p for k, p in unet.base_parameters().items()}
    out["text.table"] = vocab.table
    return out


def branch_draw(rng: np.random.Generator, cfg: TrainConfig) -> tuple[str, str]:
    """(branch, drop): branch is custom|reg, drop is none|text|both (half of drops are joint)."""
    branch = "reg" if rng.random() < cfg.reg_prob else "custom"
    u = rng.random()
    drop = "none" if u >= cfg.text_drop else ("both" if u < cfg.text_drop / 2 else "text")
    return branch, drop


def train(manifest: SceneManifest, cfg: TrainConfig, weights: LossWeights, out_dir: str | Path,
          base: str | Path, sched: NoiseSchedule | None = None, progress=None) -> Path:
    """Customize a pretrained base on one scene; resumes from ``out_dir/checkpoint`` if present."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sched = sched or NoiseSchedule.cosine()
    ckpt = out / "checkpoint"
    resume = (ckpt / "manifest.json").is_file()
    src = ckpt if resume else Path(base)
    if not (src / "manifest.json").is_file():
        raise MissingArtifact(f"base checkpoint not found at {src}")
    unet, vocab, meta, moments = load_checkpoint(src)
    start = int(meta.get("step", 0)) if resume else 0
    if resume and meta.get("kind") != "custom":
        raise TrainingError(start, f"{ckpt} is not a customization checkpoint")
    unet.requires_grad_(False)
    vocab.requires_grad_(False)
    params = trainable(unet, vocab)
    for p in params.values():
        p.requires_grad_(True)
    names = {id(p): n for n, p in params.items()}
    opt = torch.optim.Adam(params.values(), lr=cfg.learning_rate, betas=(0.9, 0.999), weight_decay=0.0)
    if resume:
        restore_optimizer(opt, moments, params)

    category = manifest.category
    pool_seed = int(meta.get("pool_seed", 0))
    scene = SceneCache(manifest, unet.cfg.image_size)
    pool_images, pool_caps = pool_tensors(category, cfg.pool_size, pool_seed, unet.cfg.image_size)
    prompt = prompt_for(category)
    mlog = MetricLog(out / "metrics.jsonl", start)
    ck_meta = {"kind": "custom", "category": category, "pool_seed": pool_seed,
               "scene": str(manifest.root), "prompt": prompt,
               "config": dump_config({"train": cfg, "loss": weights})}

    def checkpoint(step):
        save_checkpoint(ckpt, unet, vocab, dict(ck_meta, step=step), opt, names)

    if cfg.steps == 0:
        checkpoint(0)
    for step in range(start, cfg.steps):
        rng = np.random.default_rng([cfg.seed, step])
        total, recs = 0.0, []
        for _ in range(cfg.batch):
            branch, drop = branch_draw(rng, cfg)
            if branch == "reg":
                i = int(rng.integers(len(pool_caps)))
                cap = "" if drop != "none" else pool_caps[i]
                loss = plain_loss(unet, vocab, pool_images[i:i + 1], [cap], sched, rng,
                                  t=biased_timestep(rng, sched, 1))
                loss, parts = combine(loss, None, weights)
            else:
                views = sample_views(scene, cfg.views, rng)
                loss, parts = total_loss(unet, vocab, views, "" if drop != "none" else prompt, sched,
                                         weights, rng, use_refs=drop != "both",
                                         importance_prob=cfg.importance_prob)
            total = total + loss / cfg.batch
            recs.append(dict(parts, branch=branch, drop=drop))
        if not math.isfinite(total.item()):
            mlog.write({"step": step, "error": "non-finite loss"})
            raise TrainingError(step, "non-finite loss")
        opt.zero_grad()
        total.backward()
        opt.step()
        rec = {k: float(np.mean([r[k] for r in recs])) for k in ("loss", "diffusion", "rgb", "sil", "bg")}
        rec.update(step=step, branch=[r["branch"] for r in recs], drop=[r["drop"] for r in recs])
        mlog.write(rec)
        if progress:
            progress(step, rec)
        if (step + 1) % cfg.checkpoint_every == 0 or step + 1 == cfg.steps:
            checkpoint(step + 1)
    return ckpt
