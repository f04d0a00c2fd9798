"""Metrics: held-out field renders, pose adherence of samples, guidance sweeps."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .camera import CameraPose, rescale_intrinsics, rotate_about_z
from .diffusion import GuidanceConfig
from .sampling import Conditioner, image_to_numpy
from .scene import SceneManifest, save_rgb
from .training import area_downsample, mask_at

PSNR_INF = math.inf
PSNR_REPORT_CAP = 100.0  # what +inf becomes in a serialized report
LUMA = np.array([0.299, 0.587, 0.114])


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """10 log10(1 / MSE) over all channels, restricted to ``mask`` (H, W) when given."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    sq = (a - b) ** 2
    if mask is not None:
        m = np.asarray(mask, bool)
        if not m.any():
            return PSNR_INF
        sq = sq[m]
    mse = float(sq.mean())
    return PSNR_INF if mse == 0 else 10 * math.log10(1.0 / mse)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    if a.shape != b.shape:
        raise ValueError(f"iou: shape mismatch {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    return 1.0 if union == 0 else float(np.logical_and(a, b).sum() / union)


def foreground(img: np.ndarray, threshold: float = 0.95) -> np.ndarray:
    """Non-background pixels of a white-background image by luminance."""
    return img @ LUMA < threshold


def _cap(v: float) -> float:
    return PSNR_REPORT_CAP if v == PSNR_INF else v


@dataclass
class MetricsReport:
    psnr: list[float] = field(default_factory=list)
    iou: list[float] = field(default_factory=list)
    views: list[int] = field(default_factory=list)
    pose_adherence: dict | None = None
    sweep: list[dict] = field(default_factory=list)

    @property
    def psnr_mean(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def iou_mean(self) -> float:
        return float(np.mean(self.iou)) if self.iou else float("nan")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["psnr"] = [_cap(v) for v in self.psnr]
        d["psnr_mean"] = _cap(self.psnr_mean) if self.psnr else None
        d["iou_mean"] = self.iou_mean if self.iou else None
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, allow_nan=False)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n")
        return path


def oracle_at(manifest: SceneManifest, pose: CameraPose, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Oracle image and mask at ``pose`` (full manifest resolution), box-downsampled to ``size``."""
    rgb, mask = manifest.oracle(pose)
    return area_downsample(rgb, size), mask_at(mask, size).astype(bool)


def ray_oracle(manifest: SceneManifest, pose: CameraPose, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Oracle image and mask traced through the pixel centers of a ``size`` x ``size`` grid.

    These are the same rays a field casts at that resolution, so a perfect
    field matches exactly. Box-filtered targets would instead blend silhouette
    edges with the background, which no single ray can reproduce.
    """
    return manifest.oracle(rescale_intrinsics(pose, size, size))


def deepest_layer(cond: Conditioner) -> str:
    return cond.unet.pose_layers[-1]


def novel_view_eval(cond: Conditioner, prompt: str, indices: list[int] | None = None,
                    size: int = 32, layer: str | None = None) -> MetricsReport:
    """PSNR inside the oracle mask and opacity IoU of one pose layer's field, on the field's own rays.

    Defaults to every validation view and the last pose layer in roster order.
    """
    m = cond.scene.manifest
    indices = m.indices("val") if indices is None else list(indices)
    if not indices:
        raise ValueError("no views to evaluate")
    layer = layer or deepest_layer(cond)
    poses = [m.entries[i].pose for i in indices]
    r = cond.render(prompt, [cond.target_pose(p) for p in poses], size=size, layers=[layer])[layer]
    rep = MetricsReport(views=indices)
    for b, pose in enumerate(poses):
        gt, gm = ray_oracle(m, pose, size)
        rgb = image_to_numpy(r.rgb[b])
        rep.psnr.append(psnr(rgb, gt, gm))
        rep.iou.append(iou(r.opacity[b].numpy() >= 0.5, gm))
    return rep


def rotated(manifest: SceneManifest, pose: CameraPose, degrees: float) -> CameraPose:
    return rotate_about_z(pose, degrees, manifest.world_origin)


def pose_adherence(cond: Conditioner, prompt: str, poses: list[CameraPose], seeds: list[int],
                   g: GuidanceConfig = GuidanceConfig(), steps: int = 50, rotation: float = 90.0,
                   threshold: float = 0.95, mode: str = "ancestral", keep_images: bool = False) -> dict:
    """Silhouette IoU of samples with the oracle mask at the requested pose minus at a rotated pose."""
    m, S = cond.scene.manifest, cond.size
    grid = [(p, s) for p in range(len(poses)) for s in seeds]
    imgs = cond.generate(prompt, [poses[p] for p, _ in grid], [s for _, s in grid], g, steps, mode)
    masks = {}
    for p, pose in enumerate(poses):
        masks[p] = (oracle_at(m, pose, S), oracle_at(m, rotated(m, pose, rotation), S)[1])
    items, deltas, degenerate = [], [], 0
    for k, (p, s) in enumerate(grid):
        img = image_to_numpy(imgs[k])
        fg = foreground(img, threshold)
        (gt, right), wrong = masks[p]
        rec = {"pose": p, "seed": s}
        if not fg.any():
            degenerate += 1
            rec["degenerate"] = True
        else:
            rec.update(iou=iou(fg, right), iou_rotated=iou(fg, wrong), psnr=_cap(psnr(img, gt, right)))
            rec["delta"] = rec["iou"] - rec["iou_rotated"]
            deltas.append(rec["delta"])
        items.append(rec)
    out = {"delta_iou": float(np.mean(deltas)) if deltas else None, "n": len(grid),
           "degenerate": degenerate, "rotation": rotation, "guidance": asdict(g), "items": items}
    if keep_images:
        out["images"] = imgs
    return out


def tile(images: list[list[np.ndarray]], pad: int = 1) -> np.ndarray:
    """Rows of equally sized (H, W, 3) images into one white-padded grid."""
    H, W = images[0][0].shape[:2]
    rows, cols = len(images), max(len(r) for r in images)
    out = np.ones((rows * (H + pad) + pad, cols * (W + pad) + pad, 3))
    for i, row in enumerate(images):
        for j, im in enumerate(row):
            y, x = pad + i * (H + pad), pad + j * (W + pad)
            out[y:y + H, x:x + W] = im
    return out


def guidance_sweep(cond: Conditioner, prompt: str, poses: list[CameraPose], text_scales, image_scales,
                   seed: int = 0, steps: int = 50, grid_path: str | Path | None = None) -> list[dict]:
    """Pose adherence and masked PSNR per (text, image) scale pair under one fixed seed.

    Each grid row is one scale pair, each column one pose.
    """
    rows, table = [], []
    for lc in text_scales:
        for li in image_scales:
            g = GuidanceConfig(image=float(li), text=float(lc))
            res = pose_adherence(cond, prompt, poses, [seed], g, steps, keep_images=True)
            ok = [it for it in res["items"] if not it.get("degenerate")]
            table.append({"text": float(lc), "image": float(li), "delta_iou": res["delta_iou"],
                          "psnr": float(np.mean([it["psnr"] for it in ok])) if ok else None,
                          "degenerate": res["degenerate"]})
            rows.append([image_to_numpy(x) for x in res["images"]])
    if grid_path is not None:
        Path(grid_path).parent.mkdir(parents=True, exist_ok=True)
        save_rgb(Path(grid_path), tile(rows))
    return table


def eval_poses(manifest: SceneManifest) -> list[CameraPose]:
    return [manifest.entries[i].pose for i in manifest.indices("val")]


def opacity_png(r, b: int) -> np.ndarray:
    return np.repeat(r.opacity[b].numpy()[..., None], 3, -1).astype(np.float64)
