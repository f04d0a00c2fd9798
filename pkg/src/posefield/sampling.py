"""Reference-conditioned generation: cached conditions, batched guidance branches, sidecars."""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .camera import CameraPose, rescale_intrinsics
from .diffusion import GuidanceConfig, NoiseSchedule, combine_guidance, sample
from .featurenerf import RenderOutput
from .scene import SceneManifest, save_rgb
from .text import TextVocab
from .training import SceneCache
from .unet import References, UNet, make_references


class Conditioner:
    """Holds a model and a fixed reference set; caches reference features per prompt.

    Only the W_y renders depend on the target camera, and none of it depends
    on the noisy input, so everything is computed once per (prompt, targets)
    and reused across denoising steps.
    """

    def __init__(self, unet: UNet, vocab: TextVocab, scene: SceneCache | SceneManifest,
                 n_refs: int = 4, sched: NoiseSchedule | None = None):
        self.unet, self.vocab = unet.eval(), vocab
        self.scene = scene if isinstance(scene, SceneCache) else SceneCache(scene, unet.cfg.image_size)
        self.ref_indices = self.scene.equidistant(n_refs)
        self.ref_images, self.ref_poses = self.scene.reference_set(self.ref_indices)
        self.sched = sched or NoiseSchedule.cosine()
        self._refs: dict[str, References] = {}

    @property
    def size(self) -> int:
        return self.unet.cfg.image_size

    def target_pose(self, pose: CameraPose) -> CameraPose:
        return rescale_intrinsics(pose, self.size, self.size)

    @torch.no_grad()
    def references(self, prompt: str) -> References:
        if prompt not in self._refs:
            text, mask = self.vocab.encode([prompt])
            self._refs[prompt] = make_references(self.unet, self.ref_images[None], [self.ref_poses], text, mask)
        return self._refs[prompt]

    @torch.no_grad()
    def render(self, prompt: str, targets: list[CameraPose], size: int | None = None,
               layers: list[str] | None = None) -> dict[str, RenderOutput]:
        """Deterministic renders at every pose layer, chaining same-level weights.

        ``size`` overrides the per-layer resolution (all layers render at it).
        """
        refs = self.references(prompt)
        B = len(targets)
        feats = {k: v.expand(B, *v.shape[1:]) for k, v in refs.feats.items()}
        text, mask = self.vocab.encode([prompt] * B)
        out, last = {}, {}
        for name in self.unet.pose_layers:
            spec = self.unet.spec(name)
            side = size or self.size // 2 ** spec.level
            prev = last.get((spec.level, side))
            r = self.unet.layers[name].field(feats[name], [self.ref_poses] * B, text, mask, targets,
                                             (side, side), prev=prev)
            out[name] = last[(spec.level, side)] = r
            if layers is not None and all(n in out for n in layers):
                break
        return out

    @torch.no_grad()
    def branches(self, prompt: str, targets: list[CameraPose]):
        """Inputs for the (none, image, image+text) branches stacked along the batch."""
        B = len(targets)
        full = self.render(prompt, targets)
        empty = self.render("", targets)
        feats = {k: torch.cat([torch.zeros_like(full[k].feature), empty[k].feature, full[k].feature])
                 for k in full}
        t0, m0 = self.vocab.encode([""] * B)
        tc, mc = self.vocab.encode([prompt] * B)
        return torch.cat([t0, t0, tc]), torch.cat([m0, m0, mc]), feats

    @torch.no_grad()
    def generate(self, prompt: str, targets: list[CameraPose], seeds: list[int],
                 g: GuidanceConfig = GuidanceConfig(), steps: int = 50, mode: str = "ancestral") -> torch.Tensor:
        """(B, 3, S, S) images in [0, 1] at the given scene-frame cameras."""
        targets = [self.target_pose(p) for p in targets]
        text, mask, feats = self.branches(prompt, targets)
        B = len(targets)

        def eps_fn(x, t):
            e = self.unet(x.repeat(3, 1, 1, 1), torch.tensor(t), text, mask, feats)
            return combine_guidance(e[:B], e[B:2 * B], e[2 * B:], g)

        return sample(eps_fn, (B, 3, self.size, self.size), self.sched, steps, list(seeds), mode)


def image_to_numpy(x: torch.Tensor) -> np.ndarray:
    """(3, H, W) tensor in [0, 1] -> (H, W, 3) float array."""
    return x.detach().cpu().numpy().transpose(1, 2, 0).astype(np.float64)


def write_sample(path: str | Path, image: torch.Tensor, seed: int, g: GuidanceConfig, steps: int,
                 pose: CameraPose, prompt: str, mode: str) -> tuple[Path, Path]:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_rgb(path, image_to_numpy(image))
    side = path.with_suffix(".json")
    meta = {"seed": seed, "guidance": asdict(g), "steps": steps, "mode": mode,
            "prompt": prompt, "pose": pose.to_dict()}
    side.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return path, side
