"""Toy denoising U-Net with standard and pose-conditioned transformer layers.

A standard layer is pre-norm self-attention ``s``, text cross-attention ``g``
and a feed-forward ``f``. A pose layer computes the same ``W_x = g(s(z), c)``,
renders ``W_y`` from its FeatureNeRF at the target camera, fuses the two with
a linear map ``l`` initialized to pass ``W_x`` through untouched, and then
applies ``f``. Reference features for the fields come from running the same
network over the reference images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import autodiff as ad
from .camera import CameraPose
from .featurenerf import FeatureNeRF, RenderOutput

IMPORTANCE_PROB = 0.9
T_REF = 0


@dataclass(frozen=True)
class LayerSpec:
    name: str
    stage: str  # enc | mid | dec
    level: int  # 1 -> H/2, 2 -> H/4
    kind: str  # standard | pose


def default_roster() -> tuple[LayerSpec, ...]:
    layers = []
    for stage, level in (("enc", 1), ("enc", 2), ("mid", 2), ("dec", 2), ("dec", 1)):
        layers.append(LayerSpec(f"{stage}{level}_std", stage, level, "standard"))
        layers.append(LayerSpec(f"{stage}{level}_pose", stage, level, "pose"))
    return tuple(layers)


@dataclass(frozen=True)
class UNetConfig:
    image_size: int = 32
    channels: tuple[int, int, int] = (32, 64, 64)
    text_dim: int = 32
    temb_dim: int = 128
    nerf_hidden: int = 64
    oof_policy: str = "vote"
    roster: tuple[LayerSpec, ...] = field(default_factory=default_roster)

    def without_pose(self) -> "UNetConfig":
        """Twin config with every pose layer demoted to a standard one."""
        roster = tuple(LayerSpec(s.name, s.stage, s.level, "standard") for s in self.roster)
        return replace(self, roster=roster)

    def roster_string(self) -> str:
        return ",".join(f"{s.name}:{s.stage}{s.level}:{s.kind}" for s in self.roster)

    @staticmethod
    def parse_roster(text: str) -> tuple[LayerSpec, ...]:
        out = []
        for item in text.split(","):
            name, where, kind = item.split(":")
            out.append(LayerSpec(name, where[:-1], int(where[-1]), kind))
        return tuple(out)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1).to(torch.get_default_dtype())


class ResBlock(nn.Module):
    def __init__(self, cin, cout, temb_dim):
        super().__init__()
        self.n1 = nn.GroupNorm(8, cin)
        self.c1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.t = nn.Linear(temb_dim, cout)
        self.n2 = nn.GroupNorm(8, cout)
        self.c2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.c1(F.silu(self.n1(x)))
        h = h + self.t(temb)[:, :, None, None]
        h = self.c2(F.silu(self.n2(h)))
        return self.skip(x) + h


class StandardLayer(nn.Module):
    """Pre-norm residual self-attention, text cross-attention and feed-forward."""

    def __init__(self, dim, text_dim):
        super().__init__()
        self.dim = dim
        self.ln1, self.ln2, self.ln3 = nn.LayerNorm(dim), nn.LayerNorm(dim), nn.LayerNorm(dim)
        self.sq, self.sk, self.sv, self.so = (nn.Linear(dim, dim) for _ in range(4))
        self.gq = nn.Linear(dim, dim)
        self.gk = nn.Linear(text_dim, dim)
        self.gv = nn.Linear(text_dim, dim)
        self.go = nn.Linear(dim, dim)
        self.f1 = nn.Linear(dim, 2 * dim)
        self.f2 = nn.Linear(2 * dim, dim)

    def self_attn(self, z):
        h = self.ln1(z)
        return z + self.so(ad.attention(self.sq(h), self.sk(h), self.sv(h)))

    def cross_attn(self, z, text, text_mask):
        h = self.ln2(z)
        return z + self.go(ad.attention(self.gq(h), self.gk(text), self.gv(text), text_mask))

    def feed_forward(self, z):
        return z + self.f2(F.softplus(self.f1(self.ln3(z))))

    def attend(self, z, text, text_mask):
        """W_x = g(s(z), c) on tokens (B, HW, C)."""
        return self.cross_attn(self.self_attn(z), text, text_mask)

    def forward(self, z, text, text_mask=None):
        if z.shape[-1] != self.dim:
            raise ad.ShapeError(f"layer expects {self.dim} channels, got tokens {tuple(z.shape)}")
        return self.feed_forward(self.attend(z, text, text_mask))


class PoseLayer(nn.Module):
    """Standard layer plus zero-initialized fusion with a rendered feature map."""

    def __init__(self, dim, text_dim, nerf_hidden=64, oof_policy="vote"):
        super().__init__()
        self.standard = StandardLayer(dim, text_dim)
        self.fuse = nn.Linear(2 * dim, dim)
        self.field = FeatureNeRF(dim, text_dim, nerf_hidden, oof_policy=oof_policy)
        with torch.no_grad():
            self.fuse.weight.zero_()
            self.fuse.weight[:, dim:] = torch.eye(dim)
            self.fuse.bias.zero_()

    def forward(self, z, text, text_mask=None, wy=None):
        """``wy``: rendered tokens (B, HW, C) or None for the zeroed path."""
        wx = self.standard.attend(z, text, text_mask)
        C = self.standard.dim
        fused = F.linear(wx, self.fuse.weight[:, C:], self.fuse.bias)
        if wy is not None:
            fused = fused + F.linear(wy, self.fuse.weight[:, :C])
        return self.standard.feed_forward(fused)


@dataclass
class References:
    """Per-pose-layer reference features (B, N, C, h, w) and their cameras."""

    feats: dict[str, torch.Tensor]
    poses: list[list[CameraPose]]  # B lists of N cameras at the U-Net input resolution


class UNet(nn.Module):
    def __init__(self, cfg: UNetConfig = UNetConfig(), require_pose: bool = True):
        super().__init__()
        if require_pose and not any(s.kind == "pose" for s in cfg.roster):
            raise ValueError("roster needs at least one pose-conditioned layer")
        self.cfg = cfg
        c0, c1, c2 = cfg.channels
        self.chan = {0: c0, 1: c1, 2: c2}
        td = cfg.temb_dim
        self.temb = nn.Sequential(nn.Linear(64, td), nn.SiLU(), nn.Linear(td, td))
        self.inp = nn.Conv2d(3, c0, 3, padding=1)
        self.enc0 = ResBlock(c0, c0, td)
        self.down1 = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.enc1 = ResBlock(c1, c1, td)
        self.down2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.enc2 = ResBlock(c2, c2, td)
        self.mid_a = ResBlock(c2, c2, td)
        self.mid_b = ResBlock(c2, c2, td)
        self.dec2 = ResBlock(2 * c2, c2, td)
        self.up1 = nn.Conv2d(c2, c1, 3, padding=1)
        self.dec1 = ResBlock(2 * c1, c1, td)
        self.up0 = nn.Conv2d(c1, c0, 3, padding=1)
        self.dec0 = ResBlock(2 * c0, c0, td)
        self.out_norm = nn.GroupNorm(8, c0)
        self.out = nn.Conv2d(c0, 3, 3, padding=1)
        self.layers = nn.ModuleDict()
        for spec in cfg.roster:
            dim = self.chan[spec.level]
            if spec.kind == "pose":
                self.layers[spec.name] = PoseLayer(dim, cfg.text_dim, cfg.nerf_hidden, cfg.oof_policy)
            else:
                self.layers[spec.name] = StandardLayer(dim, cfg.text_dim)

    # -- parameter groups ---------------------------------------------------

    @property
    def pose_layers(self) -> list[str]:
        return [s.name for s in self.cfg.roster if s.kind == "pose"]

    def spec(self, name: str) -> LayerSpec:
        return next(s for s in self.cfg.roster if s.name == name)

    def new_parameters(self) -> dict[str, nn.Parameter]:
        """Fusion maps and fields of pose layers: the only weights customization trains."""
        out = {}
        for name in self.pose_layers:
            layer = self.layers[name]
            for n, p in layer.fuse.named_parameters():
                out[f"{name}.fuse.{n}"] = p
            for n, p in layer.field.named_parameters():
                out[f"{name}.field.{n}"] = p
        return out

    def base_parameters(self) -> dict[str, nn.Parameter]:
        new = {id(p) for p in self.new_parameters().values()}
        return {n: p for n, p in self.named_parameters() if id(p) not in new}

    # -- forward --------------------------------------------------------------

    def _stack(self, stage, level, h, hooks):
        B, C, H, W = h.shape
        z = h.flatten(2).transpose(1, 2)
        for spec in self.cfg.roster:
            if spec.stage != stage or spec.level != level:
                continue
            z = hooks(spec, self.layers[spec.name], z, (H, W))
        return z.transpose(1, 2).reshape(B, C, H, W)

    def _run(self, x, t, text, text_mask, hook):
        temb = self.temb(timestep_embedding(t, 64))
        h0 = self.enc0(self.inp(x), temb)
        h1 = self.enc1(self.down1(h0), temb)
        h1 = self._stack("enc", 1, h1, hook)
        h2 = self.enc2(self.down2(h1), temb)
        h2 = self._stack("enc", 2, h2, hook)
        m = self.mid_a(h2, temb)
        m = self._stack("mid", 2, m, hook)
        m = self.mid_b(m, temb)
        d2 = self.dec2(torch.cat([m, h2], 1), temb)
        d2 = self._stack("dec", 2, d2, hook)
        d1 = self.up1(F.interpolate(d2, scale_factor=2, mode="nearest"))
        d1 = self.dec1(torch.cat([d1, h1], 1), temb)
        d1 = self._stack("dec", 1, d1, hook)
        d0 = self.up0(F.interpolate(d1, scale_factor=2, mode="nearest"))
        d0 = self.dec0(torch.cat([d0, h0], 1), temb)
        return self.out(F.silu(self.out_norm(d0)))

    def forward(self, x, t, text, text_mask=None, renders: dict[str, RenderOutput] | None = None):
        """Noise prediction; ``renders`` maps pose layers to their W_y (absent -> zeroed path).

        Values may be ``RenderOutput``s or bare (B, C, h, w) feature tensors.
        """
        if x.shape[-1] != self.cfg.image_size or x.shape[-2] != self.cfg.image_size:
            raise ad.ShapeError(f"U-Net expects {self.cfg.image_size}px inputs, got {tuple(x.shape)}")
        t = torch.as_tensor(t).reshape(-1).expand(x.shape[0])

        def hook(spec, layer, z, hw):
            if spec.kind != "pose":
                return layer(z, text, text_mask)
            wy = None
            if renders is not None and spec.name in renders:
                r = renders[spec.name]
                wy = (r.feature if isinstance(r, RenderOutput) else r).flatten(2).transpose(1, 2)
            return layer(z, text, text_mask, wy)

        return self._run(x, t, text, text_mask, hook)

    def extract_reference_features(self, images, text, text_mask=None, t_ref: int = T_REF):
        """Run the network over clean reference images, recording F_standard at every pose layer.

        ``images`` (M, 3, S, S) in [-1, 1]; returns name -> (M, C, h, w).
        """
        recorded = {}
        t = torch.full((images.shape[0],), t_ref)

        def hook(spec, layer, z, hw):
            if spec.kind != "pose":
                return layer(z, text, text_mask)
            out = layer.standard(z, text, text_mask)
            recorded[spec.name] = out.transpose(1, 2).reshape(z.shape[0], -1, *hw)
            return out

        self._run(images, t, text, text_mask, hook)
        return recorded

    def render_conditions(self, refs: References, text, text_mask, targets: list[CameraPose],
                          rng: np.random.Generator | None = None, jitter: bool = False,
                          importance: bool | None = None) -> dict[str, RenderOutput]:
        """Render W_y for every pose layer in roster order.

        When an earlier pose layer at the same resolution has rendered in
        this pass its weights drive importance sampling; whether that happens
        is one Bernoulli(0.9) draw per pass unless ``importance`` forces it.
        """
        if importance is None:
            importance = bool(rng.random() < IMPORTANCE_PROB) if rng is not None else True
        out, last_at_level = {}, {}
        S = self.cfg.image_size
        for name in self.pose_layers:
            spec = self.spec(name)
            side = S // (2 ** spec.level)
            prev = last_at_level.get(spec.level) if importance else None
            r = self.layers[name].field(refs.feats[name], refs.poses, text, text_mask, targets,
                                        (side, side), prev=prev, rng=rng, jitter=jitter)
            out[name] = r
            last_at_level[spec.level] = r
        return out


def standard_twin(unet: UNet) -> UNet:
    """Copy of ``unet`` whose pose layers are plain standard layers with the same weights."""
    twin = UNet(unet.cfg.without_pose(), require_pose=False)
    state = {}
    for k, v in unet.state_dict().items():
        parts = k.split(".")
        if parts[0] == "layers" and parts[2] == "standard":
            k = ".".join(parts[:2] + parts[3:])
        elif parts[0] == "layers" and parts[2] in ("fuse", "field"):
            continue
        state[k] = v
    twin.load_state_dict(state)
    return twin


def make_references(unet: UNet, images: torch.Tensor, poses: list[list[CameraPose]], text, text_mask) -> References:
    """Features of (B, N, 3, S, S) reference images, text repeated per reference."""
    B, N = images.shape[:2]
    rep_text = text.repeat_interleave(N, dim=0)
    rep_mask = None if text_mask is None else text_mask.repeat_interleave(N, dim=0)
    feats = unet.extract_reference_features(images.flatten(0, 1), rep_text, rep_mask)
    feats = {k: v.reshape(B, N, *v.shape[1:]) for k, v in feats.items()}
    return References(feats, poses)


def unet_forward(unet: UNet, x, t, text, text_mask=None, refs: References | None = None,
                 targets: list[CameraPose] | None = None, rng=None, jitter=False):
    """Noise prediction with optional reference/target-pose conditioning."""
    if refs is not None and targets is None:
        raise ValueError("reference views given without a target camera")
    renders = None
    if refs is not None:
        renders = unet.render_conditions(refs, text, text_mask, targets, rng, jitter)
    return unet(x, t, text, text_mask, renders)
