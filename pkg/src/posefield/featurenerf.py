"""Feed-forward feature radiance field rendered inside a transformer layer.

Given posed reference feature maps, every 3D sample along a target ray is
projected into each reference, the reference feature is looked up and turned
into a per-view point feature by a small MLP, the per-view features are
blended with softmax weights, the blend is decoded into density/color and
updated by cross-attention with the prompt, and the updated features are
alpha-composited into a target-view feature map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import autodiff as ad
from .camera import CameraPose, RaySamples, deltas_from_depths, grid_rays, relative_pose, stratified_depths

N_SAMPLES = 24
OOF_LOGIT = -30.0
# "vote": a view whose image grid misses the point still contributes its
# border-clamped feature, so it can veto empty space; only views with the point
# behind the camera are dropped. "exclude": every out-of-frustum view is dropped.
OOF_POLICIES = ("vote", "exclude")
IMPORTANCE_FLOOR = 0.01


@dataclass(frozen=True)
class FreqEncoding:
    octaves_pos: int = 6
    octaves_dir: int = 4
    include_input: bool = True

    def dim(self, k: int, octaves: int) -> int:
        return k * (int(self.include_input) + 2 * octaves)


def freq_encode(x: torch.Tensor, octaves: int, include_input: bool = True) -> torch.Tensor:
    """Per-coordinate [x, sin(2^l x), cos(2^l x), ...] for l = 0..octaves-1."""
    freqs = 2.0 ** torch.arange(octaves, dtype=x.dtype)
    xf = x.unsqueeze(-1) * freqs  # (..., k, L)
    enc = torch.stack([torch.sin(xf), torch.cos(xf)], dim=-1).flatten(-2)  # (..., k, 2L)
    if include_input:
        enc = torch.cat([x.unsqueeze(-1), enc], dim=-1)
    return enc.flatten(-2)


@dataclass
class FeatureMap:
    """C x h x w features registered to the image plane of ``pose``."""

    data: torch.Tensor
    pose: CameraPose

    def __post_init__(self):
        if self.data.dim() != 3 or min(self.data.shape[1:]) < 1:
            raise ValueError(f"feature map must be C x H x W, got {tuple(self.data.shape)}")

    @property
    def scale(self) -> tuple[float, float]:
        return self.pose.width / self.data.shape[2], self.pose.height / self.data.shape[1]


@dataclass
class RenderOutput:
    feature: torch.Tensor  # (B, C, H, W)
    rgb: torch.Tensor  # (B, 3, H, W)
    opacity: torch.Tensor  # (B, H, W)
    weights: torch.Tensor  # (B, R, n)
    sigma: torch.Tensor  # (B, R, n)
    depths: np.ndarray  # (B, R, n)
    deltas: np.ndarray  # (B, R, n)
    degenerate: torch.Tensor  # (B, R, n) every reference view missed the sample

    @property
    def alpha(self) -> torch.Tensor:
        dl = torch.as_tensor(self.deltas, dtype=self.sigma.dtype)
        return 1.0 - torch.exp(-self.sigma * dl)


def composite(sigma: torch.Tensor, deltas: torch.Tensor):
    """Per-sample weights w_j = T_j (1 - exp(-sigma_j delta_j)) along the last axis."""
    tau = sigma * deltas
    alpha = 1.0 - torch.exp(-tau)
    acc = torch.cumsum(tau, dim=-1)
    trans = torch.exp(-(acc - tau))
    return trans * alpha, torch.exp(-acc[..., -1])


def render_ray(samples, sigma, features, colors):
    """Alpha-composite samples along rays (sample axis second to last).

    ``samples`` is a RaySamples or an array of segment lengths (..., n);
    ``sigma`` (..., n); ``features`` (..., n, C); ``colors`` (..., n, 3).
    Returns (feature, rgb, opacity, weights).
    """
    deltas = samples.deltas if isinstance(samples, RaySamples) else samples
    deltas = torch.as_tensor(deltas, dtype=sigma.dtype)
    if (sigma < 0).any() or (deltas < 0).any():
        raise ValueError("render_ray: densities and segment lengths must be non-negative")
    w, _ = composite(sigma, deltas)
    feat = (w.unsqueeze(-1) * features).sum(-2)
    rgb = (w.unsqueeze(-1) * colors).sum(-2)
    return feat, rgb, w.sum(-1), w


def importance_resample(weights: np.ndarray, depths: np.ndarray, far, n: int,
                        rng: np.random.Generator | None = None, near=None,
                        floor: float = IMPORTANCE_FLOOR) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-CDF redraw of ``n`` depths per ray from earlier compositing weights.

    Bins are the previous segments [depth_j, depth_j + delta_j]; their mass is
    proportional to ``w_j + floor``. Rays whose weights are all zero fall back
    to stratified sampling over [near, far] (near defaults to the first depth).
    ``rng=None`` places draws at stratified quantiles. Returns (depths, deltas).
    """
    weights = np.asarray(weights, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    if (weights < 0).any():
        raise ValueError("importance_resample: negative weights")
    lead = depths.shape[:-1]
    w2 = weights.reshape(-1, weights.shape[-1])
    d2 = depths.reshape(-1, depths.shape[-1])
    far_r = np.broadcast_to(np.asarray(far, dtype=np.float64), lead).reshape(-1)
    near_r = d2[:, 0] if near is None else np.broadcast_to(np.asarray(near, dtype=np.float64), lead).reshape(-1)
    edges = np.concatenate([d2, far_r[:, None]], axis=-1)
    mass = w2 + floor
    total = w2.sum(-1)
    norm = mass.sum(-1, keepdims=True)
    pdf = mass / np.where(norm > 0, norm, 1.0)
    cdf = np.concatenate([np.zeros((len(pdf), 1)), np.cumsum(pdf, -1)], axis=-1)
    cdf[:, -1] = 1.0
    if rng is None:
        u = np.broadcast_to((np.arange(n) + 0.5) / n, (len(pdf), n))
    else:
        u = np.sort(rng.random((len(pdf), n)), axis=-1)
    j = (u[:, :, None] >= cdf[:, None, 1:-1]).sum(-1)
    pj = np.take_along_axis(pdf, j, -1)
    frac = (u - np.take_along_axis(cdf, j, -1)) / np.maximum(pj, 1e-300)
    lo = np.take_along_axis(edges, j, -1)
    hi = np.take_along_axis(edges, j + 1, -1)
    out = lo + np.clip(frac, 0.0, 1.0) * (hi - lo)
    empty = total <= 0
    if empty.any():
        out[empty] = stratified_depths(near_r[empty], far_r[empty], n, int(empty.sum()), rng)
    out = np.sort(out, axis=-1).reshape(*lead, n)
    return out, deltas_from_depths(out, np.broadcast_to(np.asarray(far, dtype=np.float64), lead))


def standardize(v: torch.Tensor, valid: torch.Tensor | None = None, eps: float = 1e-5) -> torch.Tensor:
    """Zero mean, unit variance per channel over the point axis (dim 1) of (B, P, C)."""
    w = torch.ones(v.shape[:2], dtype=v.dtype) if valid is None else valid.to(v.dtype)
    w = torch.where(w.sum(1, keepdim=True) > 0, w, torch.ones_like(w)).unsqueeze(-1)
    n = w.sum(1, keepdim=True)
    mean = (w * v).sum(1, keepdim=True) / n
    var = (w * (v - mean) ** 2).sum(1, keepdim=True) / n
    return (v - mean) / torch.sqrt(var + eps)


class FeatureNeRF(nn.Module):
    """Parameters of one in-layer field: per-view MLP, weigher, (sigma, C) head, text cross-attention."""

    def __init__(self, feat_dim: int, text_dim: int = 32, hidden: int = 64,
                 enc: FreqEncoding = FreqEncoding(), init_sigma: float = 0.5, oof_policy: str = "vote"):
        super().__init__()
        if oof_policy not in OOF_POLICIES:
            raise ValueError(f"oof_policy must be one of {OOF_POLICIES}, got {oof_policy!r}")
        self.feat_dim, self.text_dim, self.enc = feat_dim, text_dim, enc
        self.oof_policy = oof_policy
        in_dim = feat_dim + enc.dim(3, enc.octaves_dir) + enc.dim(3, enc.octaves_pos)
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.Softplus(),
            nn.Linear(hidden, hidden), nn.Softplus(),
            nn.Linear(hidden, feat_dim),
        )
        self.weigher = nn.Linear(feat_dim + 12, 1)
        self.head = nn.Linear(feat_dim, 4)
        self.q = nn.Linear(feat_dim, feat_dim, bias=False)
        self.k = nn.Linear(text_dim, feat_dim, bias=False)
        self.v = nn.Linear(text_dim, feat_dim, bias=False)
        self.out = nn.Linear(feat_dim, feat_dim)
        with torch.no_grad():
            self.head.bias[0] = math.log(math.expm1(init_sigma))
            self.out.weight.zero_()
            self.out.bias.zero_()

    # -- the pieces -------------------------------------------------------

    def point_features(self, sampled, dirs_view, pts_view):
        enc = self.enc
        x = torch.cat([
            sampled,
            freq_encode(dirs_view, enc.octaves_dir, enc.include_input),
            freq_encode(pts_view, enc.octaves_pos, enc.include_input),
        ], dim=-1)
        return self.mlp(x)

    def aggregate(self, feats, relpose, out_of_frustum, dropped=None):
        """Softmax-weighted mean over the view axis (dim 1).

        ``feats`` (B, N, P, C), ``relpose`` (B, N, 12), ``out_of_frustum`` (B, N, P).
        ``dropped`` marks the views that get the fixed low logit and defaults
        to ``out_of_frustum``. Returns the blended feature (B, P, C), the
        weights (B, N, P) and a (B, P) flag for points no view sees.
        """
        B, N, P, _ = feats.shape
        dropped = out_of_frustum if dropped is None else dropped
        rp = relpose.unsqueeze(2).expand(B, N, P, 12)
        logits = self.weigher(torch.cat([feats, rp], dim=-1)).squeeze(-1)
        logits = torch.where(dropped, torch.full_like(logits, OOF_LOGIT), logits)
        w = ad.softmax(logits, dim=1)
        blended = (w.unsqueeze(-1) * feats).sum(1)
        degenerate = out_of_frustum.all(1)
        blended = torch.where(degenerate.unsqueeze(-1), torch.zeros_like(blended), blended)
        return blended, w, degenerate

    def density_color(self, v, valid=None):
        """Decode (B, P, C) features; the head sees them standardized per channel over the points.

        Blended features share a large common offset that swamps the variation
        between occupied and empty points, and a linear head trained on them
        collapses to a uniform density. ``valid`` (B, P) restricts the statistics.
        """
        raw = self.head(standardize(v, valid))
        return F.softplus(raw[..., 0]), torch.sigmoid(raw[..., 1:])

    def text_update(self, v, text, text_mask=None):
        """Residual cross-attention of point features (B, P, C) onto tokens (B, L, D)."""
        att = ad.attention(self.q(v), self.k(text), self.v(text), text_mask)
        return v + self.out(att)

    # -- the whole field ----------------------------------------------------

    def forward(self, ref_feats, ref_poses, text, text_mask, targets, out_hw,
                prev: RenderOutput | None = None, rng: np.random.Generator | None = None,
                n_samples: int = N_SAMPLES, jitter: bool = False) -> RenderOutput:
        """Render target-view feature maps.

        ref_feats: (B, N, C, h, w); ref_poses: B lists of N cameras the
        features are registered to; text: (B, L, D) with key mask (B, L);
        targets: B cameras; out_hw: (H, W) rays, one per cell.
        ``prev`` supplies earlier compositing weights for importance sampling.
        """
        B, N, C, h, w = ref_feats.shape
        H, W = out_hw
        dtype = ref_feats.dtype
        R = H * W
        depths_all, deltas_all, coords, behind, pv_all, dv_all, rel_all = [], [], [], [], [], [], []
        for b in range(B):
            tgt = targets[b]
            o, d = grid_rays(tgt, H, W)
            if prev is not None:
                depths, deltas = importance_resample(
                    prev.weights[b].detach().cpu().numpy(), prev.depths[b], tgt.far, n_samples,
                    rng if jitter else None, near=tgt.near)
            else:
                depths = stratified_depths(tgt.near, tgt.far, n_samples, R, rng if jitter else None)
                deltas = deltas_from_depths(depths, tgt.far)
            depths_all.append(depths)
            deltas_all.append(deltas)
            pts = (o[:, None, :] + depths[..., None] * d[:, None, :]).reshape(-1, 3)
            dirs = np.repeat(d, n_samples, axis=0)
            for pose in ref_poses[b]:
                pv = pts @ pose.R.T + pose.t
                dv = dirs @ pose.R.T
                z = pv[:, 2]
                front = z > 1e-9
                zs = np.where(front, z, 1.0)
                u = pose.fx * pv[:, 0] / zs + pose.cx
                v = pose.fy * pv[:, 1] / zs + pose.cy
                sx, sy = pose.width / w, pose.height / h
                coords.append(np.stack([u / sx - 0.5, v / sy - 0.5], -1))
                behind.append(~front)
                pv_all.append(pv)
                dv_all.append(dv)
                rel_all.append(relative_pose(tgt, pose).reshape(-1))
        P = R * n_samples
        t = lambda a: torch.as_tensor(np.asarray(a), dtype=dtype)  # noqa: E731
        xy = t(np.stack(coords)).reshape(B * N, P, 2)
        sampled, oob = ad.grid_sample(ref_feats.reshape(B * N, C, h, w), xy)
        behind_t = torch.as_tensor(np.stack(behind)).reshape(B * N, P)
        oof = oob | behind_t
        dropped = oof if self.oof_policy == "exclude" else behind_t
        feats = self.point_features(sampled, t(np.stack(dv_all)), t(np.stack(pv_all)))
        feats = feats.reshape(B, N, P, C)
        vbar, _, degenerate = self.aggregate(feats, t(np.stack(rel_all)).reshape(B, N, 12), oof.reshape(B, N, P),
                                             dropped.reshape(B, N, P))
        sigma, color = self.density_color(vbar, ~degenerate)
        vhat = self.text_update(vbar, text, text_mask)

        depths = np.stack(depths_all)
        deltas = np.stack(deltas_all)
        sigma = sigma.reshape(B, R, n_samples)
        feat, rgb, opacity, weights = render_ray(
            deltas, sigma, vhat.reshape(B, R, n_samples, C), color.reshape(B, R, n_samples, 3))
        return RenderOutput(
            feature=feat.transpose(1, 2).reshape(B, C, H, W),
            rgb=rgb.transpose(1, 2).reshape(B, 3, H, W),
            opacity=opacity.reshape(B, H, W),
            weights=weights,
            sigma=sigma,
            depths=depths,
            deltas=deltas,
            degenerate=degenerate.reshape(B, R, n_samples),
        )


def render_target_featuremap(field: FeatureNeRF, refs: list[FeatureMap], text: torch.Tensor,
                             target: CameraPose, out_hw: tuple[int, int], text_mask=None,
                             prev: RenderOutput | None = None, rng=None, jitter=False,
                             n_samples: int = N_SAMPLES) -> RenderOutput:
    """Single-target convenience wrapper around ``FeatureNeRF.forward``."""
    if not refs:
        raise ValueError("render_target_featuremap: need at least one reference view")
    shapes = {tuple(r.data.shape) for r in refs}
    if len(shapes) != 1:
        raise ValueError(f"reference feature maps differ in shape: {sorted(shapes)}")
    feats = torch.stack([r.data for r in refs]).unsqueeze(0)
    if text.dim() == 2:
        text = text.unsqueeze(0)
    if text_mask is not None and text_mask.dim() == 1:
        text_mask = text_mask.unsqueeze(0)
    return field(feats, [[r.pose for r in refs]], text, text_mask, [target], out_hw,
                 prev=prev, rng=rng, jitter=jitter, n_samples=n_samples)
