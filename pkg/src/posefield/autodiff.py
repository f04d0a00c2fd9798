"""Differentiable tensor substrate.

Everything trainable in the package runs on ``torch.Tensor`` with torch's
reverse-mode autograd as the tape. This module adds what torch does not hand
us directly:

* a named catalog of primitives with shape diagnostics and the subgradient
  conventions the rest of the code relies on (relu kink -> 0, min/max ties
  -> first argument),
* border-clamped bilinear sampling of feature maps with an out-of-bounds flag,
* a central-difference gradient checker that runs in float64,
* the on-disk checkpoint container (JSON manifest + raw float32 blobs).
"""

from __future__ import annotations

import contextlib
import json
import math
import os
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch.overrides import TorchFunctionMode

Tensor = torch.Tensor


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, primitive: str):
        super().__init__(f"non-finite value produced by primitive '{primitive}'")
        self.primitive = primitive


def configure_threads(default: int | None = None) -> int:
    """Cap torch's intra-op threads from POSEFIELD_THREADS."""
    n = os.environ.get("POSEFIELD_THREADS")
    n = int(n) if n else default
    if n:
        torch.set_num_threads(max(1, n))
    return torch.get_num_threads()


@contextlib.contextmanager
def precision(dtype: torch.dtype = torch.float64):
    """Temporarily switch the default floating dtype (float64 for checks)."""
    old = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.set_default_dtype(old)


# ---------------------------------------------------------------------------
# primitives


def _broadcast_check(name: str, a: Tensor, b: Tensor) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(
            f"{name}: shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast"
        ) from None


def add(a, b):
    _broadcast_check("add", a, b)
    return a + b


def sub(a, b):
    _broadcast_check("sub", a, b)
    return a - b


def mul(a, b):
    _broadcast_check("mul", a, b)
    return a * b


def div(a, b):
    _broadcast_check("div", a, b)
    return a / b


def matmul(a, b):
    if a.dim() < 1 or b.dim() < 1:
        raise ShapeError(f"matmul: scalar operand {tuple(a.shape)} @ {tuple(b.shape)}")
    k_a = a.shape[-1]
    k_b = b.shape[-2] if b.dim() > 1 else b.shape[0]
    if k_a != k_b:
        raise ShapeError(
            f"matmul: inner dimensions differ, {tuple(a.shape)} @ {tuple(b.shape)}"
        )
    return a @ b


def power(a, p):
    return torch.pow(a, p)


def summ(a, dim=None, keepdim=False):
    return a.sum() if dim is None else a.sum(dim=dim, keepdim=keepdim)


def mean(a, dim=None, keepdim=False):
    return a.mean() if dim is None else a.mean(dim=dim, keepdim=keepdim)


def broadcast(a, shape):
    try:
        return a.expand(*shape)
    except RuntimeError:
        raise ShapeError(f"broadcast: {tuple(a.shape)} cannot expand to {tuple(shape)}") from None


def concatenate(tensors: Sequence[Tensor], dim: int = -1):
    shapes = [tuple(t.shape) for t in tensors]
    ref = list(shapes[0])
    for s in shapes[1:]:
        if len(s) != len(ref) or any(
            x != y for i, (x, y) in enumerate(zip(s, ref)) if i != dim % len(ref)
        ):
            raise ShapeError(f"concatenate: incompatible shapes {shapes[0]} and {s}")
    return torch.cat(list(tensors), dim=dim)


def slice_(a, dim, start, stop):
    return a.narrow(dim, start, stop - start)


def reshape(a, shape):
    if math.prod(shape) != a.numel() and -1 not in shape:
        raise ShapeError(f"reshape: {tuple(a.shape)} has {a.numel()} elements, target {tuple(shape)}")
    return a.reshape(*shape)


def transpose(a, d0=-2, d1=-1):
    return a.transpose(d0, d1)


def softmax(a, dim=-1):
    return torch.softmax(a, dim=dim)


def layer_norm(a, weight=None, bias=None, eps=1e-5):
    return F.layer_norm(a, a.shape[-1:], weight, bias, eps)


def attention(q: Tensor, k: Tensor, v: Tensor, key_mask: Tensor | None = None) -> Tensor:
    """Single-head scaled dot-product attention over the second-to-last axis.

    ``key_mask`` (broadcastable to the score shape's last axis) is True for
    keys that may be attended to.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: query {tuple(q.shape)} vs key {tuple(k.shape)}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: key {tuple(k.shape)} vs value {tuple(v.shape)}")
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask.unsqueeze(-2), -1e9)
    return torch.softmax(scores, dim=-1) @ v


class _Minimum(torch.autograd.Function):
    @staticmethod
    def forward(ctx, a, b):
        take_a = a <= b
        ctx.save_for_backward(take_a)
        return torch.where(take_a, a, b)

    @staticmethod
    def backward(ctx, g):
        (take_a,) = ctx.saved_tensors
        return g * take_a, g * ~take_a


class _Maximum(torch.autograd.Function):
    @staticmethod
    def forward(ctx, a, b):
        take_a = a >= b
        ctx.save_for_backward(take_a)
        return torch.where(take_a, a, b)

    @staticmethod
    def backward(ctx, g):
        (take_a,) = ctx.saved_tensors
        return g * take_a, g * ~take_a


def minimum(a, b):
    """Elementwise min; on ties the whole gradient goes to ``a``."""
    _broadcast_check("minimum", a, b)
    a, b = torch.broadcast_tensors(a, b)
    return _Minimum.apply(a, b)


def maximum(a, b):
    """Elementwise max; on ties the whole gradient goes to ``a``."""
    _broadcast_check("maximum", a, b)
    a, b = torch.broadcast_tensors(a, b)
    return _Maximum.apply(a, b)


def grid_sample(fmap: Tensor, xy: Tensor) -> tuple[Tensor, Tensor]:
    """Bilinear lookup of ``fmap`` (N, C, H, W) at lattice coords ``xy`` (N, P, 2).

    ``xy[..., 0]`` runs along W and ``xy[..., 1]`` along H; integer coords hit
    stored cells exactly. Coordinates outside [0, W-1] x [0, H-1] are clamped
    to the border. Returns values (N, P, C) and an out-of-bounds mask (N, P).
    """
    if fmap.dim() != 4 or xy.dim() != 3 or xy.shape[-1] != 2 or xy.shape[0] != fmap.shape[0]:
        raise ShapeError(f"grid_sample: feature map {tuple(fmap.shape)} vs coords {tuple(xy.shape)}")
    n, c, h, w = fmap.shape
    x, y = xy[..., 0], xy[..., 1]
    oob = (x < 0) | (x > w - 1) | (y < 0) | (y > h - 1) | ~torch.isfinite(x) | ~torch.isfinite(y)
    x = torch.nan_to_num(x, nan=0.0).clamp(0, w - 1)
    y = torch.nan_to_num(y, nan=0.0).clamp(0, h - 1)
    x0 = torch.floor(x).clamp(max=max(w - 2, 0))
    y0 = torch.floor(y).clamp(max=max(h - 2, 0))
    wx = x - x0
    wy = y - y0
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    flat = fmap.reshape(n, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).unsqueeze(1).expand(n, c, -1)
        return flat.gather(2, idx)

    wx = wx.unsqueeze(1)
    wy = wy.unsqueeze(1)
    top = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bot = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    out = top * (1 - wy) + bot * wy
    return out.transpose(1, 2), oob


def _grid_sample_values(fmap, xy):
    return grid_sample(fmap, xy)[0]


_PRIMITIVES: dict[str, Callable] = OrderedDict(
    add=add,
    sub=sub,
    mul=mul,
    div=div,
    matmul=matmul,
    exp=torch.exp,
    log=torch.log,
    sqrt=torch.sqrt,
    power=power,
    sum=summ,
    mean=mean,
    broadcast=broadcast,
    concatenate=concatenate,
    slice=slice_,
    reshape=reshape,
    transpose=transpose,
    relu=torch.relu,
    softplus=F.softplus,
    sigmoid=torch.sigmoid,
    tanh=torch.tanh,
    sin=torch.sin,
    cos=torch.cos,
    softmax=softmax,
    layer_norm=layer_norm,
    attention=attention,
    grid_sample=_grid_sample_values,
    minimum=minimum,
    maximum=maximum,
)


def primitive_set() -> Mapping[str, Callable]:
    """Name -> differentiable callable for every primitive the models use."""
    return dict(_PRIMITIVES)


# ---------------------------------------------------------------------------
# gradient verification


class _FiniteGuard(TorchFunctionMode):
    """Raises NonFiniteError naming the first op that emits inf/nan."""

    def __torch_function__(self, func, types, args=(), kwargs=None):
        out = func(*args, **(kwargs or {}))
        if isinstance(out, Tensor) and out.is_floating_point():
            if not torch.isfinite(out).all():
                raise NonFiniteError(getattr(func, "__name__", str(func)))
        return out


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    h: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    ``x`` is one tensor (``f(x)``) or a sequence of tensors (``f(*x)``).
    Inputs are promoted to float64. Error per coordinate is
    |analytic - numeric| / max(1, |analytic|). With ``max_coords`` only a
    random subset of that many coordinates per tensor is probed.
    """
    single = isinstance(x, Tensor)
    xs = [x] if single else list(x)
    xs = [t.detach().to(torch.float64).clone().requires_grad_(True) for t in xs]

    def call(args):
        with _FiniteGuard():
            out = f(*args)
        if out.numel() != 1:
            raise ShapeError(f"grad_check: f must be scalar-valued, got shape {tuple(out.shape)}")
        return out.reshape(())

    analytic = torch.autograd.grad(call(xs), xs, allow_unused=True)
    analytic = [torch.zeros_like(t) if g is None else g for t, g in zip(xs, analytic)]

    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        base = [t.detach().clone() for t in xs]
        for i, t in enumerate(base):
            n = t.numel()
            coords = np.arange(n)
            if max_coords is not None and n > max_coords:
                coords = rng.choice(n, size=max_coords, replace=False)
            flat = t.view(-1)
            for j in coords:
                orig = flat[j].item()
                flat[j] = orig + h
                fp = call(base).item()
                flat[j] = orig - h
                fm = call(base).item()
                flat[j] = orig
                num = (fp - fm) / (2 * h)
                a = analytic[i].reshape(-1)[j].item()
                worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst


# ---------------------------------------------------------------------------
# checkpoint container

CKPT_FORMAT = "posefield-arrays-v1"


def save_arrays(
    directory: str | Path,
    arrays: Mapping[str, Tensor | np.ndarray],
    meta: dict | None = None,
) -> Path:
    """Write ``manifest.json`` plus one little-endian float32 blob per array."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (name, arr) in enumerate(arrays.items()):
        if isinstance(arr, Tensor):
            arr = arr.detach().cpu().numpy()
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        fname = f"{i:04d}.f32"
        (d / fname).write_bytes(a.tobytes())
        entries.append({"name": name, "shape": list(a.shape), "file": fname})
    manifest = {"format": CKPT_FORMAT, "arrays": entries, "meta": meta or {}}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return d


def load_arrays(directory: str | Path) -> tuple[OrderedDict, dict]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest.get("format") != CKPT_FORMAT:
        raise ValueError(f"{d}: not a {CKPT_FORMAT} checkpoint")
    out = OrderedDict()
    for e in manifest["arrays"]:
        raw = np.frombuffer((d / e["file"]).read_bytes(), dtype="<f4")
        out[e["name"]] = raw.reshape(e["shape"]).astype(np.float32)
    return out, manifest.get("meta", {})

