"""Synthetic multi-view objects built from signed-distance primitives.

Objects live in a z-up world inside the unit ball. ``oracle_render`` sphere
traces them with flat Lambertian shading on a white background; the same
SDF also provides the ground-truth masks used for every downstream check.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import (
    CameraPose,
    azimuth_of,
    denormalize_pose,
    orbit_pose,
    pixel_rays,
    pose_normalization,
    renormalize_pose,
)

VSTAR = "V*"
LIGHT = np.array([1.0, 1.0, 1.0]) / np.sqrt(3.0)
AMBIENT, DIFFUSE = 0.35, 0.55

PALETTE = {
    "red": (0.85, 0.15, 0.12),
    "green": (0.15, 0.65, 0.2),
    "blue": (0.15, 0.3, 0.85),
    "yellow": (0.9, 0.8, 0.1),
    "orange": (0.95, 0.5, 0.1),
    "purple": (0.55, 0.2, 0.7),
    "teal": (0.1, 0.6, 0.6),
    "brown": (0.5, 0.3, 0.15),
}
CATEGORIES = ("car", "chair", "table", "mug")


@dataclass(frozen=True)
class Part:
    kind: str  # sphere | box | cylinder
    center: tuple
    size: tuple  # sphere: (r,), box: half extents, cylinder: (r, half height)
    color: tuple
    axis: int = 2  # cylinder axis

    def sdf(self, p: np.ndarray) -> np.ndarray:
        q = p - np.asarray(self.center)
        if self.kind == "sphere":
            return np.linalg.norm(q, axis=-1) - self.size[0]
        if self.kind == "box":
            d = np.abs(q) - np.asarray(self.size)
            outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
            return outside + np.minimum(d.max(axis=-1), 0.0)
        if self.kind == "cylinder":
            radial_axes = [a for a in range(3) if a != self.axis]
            r = np.linalg.norm(q[..., radial_axes], axis=-1)
            d = np.stack([r - self.size[0], np.abs(q[..., self.axis]) - self.size[1]], axis=-1)
            outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
            return outside + np.minimum(d.max(axis=-1), 0.0)
        raise ValueError(f"unknown primitive {self.kind!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "center": list(self.center), "size": list(self.size),
                "color": list(self.color), "axis": self.axis}

    @classmethod
    def from_dict(cls, d: dict) -> "Part":
        return cls(d["kind"], tuple(d["center"]), tuple(d["size"]), tuple(d["color"]), int(d.get("axis", 2)))


@dataclass(frozen=True)
class ToyObject:
    category: str
    parts: tuple[Part, ...]
    color_name: str = ""

    def part_sdfs(self, p: np.ndarray) -> np.ndarray:
        return np.stack([part.sdf(p) for part in self.parts], axis=-1)

    def sdf(self, p: np.ndarray) -> np.ndarray:
        return self.part_sdfs(p).min(axis=-1)

    def parameter_vector(self) -> np.ndarray:
        return np.concatenate([np.r_[pt.center, pt.size, pt.color] for pt in self.parts])

    def to_dict(self) -> dict:
        return {"category": self.category, "color_name": self.color_name,
                "parts": [p.to_dict() for p in self.parts]}

    @classmethod
    def from_dict(cls, d: dict) -> "ToyObject":
        return cls(d["category"], tuple(Part.from_dict(p) for p in d["parts"]), d.get("color_name", ""))


def make_object(category: str, seed: int) -> ToyObject:
    """Random instance of a category: shape parameters and colors vary with seed."""
    rng = np.random.default_rng(seed)
    names = list(PALETTE)
    main = names[rng.integers(len(names))]
    accent = names[(names.index(main) + 1 + rng.integers(len(names) - 1)) % len(names)]
    c_main, c_acc = PALETTE[main], PALETTE[accent]
    j = lambda lo, hi: float(rng.uniform(lo, hi))  # noqa: E731

    if category == "car":
        L, W, H = j(0.5, 0.62), j(0.22, 0.3), j(0.1, 0.15)
        wr = j(0.1, 0.14)
        parts = [
            Part("box", (0.0, 0.0, 0.0), (L, W, H), c_main),
            Part("box", (j(-0.15, 0.05), 0.0, H + j(0.08, 0.12)), (L * j(0.45, 0.6), W * 0.85, j(0.08, 0.12)), c_acc),
        ]
        for sx in (-1, 1):
            for sy in (-1, 1):
                parts.append(Part("cylinder", (sx * L * 0.65, sy * (W + 0.03), -H), (wr, 0.04), (0.15, 0.15, 0.15), axis=1))
    elif category == "chair":
        s, h = j(0.3, 0.38), j(0.25, 0.35)
        parts = [
            Part("box", (0.0, 0.0, 0.0), (s, s, 0.05), c_main),
            Part("box", (-s + 0.04, 0.0, j(0.28, 0.36)), (0.04, s, j(0.25, 0.32)), c_acc),
        ]
        for sx in (-1, 1):
            for sy in (-1, 1):
                parts.append(Part("cylinder", (sx * (s - 0.05), sy * (s - 0.05), -h / 2 - 0.05), (0.035, h / 2), c_main))
    elif category == "table":
        a, b, h = j(0.5, 0.62), j(0.25, 0.35), j(0.25, 0.35)
        parts = [Part("box", (0.0, 0.0, h / 2), (a, b, 0.05), c_main)]
        for sx in (-1, 1):
            for sy in (-1, 1):
                parts.append(Part("box", (sx * (a - 0.06), sy * (b - 0.06), -0.05), (0.04, 0.04, h / 2), c_acc))
    elif category == "mug":
        r, h = j(0.25, 0.33), j(0.3, 0.4)
        parts = [
            Part("cylinder", (0.0, 0.0, 0.0), (r, h), c_main),
            Part("box", (r + 0.08, 0.0, 0.0), (0.08, 0.04, h * 0.55), c_acc),
            Part("sphere", (0.0, 0.0, h), (r * 0.5,), c_acc),
        ]
    else:
        raise ValueError(f"unknown category {category!r}; choose from {CATEGORIES}")
    return ToyObject(category, tuple(parts), main)


# ---------------------------------------------------------------------------
# rendering


def sphere_trace(obj: ToyObject, origins, dirs, near, far, eps=1e-4, max_steps=256):
    """First-hit depth per ray (inf on miss)."""
    t = np.full(origins.shape[0], float(near))
    alive = np.ones(origins.shape[0], dtype=bool)
    hit = np.zeros(origins.shape[0], dtype=bool)
    for _ in range(max_steps):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        d = obj.sdf(origins[idx] + t[idx, None] * dirs[idx])
        now_hit = d < eps
        hit[idx[now_hit]] = True
        alive[idx[now_hit]] = False
        t[idx[~now_hit]] += d[~now_hit]
        alive[idx[t[idx] > far]] = False
    t[~hit] = np.inf
    return t


def _normals(obj: ToyObject, p: np.ndarray, h=1e-4) -> np.ndarray:
    g = np.zeros_like(p)
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        g[:, a] = obj.sdf(p + e) - obj.sdf(p - e)
    return g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)


def oracle_render(obj: ToyObject, pose: CameraPose) -> tuple[np.ndarray, np.ndarray]:
    """Sphere-traced (H, W, 3) image in [0, 1] and boolean (H, W) hit mask.

    ``pose`` must be in the object's (world) frame.
    """
    W, H = pose.width, pose.height
    uu, vv = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    o, d = pixel_rays(pose, uu.reshape(-1), vv.reshape(-1))
    t = sphere_trace(obj, o, d, pose.near, pose.far)
    hit = np.isfinite(t)
    rgb = np.ones((H * W, 3))
    if hit.any():
        p = o[hit] + t[hit, None] * d[hit]
        part = obj.part_sdfs(p).argmin(axis=-1)
        colors = np.array([pt.color for pt in obj.parts])[part]
        lam = np.clip(_normals(obj, p) @ LIGHT, 0.0, None)
        rgb[hit] = colors * (AMBIENT + DIFFUSE * lam)[:, None]
    return rgb.reshape(H, W, 3), hit.reshape(H, W)


def volume_mask(obj: ToyObject, pose: CameraPose, n_samples: int = 2048, density: float = 1e4) -> np.ndarray:
    """Opacity >= 0.5 of a dense occupancy volume (sigma = density inside the SDF)."""
    W, H = pose.width, pose.height
    uu, vv = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    o, d = pixel_rays(pose, uu.reshape(-1), vv.reshape(-1))
    depths = pose.near + (pose.far - pose.near) * (np.arange(n_samples) + 0.5) / n_samples
    delta = (pose.far - pose.near) / n_samples
    optical = np.zeros(o.shape[0])
    for chunk in np.array_split(np.arange(n_samples), 16):
        p = o[:, None, :] + depths[None, chunk, None] * d[:, None, :]
        inside = obj.sdf(p) < 0
        optical += inside.sum(axis=1) * density * delta
    alpha = 1.0 - np.exp(-optical)
    return (alpha >= 0.5).reshape(H, W)


# ---------------------------------------------------------------------------
# rigs and manifests


@dataclass
class Rig:
    poses: list[CameraPose]  # normalized
    splits: list[str]
    shift: np.ndarray
    scale: float


def split_indices(n: int, n_val: int | None = None) -> list[str]:
    """Validation views spread evenly over the rig; ``None`` alternates."""
    if n_val is None:
        return ["train" if i % 2 == 0 else "val" for i in range(n)]
    val = {int(np.floor((k + 0.5) * n / n_val)) for k in range(n_val)}
    return ["val" if i in val else "train" for i in range(n)]


def make_rig(n: int, radius: float = 2.0, elevation: tuple[float, float] = (5.0, 35.0),
             seed: int = 0, n_val: int | None = None, width: int = 64, height: int = 64,
             focal: float | None = None) -> Rig:
    """Cameras evenly spread in azimuth on a sphere sector, aimed at the origin, then normalized."""
    if n < 2:
        raise ValueError("a rig needs at least two views")
    rng = np.random.default_rng(seed)
    offset = rng.uniform(0, 360.0)
    world = []
    for k in range(n):
        el = rng.uniform(*elevation) if elevation[1] > elevation[0] else elevation[0]
        world.append(orbit_pose(offset + 360.0 * k / n, el, radius, width, height, focal))
    shift, scale = pose_normalization(world)
    poses = [renormalize_pose(p, shift, scale) for p in world]
    return Rig(poses, split_indices(n, n_val), shift, scale)


@dataclass
class Entry:
    image: str
    mask: str
    pose: CameraPose
    split: str


@dataclass
class SceneManifest:
    category: str
    width: int
    height: int
    entries: list[Entry]
    object: ToyObject | None = None
    shift: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0
    root: Path = field(default_factory=Path)

    @property
    def images(self) -> list[str]:
        return [e.image for e in self.entries]

    @property
    def masks(self) -> list[str]:
        return [e.mask for e in self.entries]

    @property
    def poses(self) -> list[CameraPose]:
        return [e.pose for e in self.entries]

    def indices(self, split: str) -> list[int]:
        return [i for i, e in enumerate(self.entries) if e.split == split]

    def load_image(self, i: int) -> np.ndarray:
        return load_rgb(self.root / self.entries[i].image)

    def load_mask(self, i: int) -> np.ndarray:
        return load_mask(self.root / self.entries[i].mask)

    def world_pose(self, pose: CameraPose) -> CameraPose:
        return denormalize_pose(pose, self.shift, self.scale)

    def scene_pose(self, world_pose: CameraPose) -> CameraPose:
        return renormalize_pose(world_pose, self.shift, self.scale)

    @property
    def world_origin(self) -> np.ndarray:
        """Where the object's own origin sits in normalized coordinates."""
        return (np.zeros(3) - self.shift) * self.scale

    def azimuth(self, i: int) -> float:
        return azimuth_of(self.world_pose(self.entries[i].pose))

    def oracle(self, pose: CameraPose) -> tuple[np.ndarray, np.ndarray]:
        """Oracle render at a normalized-frame pose."""
        return oracle_render(self.object, self.world_pose(pose))

    def to_dict(self) -> dict:
        d = {
            "category": self.category,
            "width": self.width,
            "height": self.height,
            "entries": [
                {"image": e.image, "mask": e.mask, "pose": e.pose.to_dict(), "split": e.split}
                for e in self.entries
            ],
            "normalization": {"shift": np.asarray(self.shift).tolist(), "scale": self.scale},
        }
        if self.object is not None:
            d["object"] = self.object.to_dict()
        return d

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1) + "\n")
        return path

    def __eq__(self, other):
        return isinstance(other, SceneManifest) and self.to_dict() == other.to_dict()


def load_manifest(path: str | Path) -> SceneManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        d = json.loads(path.read_text())
    except OSError as e:
        raise OSError(f"cannot read scene manifest {path}: {e}") from e
    w, h = int(d["width"]), int(d["height"])
    entries = [
        Entry(e["image"], e["mask"], CameraPose.from_dict(e["pose"], w, h), e["split"]) for e in d["entries"]
    ]
    norm = d.get("normalization", {"shift": [0, 0, 0], "scale": 1.0})
    obj = ToyObject.from_dict(d["object"]) if "object" in d else None
    return SceneManifest(d["category"], w, h, entries, obj, np.asarray(norm["shift"], dtype=np.float64),
                         float(norm["scale"]), path.parent)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_rgb(path: Path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img), mode="RGB").save(path, optimize=False)


def save_mask(path: Path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(np.asarray(mask) > 0.5, 255, 0).astype(np.uint8), mode="L").save(path, optimize=False)


def load_rgb(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def load_mask(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L")) >= 128


def gen_scene(category: str, seed: int, out_dir: str | Path, views: int = 28, n_val: int | None = 8,
              radius: float = 2.0, elevation: tuple[float, float] = (5.0, 35.0),
              width: int = 64, height: int = 64) -> SceneManifest:
    """Render a posed multi-view scene of one random object and write it to disk."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create scene directory {out}: {e}") from e
    obj = make_object(category, seed)
    rig = make_rig(views, radius, elevation, seed, n_val, width, height)
    entries = []
    for i, (pose, split) in enumerate(zip(rig.poses, rig.splits)):
        rgb, mask = oracle_render(obj, denormalize_pose(pose, rig.shift, rig.scale))
        img_name, mask_name = f"view_{i:03d}.png", f"mask_{i:03d}.png"
        try:
            save_rgb(out / img_name, rgb)
            save_mask(out / mask_name, mask)
        except OSError as e:
            raise OSError(f"failed writing view {i} into {out}: {e}") from e
        entries.append(Entry(img_name, mask_name, pose, split))
    m = SceneManifest(category, width, height, entries, obj, rig.shift, rig.scale, out)
    m.save(out / "manifest.json")
    return m


@dataclass
class PoolItem:
    image: np.ndarray
    caption: str
    object: ToyObject
    mask: np.ndarray

    def __iter__(self):
        # unpacks as (image, caption)
        return iter((self.image, self.caption))


def caption_for(obj: ToyObject) -> str:
    return f"photo of a {obj.color_name} {obj.category}"


def regularization_pool(category: str, k: int, seed: int, width: int = 64, height: int = 64,
                        radius: float = 2.0, elevation: tuple[float, float] = (5.0, 35.0)) -> list[PoolItem]:
    """``k`` renders of random same-category objects with V*-free captions."""
    if k < 1:
        raise ValueError("pool size must be positive")
    out = []
    for i in range(k):
        item_seed = int(np.random.SeedSequence([seed, 7919, i]).generate_state(1)[0])
        obj = make_object(category, item_seed)
        rng = np.random.default_rng(item_seed)
        pose = orbit_pose(rng.uniform(0, 360), rng.uniform(*elevation), radius, width, height)
        rgb, mask = oracle_render(obj, pose)
        out.append(PoolItem(rgb, caption_for(obj), obj, mask))
    return out
