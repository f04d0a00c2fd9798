"""Pinhole cameras, pose normalization and ray sampling.

Conventions used throughout the package:

* extrinsics are world-to-camera, ``x_cam = R @ x_world + t``;
* the camera looks down +Z, image u grows along +X, v along +Y (down);
* pixel ``(i, j)`` covers ``[i, i+1) x [j, j+1)`` so its center sits at
  ``(i + 0.5, j + 0.5)``; the principal point of an unshifted W x H camera
  is ``(W/2, H/2)``;
* the world is z-up when building look-at rigs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


class CameraError(ValueError):
    pass


@dataclass(frozen=True)
class CameraPose:
    R: np.ndarray
    t: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.1
    far: float = 4.0

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if not (np.isfinite(R).all() and np.isfinite(t).all()):
            raise CameraError("pose has non-finite entries")
        if not (0 < self.near < self.far):
            raise CameraError(f"need 0 < near < far, got near={self.near}, far={self.far}")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-5 or abs(np.linalg.det(R) - 1) > 1e-5:
            raise CameraError("rotation is not a proper orthonormal matrix")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def extrinsics(self) -> np.ndarray:
        """4x4 world-to-camera matrix."""
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    def to_dict(self) -> dict:
        return {
            "R": self.R.reshape(-1).tolist(),
            "t": self.t.tolist(),
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "near": self.near,
            "far": self.far,
        }

    @classmethod
    def from_dict(cls, d: dict, width: int | None = None, height: int | None = None) -> "CameraPose":
        return cls(
            R=np.asarray(d["R"], dtype=np.float64).reshape(3, 3),
            t=np.asarray(d["t"], dtype=np.float64),
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d.get("width", width)),
            height=int(d.get("height", height)),
            near=float(d["near"]),
            far=float(d["far"]),
        )


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    def point_at(self, depth):
        return self.origin + np.multiply.outer(depth, self.direction)


@dataclass(frozen=True)
class RaySamples:
    depths: np.ndarray
    deltas: np.ndarray
    points: np.ndarray
    near: float = field(default=0.0)
    far: float = field(default=1.0)


def look_at(center, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera (R, t) for a camera at ``center`` aimed at ``target``."""
    center = np.asarray(center, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - center
    dist = np.linalg.norm(fwd)
    if not np.isfinite(dist) or dist < 1e-9:
        raise CameraError("look_at: camera center coincides with the target")
    fwd /= dist
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    n = np.linalg.norm(right)
    if n < 1e-9:
        raise CameraError("look_at: viewing direction parallel to up vector")
    right /= n
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return R, -R @ center


def spherical_center(azimuth_deg: float, elevation_deg: float, radius: float) -> np.ndarray:
    az, el = np.radians(azimuth_deg), np.radians(elevation_deg)
    return radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])


def orbit_pose(azimuth_deg, elevation_deg, radius, width=64, height=64, focal=None,
               near=None, far=None, target=(0.0, 0.0, 0.0)) -> CameraPose:
    """Camera on a sphere around ``target`` looking at it (world frame)."""
    focal = 1.1 * width if focal is None else focal
    c = spherical_center(azimuth_deg, elevation_deg, radius) + np.asarray(target, dtype=np.float64)
    R, t = look_at(c, target)
    near = max(radius - 1.0, 0.05) if near is None else near
    far = radius + 1.0 if far is None else far
    return CameraPose(R, t, focal, focal, width / 2, height / 2, width, height, near, far)


def azimuth_of(pose: CameraPose, origin=(0.0, 0.0, 0.0)) -> float:
    c = pose.center - np.asarray(origin)
    return float(np.degrees(np.arctan2(c[1], c[0])) % 360.0)


def pose_normalization(poses: list[CameraPose]) -> tuple[np.ndarray, float]:
    """``(shift, scale)`` with ``p_normalized = (p_world - shift) * scale``.

    The shift is the mean camera center; the scale puts the first camera at
    unit distance from it.
    """
    if not poses:
        raise CameraError("normalize_poses: empty pose list")
    centers = np.stack([p.center for p in poses])
    shift = centers.mean(axis=0)
    d = np.linalg.norm(centers[0] - shift)
    if d < 1e-9:
        raise CameraError("normalize_poses: first camera coincides with the mean center; scale undefined")
    return shift, 1.0 / d


def normalize_poses(poses: list[CameraPose]) -> list[CameraPose]:
    """Mean camera center -> origin, first camera -> unit norm.

    Rotations are untouched; near/far scale with the scene.
    """
    shift, scale = pose_normalization(poses)
    return [renormalize_pose(p, shift, scale) for p in poses]


def denormalize_pose(pose: CameraPose, shift, scale: float) -> CameraPose:
    c = pose.center / scale + np.asarray(shift)
    return replace(pose, t=-pose.R @ c, near=pose.near / scale, far=pose.far / scale)


def renormalize_pose(pose: CameraPose, shift, scale: float) -> CameraPose:
    c = (pose.center - np.asarray(shift)) * scale
    return replace(pose, t=-pose.R @ c, near=pose.near * scale, far=pose.far * scale)


def project(pose: CameraPose, p) -> tuple[np.ndarray, float, bool]:
    X, Y, Z = pose.R @ np.asarray(p, dtype=np.float64) + pose.t
    if abs(Z) < 1e-9:
        raise CameraError("project: point lies on the camera plane (Z == 0)")
    pix = np.array([pose.fx * X / Z + pose.cx, pose.fy * Y / Z + pose.cy])
    return pix, float(Z), bool(Z > 0)


def unproject(pose: CameraPose, pixel, depth: float) -> np.ndarray:
    u, v = pixel
    x_cam = np.array([(u - pose.cx) / pose.fx * depth, (v - pose.cy) / pose.fy * depth, depth])
    return pose.R.T @ (x_cam - pose.t)


def pixel_ray(pose: CameraPose, u: float, v: float) -> Ray:
    d = pose.R.T @ np.array([(u - pose.cx) / pose.fx, (v - pose.cy) / pose.fy, 1.0])
    return Ray(pose.center, d / np.linalg.norm(d), pose.near, pose.far)


def pixel_rays(pose: CameraPose, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ``pixel_ray``: origins and unit directions, shape (..., 3)."""
    u, v = np.broadcast_arrays(np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64))
    cam = np.stack([(u - pose.cx) / pose.fx, (v - pose.cy) / pose.fy, np.ones_like(u)], axis=-1)
    d = cam @ pose.R
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return np.broadcast_to(pose.center, d.shape).copy(), d


def grid_rays(pose: CameraPose, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """One ray per cell of an h x w grid registered to the image plane.

    Cell (i, j) covers a pixel block of size (width/w, height/h) and the ray
    passes through the block center. Returns arrays of shape (h*w, 3).
    """
    sx, sy = pose.width / w, pose.height / h
    u = (np.arange(w) + 0.5) * sx
    v = (np.arange(h) + 0.5) * sy
    uu, vv = np.meshgrid(u, v)
    o, d = pixel_rays(pose, uu.reshape(-1), vv.reshape(-1))
    return o, d


def to_view_space(pose: CameraPose, p, d) -> tuple[np.ndarray, np.ndarray]:
    d = np.asarray(d, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1) > 1e-6:
        raise CameraError("to_view_space: direction must be unit length")
    return pose.R @ np.asarray(p, dtype=np.float64) + pose.t, pose.R @ d


def crop_intrinsics(pose: CameraPose, x0: float, y0: float, w: float, h: float,
                    out_w: int, out_h: int) -> CameraPose:
    """Camera of the image obtained by cropping [x0, x0+w) x [y0, y0+h) and resizing."""
    if w <= 0 or h <= 0:
        raise CameraError("crop_intrinsics: zero-size crop")
    if x0 < 0 or y0 < 0 or x0 + w > pose.width + 1e-9 or y0 + h > pose.height + 1e-9:
        raise CameraError(
            f"crop_intrinsics: crop ({x0}, {y0}, {w}, {h}) outside {pose.width}x{pose.height} image"
        )
    sx, sy = out_w / w, out_h / h
    return replace(
        pose,
        fx=pose.fx * sx,
        fy=pose.fy * sy,
        cx=(pose.cx - x0) * sx,
        cy=(pose.cy - y0) * sy,
        width=int(out_w),
        height=int(out_h),
    )


def rescale_intrinsics(pose: CameraPose, out_w: int, out_h: int) -> CameraPose:
    return crop_intrinsics(pose, 0, 0, pose.width, pose.height, out_w, out_h)


def stratified_depths(near, far, n: int, n_rays: int = 1, rng: np.random.Generator | None = None) -> np.ndarray:
    """(n_rays, n) depths, one per equal bin of [near, far]; midpoints unless ``rng``."""
    if n < 1:
        raise ValueError("need at least one sample per ray")
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (n_rays,))[:, None]
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (n_rays,))[:, None]
    frac = np.full((n_rays, n), 0.5) if rng is None else rng.random((n_rays, n))
    edges = np.arange(n)[None, :]
    return near + (far - near) * (edges + frac) / n


def deltas_from_depths(depths: np.ndarray, far) -> np.ndarray:
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), depths.shape[:-1])[..., None]
    return np.concatenate([np.diff(depths, axis=-1), far - depths[..., -1:]], axis=-1)


def stratified_samples(ray: Ray, n: int, jitter: bool = False, seed=None) -> RaySamples:
    rng = np.random.default_rng(seed) if jitter else None
    depths = stratified_depths(ray.near, ray.far, n, 1, rng)[0]
    return RaySamples(depths, deltas_from_depths(depths, ray.far), ray.point_at(depths), ray.near, ray.far)


def relative_pose(target: CameraPose, ref: CameraPose) -> np.ndarray:
    """Top 3x4 of target_extrinsics @ inv(ref_extrinsics)."""
    return (target.extrinsics() @ np.linalg.inv(ref.extrinsics()))[:3]


def rotate_about_z(pose: CameraPose, degrees: float, origin=(0.0, 0.0, 0.0)) -> CameraPose:
    """Orbit the camera rigidly by ``degrees`` of azimuth around a vertical axis."""
    a = np.radians(degrees)
    Rz = np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1.0]])
    o = np.asarray(origin, dtype=np.float64)
    c = Rz @ (pose.center - o) + o
    R = pose.R @ Rz.T
    return replace(pose, R=R, t=-R @ c)


def perturb_pose(pose: CameraPose, rng: np.random.Generator, center_frac: float = 0.1,
                 focal_range: tuple[float, float] = (0.9, 1.1), target=(0.0, 0.0, 0.0)) -> CameraPose:
    """Jitter the camera center (<= center_frac of its norm) and focal length, re-aim at target."""
    c = pose.center
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    c = c + direction * rng.uniform(0, center_frac) * np.linalg.norm(c)
    s = rng.uniform(*focal_range)
    R, t = look_at(c, target)
    return replace(pose, R=R, t=t, fx=pose.fx * s, fy=pose.fy * s)
