"""Capture-rig geometry: LED array, LCD mask plane, pinhole camera, valid volume.

Conventions used throughout the package:

* World units are meters, arrays are float64.
* A ``Pose`` maps local to world coordinates: ``x_w = R @ x_l + t``.
* Camera model is an undistorted pinhole with +z forward. Continuous pixel
  coordinates ``(u, v)`` put the center of integer pixel ``(i, j)`` (i = column,
  j = row) at ``(i + 0.5, j + 0.5)``; the principal point is ``(cx, cy)``.
* The mask is the local z = 0 plane of ``mask_plane_pose``; its physical
  rectangle spans ``[-w/2, w/2] x [-h/2, h/2]`` in local x/y and maps to
  continuous mask pixel coordinates ``[0, mask_res_w] x [0, mask_res_h]``.
* LEDs sit on a regular grid in the local z = 0 plane of ``led_plane_pose``
  and emit toward local +z.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

__all__ = [
    "Pose",
    "RigGeometry",
    "LedModel",
    "PixelRay",
    "camera_ray",
    "depth_range",
    "depth_range_batch",
    "mask_hit",
    "mask_hit_batch",
    "pixel_grid_rays",
    "look_at",
    "default_rig",
    "desk_rig",
]


@dataclass(frozen=True)
class Pose:
    """Rigid transform, local -> world: ``x_w = rotation @ x_l + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9):
            raise DomainError("pose rotation is not orthonormal")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors) @ self.rotation.T

    def inverse_apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.translation) @ self.rotation

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> Pose:
    """Pose whose local +z axis points from ``eye`` toward ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    nf = np.linalg.norm(f)
    if nf < 1e-12:
        raise DomainError("look_at: eye and target coincide")
    f = f / nf
    x = np.cross(np.asarray(up, dtype=np.float64), f)
    nx = np.linalg.norm(x)
    if nx < 1e-9:  # forward parallel to up: pick another hint axis
        x = np.cross(np.array([1.0, 0.0, 0.0]), f)
        nx = np.linalg.norm(x)
    x = x / nx
    y = np.cross(f, x)
    return Pose(np.stack([x, y, f], axis=1), eye)


@dataclass(frozen=True)
class RigGeometry:
    """Static geometry of the capture rig.

    ``volume_edge`` is the full edge length of the axis-aligned valid cube
    centered at ``volume_center``; objects to scan must lie inside it.
    """

    led_rows: int = 48
    led_cols: int = 64
    led_pitch: float = 0.005
    led_plane_pose: Pose = field(default_factory=Pose.identity)
    mask_res_w: int = 1920
    mask_res_h: int = 1080
    mask_phys_w: float = 0.34
    mask_phys_h: float = 0.19
    mask_plane_pose: Pose = field(default_factory=Pose.identity)
    fx: float = 120.0
    fy: float = 120.0
    cx: float = 63.5
    cy: float = 31.5
    cam_res_w: int = 127
    cam_res_h: int = 64
    cam_pose: Pose = field(default_factory=Pose.identity)
    volume_center: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.15]))
    volume_edge: float = 0.15

    def __post_init__(self):
        object.__setattr__(
            self, "volume_center", np.asarray(self.volume_center, dtype=np.float64).reshape(3)
        )
        if self.led_rows <= 0 or self.led_cols <= 0:
            raise DomainError("led grid must be non-empty")
        if self.volume_edge <= 0:
            raise DomainError("volume_edge must be positive")
        lo, hi = self.volume_bounds()
        cam = self.camera_center()
        if np.all(cam >= lo) and np.all(cam <= hi):
            raise DomainError("camera center lies inside the valid volume")
        if not np.all(np.isfinite(self.led_positions())):
            raise DomainError("non-finite LED position")

    @property
    def n_led(self) -> int:
        return self.led_rows * self.led_cols

    def camera_center(self) -> np.ndarray:
        return self.cam_pose.translation

    def volume_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        half = 0.5 * self.volume_edge
        return self.volume_center - half, self.volume_center + half

    def led_positions(self) -> np.ndarray:
        """World centers of all LEDs, shape (led_rows * led_cols, 3), row-major."""
        r = np.arange(self.led_rows) - (self.led_rows - 1) / 2.0
        c = np.arange(self.led_cols) - (self.led_cols - 1) / 2.0
        cc, rr = np.meshgrid(c, r)
        local = np.stack(
            [cc.ravel() * self.led_pitch, rr.ravel() * self.led_pitch, np.zeros(self.n_led)],
            axis=1,
        )
        return self.led_plane_pose.apply(local)

    def led_normal(self) -> np.ndarray:
        return self.led_plane_pose.rotation[:, 2]

    def mask_normal(self) -> np.ndarray:
        return self.mask_plane_pose.rotation[:, 2]

    def fingerprint(self) -> str:
        """Stable short hash of all rig parameters (used to tag artifacts)."""
        import hashlib

        parts = [
            self.led_rows, self.led_cols, round(self.led_pitch, 12),
            self.mask_res_w, self.mask_res_h,
            round(self.mask_phys_w, 12), round(self.mask_phys_h, 12),
            round(self.fx, 9), round(self.fy, 9), round(self.cx, 9), round(self.cy, 9),
            self.cam_res_w, self.cam_res_h, round(self.volume_edge, 12),
        ]
        for pose in (self.led_plane_pose, self.mask_plane_pose, self.cam_pose):
            parts.extend(np.round(pose.rotation, 12).ravel().tolist())
            parts.extend(np.round(pose.translation, 12).tolist())
        parts.extend(np.round(self.volume_center, 12).tolist())
        blob = ",".join(repr(p) for p in parts).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class LedModel:
    """Area-emission model of one LED.

    The emitting square has half-width ``emit_half_w``; its area integral is
    discretized at a 5x5 grid of sample points weighted by ``kernel`` (which
    must sum to 1). The angular falloff is ``(cos theta)^angular_exponent``
    against the LED plane normal, zero behind the plane.
    """

    emit_half_w: float = 0.001
    kernel: np.ndarray = field(default_factory=lambda: np.full((5, 5), 1.0 / 25.0))
    angular_exponent: float = 1.0

    def __post_init__(self):
        k = np.asarray(self.kernel, dtype=np.float64)
        if k.shape != (5, 5):
            raise DomainError("LED kernel must be 5x5")
        if np.any(k < 0) or abs(k.sum() - 1.0) > 1e-9:
            raise DomainError("LED kernel must be non-negative and sum to 1")
        if self.angular_exponent < 0:
            raise DomainError("angular_exponent must be >= 0")
        object.__setattr__(self, "kernel", k)

    def sample_offsets(self) -> np.ndarray:
        """Local (x, y) offsets of the 25 area samples, shape (25, 2)."""
        g = np.linspace(-self.emit_half_w, self.emit_half_w, 5)
        ox, oy = np.meshgrid(g, g)
        return np.stack([ox.ravel(), oy.ravel()], axis=1)

    def angular_falloff(self, cos_theta: np.ndarray) -> np.ndarray:
        """Psi evaluated at the cosine between emission direction and plane normal."""
        c = np.clip(cos_theta, 0.0, 1.0)
        if self.angular_exponent == 0.0:
            return np.where(np.asarray(cos_theta) > 0.0, 1.0, 0.0)
        return c**self.angular_exponent


@dataclass
class PixelRay:
    """Camera ray through one pixel, with its valid-volume depth interval."""

    origin: np.ndarray
    direction: np.ndarray
    pixel: tuple[float, float]
    z_min: float = np.nan
    z_max: float = np.nan

    def point_at(self, depth: float) -> np.ndarray:
        return self.origin + depth * self.direction

    @property
    def has_interval(self) -> bool:
        return np.isfinite(self.z_min) and np.isfinite(self.z_max)


def camera_ray(geom: RigGeometry, px) -> PixelRay:
    """World-frame ray from the camera center through continuous pixel coords ``px``.

    Raises ``DomainError`` when ``px`` lies outside the image rectangle.
    """
    u, v = float(px[0]), float(px[1])
    if not (0.0 <= u <= geom.cam_res_w and 0.0 <= v <= geom.cam_res_h):
        raise DomainError(f"pixel {px} outside image bounds "
                          f"{geom.cam_res_w}x{geom.cam_res_h}")
    d_cam = np.array([(u - geom.cx) / geom.fx, (v - geom.cy) / geom.fy, 1.0])
    d = geom.cam_pose.rotate(d_cam)
    d = d / np.linalg.norm(d)
    return PixelRay(origin=geom.camera_center().copy(), direction=d, pixel=(u, v))


def depth_range(geom: RigGeometry, ray: PixelRay):
    """Intersect ``ray`` with the valid-volume cube (slab test).

    Returns ``(z_min, z_max)`` measured along the ray, or ``None`` on a miss.
    """
    interval = depth_range_batch(geom, ray.origin[None, :], ray.direction[None, :])
    z0, z1 = interval[0]
    if not np.isfinite(z0):
        return None
    return float(z0), float(z1)


def depth_range_batch(geom: RigGeometry, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Vectorized slab test; returns (N, 2) with NaN rows for misses."""
    lo, hi = geom.volume_bounds()
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (lo - origins) / dirs
        t1 = (hi - origins) / dirs
    # Parallel-to-slab rays: inside the slab -> (-inf, inf); outside -> empty.
    parallel = dirs == 0.0
    inside = (origins >= lo) & (origins <= hi)
    near = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t0, t1))
    far = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t0, t1))
    t_near = near.max(axis=1)
    t_far = far.min(axis=1)
    z_min = np.maximum(t_near, 0.0)
    hit = (t_near <= t_far) & (t_far > 0.0) & (z_min < t_far)
    out = np.full((origins.shape[0], 2), np.nan)
    out[hit, 0] = z_min[hit]
    out[hit, 1] = t_far[hit]
    return out


def mask_hit(geom: RigGeometry, x_l, x_k):
    """Continuous mask pixel coords where segment ``x_l -> x_k`` crosses the mask.

    Returns ``(u, v)`` or ``None`` when the segment misses the physical
    rectangle, runs parallel to the plane, or does not cross it.
    """
    uv = mask_hit_batch(geom, np.asarray(x_l, dtype=np.float64)[None, :],
                        np.asarray(x_k, dtype=np.float64)[None, :])
    if not np.isfinite(uv[0, 0]):
        return None
    return float(uv[0, 0]), float(uv[0, 1])


def mask_hit_batch(geom: RigGeometry, x_l: np.ndarray, x_k: np.ndarray) -> np.ndarray:
    """Vectorized segment/mask-plane intersection; NaN rows where blocked.

    Symmetric in its two endpoint arguments (the segment is undirected).
    """
    pose = geom.mask_plane_pose
    a = pose.inverse_apply(np.atleast_2d(x_l))
    b = pose.inverse_apply(np.atleast_2d(x_k))
    za, zb = a[..., 2], b[..., 2]
    den = zb - za
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -za / den
        crosses = (np.abs(den) > 1e-15) & (t >= 0.0) & (t <= 1.0)
        p = a + np.where(crosses, t, 0.0)[..., None] * (b - a)
    u = (p[..., 0] / geom.mask_phys_w + 0.5) * geom.mask_res_w
    v = (p[..., 1] / geom.mask_phys_h + 0.5) * geom.mask_res_h
    ok = crosses & (u >= 0.0) & (u <= geom.mask_res_w) & (v >= 0.0) & (v <= geom.mask_res_h)
    out = np.full(u.shape + (2,), np.nan)
    out[ok, 0] = u[ok]
    out[ok, 1] = v[ok]
    return out


def pixel_grid_rays(geom: RigGeometry):
    """Rays through all pixel centers of the camera grid.

    Returns ``(origins (H,W,3), dirs (H,W,3), z (H,W,2))`` where z rows are
    NaN for pixels whose ray misses the valid volume.
    """
    H, W = geom.cam_res_h, geom.cam_res_w
    i = np.arange(W) + 0.5
    j = np.arange(H) + 0.5
    uu, vv = np.meshgrid(i, j)
    d_cam = np.stack(
        [(uu - geom.cx) / geom.fx, (vv - geom.cy) / geom.fy, np.ones_like(uu)], axis=-1
    )
    d = d_cam @ geom.cam_pose.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(geom.camera_center(), d.shape).copy()
    z = depth_range_batch(geom, o.reshape(-1, 3), d.reshape(-1, 3)).reshape(H, W, 2)
    return o, d, z


def default_rig() -> RigGeometry:
    """Full-size default layout: mask at the origin facing +z, valid volume
    15 cm in front of it, LED plane 5 cm behind the mask, camera above the
    mask pitched at the volume center."""
    volume_center = np.array([0.0, 0.0, 0.15])
    cam_eye = np.array([0.0, 0.24, 0.0])
    dist = np.linalg.norm(volume_center - cam_eye)
    f_px = 32.0 * dist / (0.075 * np.sqrt(3.0) * 1.15)
    return RigGeometry(
        led_plane_pose=Pose(np.eye(3), np.array([0.0, 0.0, -0.05])),
        mask_plane_pose=Pose.identity(),
        fx=f_px,
        fy=f_px,
        cx=63.5,
        cy=31.5,
        cam_pose=look_at(cam_eye, volume_center),
        volume_center=volume_center,
        volume_edge=0.15,
    )


def desk_rig(
    cam_res: int = 16,
    mask_res: int = 128,
    led_rows: int = 2,
    led_cols: int = 2,
) -> RigGeometry:
    """Small rig for tests and CPU-budget runs: few LEDs on a wide baseline,
    a compact mask, and a low-resolution camera framing the whole volume."""
    volume_center = np.array([0.0, 0.0, 0.15])
    cam_eye = np.array([0.0, 0.24, 0.0])
    dist = np.linalg.norm(volume_center - cam_eye)
    f_px = (cam_res / 2.0) * dist / (0.075 * np.sqrt(3.0) * 1.15)
    return RigGeometry(
        led_rows=led_rows,
        led_cols=led_cols,
        led_pitch=0.10 / max(max(led_rows, led_cols) - 1, 1),
        led_plane_pose=Pose(np.eye(3), np.array([0.0, 0.0, -0.15])),
        mask_res_w=mask_res,
        mask_res_h=mask_res,
        mask_phys_w=0.16,
        mask_phys_h=0.16,
        mask_plane_pose=Pose.identity(),
        fx=f_px,
        fy=f_px,
        cx=cam_res / 2.0,
        cy=cam_res / 2.0,
        cam_res_w=cam_res,
        cam_res_h=cam_res,
        cam_pose=look_at(cam_eye, volume_center),
        volume_center=volume_center,
        volume_edge=0.15,
    )
