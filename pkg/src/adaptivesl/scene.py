"""Synthetic ground-truth scenes: procedural generation and persistence.

A scene is the simulator's stand-in for a physical object: a per-pixel depth
map (meters along each camera ray, -1 where invalid), per-pixel GGX parameter
maps, and an alpha mask. Procedural fields are defined over continuous
normalized image coordinates, so regenerating at another resolution samples
the same underlying surface.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .brdf import ALPHA_MAX, ALPHA_MIN, THETA_MAX, GgxParams
from .errors import DomainError, ParseError
from .rawio import load_raw, save_raw
from .render import view_frame
from .rig import RigGeometry, pixel_grid_rays

__all__ = ["SceneTruth", "NoiseModel", "gen_scene", "save_scene", "load_scene",
           "SCENE_KINDS"]

SCENE_KINDS = ("plane", "sphere", "wavy", "steps", "random-svbrdf")

INVALID_DEPTH = -1.0
_DEPTH_MARGIN = 2e-3  # keep generated surfaces this far inside the interval


@dataclass
class NoiseModel:
    """Measurement noise: Gaussian std as a fraction of the image max, with
    optional uniform quantization."""

    noise_level: float = 0.01
    quantize_bits: int | None = None

    def __post_init__(self):
        if self.noise_level < 0:
            raise DomainError("noise_level must be >= 0")


@dataclass
class SceneTruth:
    """Ground-truth maps at one camera resolution."""

    depth: np.ndarray         # (H, W), meters along the ray, -1 invalid
    alpha: np.ndarray         # (H, W) bool
    diffuse: np.ndarray       # (H, W, C)
    specular: np.ndarray      # (H, W, C)
    alpha_x: np.ndarray       # (H, W)
    alpha_y: np.ndarray       # (H, W)
    normal_theta: np.ndarray  # (H, W), tilt from the per-pixel view axis
    normal_phi: np.ndarray    # (H, W)
    tangent: np.ndarray       # (H, W)

    @property
    def channels(self) -> int:
        return self.diffuse.shape[2]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.depth.shape[1], self.depth.shape[0]

    def brdf_at(self, row: int, col: int) -> GgxParams:
        return GgxParams(
            diffuse_albedo=self.diffuse[row, col].copy(),
            specular_albedo=self.specular[row, col].copy(),
            alpha_x=float(self.alpha_x[row, col]),
            alpha_y=float(self.alpha_y[row, col]),
            normal_theta=float(self.normal_theta[row, col]),
            normal_phi=float(self.normal_phi[row, col]),
            tangent_angle=float(self.tangent[row, col]),
        )

    def map_dict(self) -> dict[str, np.ndarray]:
        return {
            "depth": self.depth,
            "alpha": self.alpha.astype(np.float64),
            "diffuse": self.diffuse,
            "specular": self.specular,
            "alpha_x": self.alpha_x,
            "alpha_y": self.alpha_y,
            "normal_theta": self.normal_theta,
            "normal_phi": self.normal_phi,
            "tangent": self.tangent,
        }


def _smooth_field(rng: np.random.Generator, u, v, n_waves: int = 3) -> np.ndarray:
    """Random smooth field over [0,1]^2 mapped into [0, 1]."""
    out = np.zeros_like(u)
    amp_total = 0.0
    for _ in range(n_waves):
        a = rng.uniform(0.4, 1.0)
        p = rng.uniform(0.5, 2.5)
        q = rng.uniform(0.5, 2.5)
        ph = rng.uniform(0.0, 2.0 * np.pi)
        out += a * np.sin(2.0 * np.pi * (p * u + q * v) + ph)
        amp_total += a
    return 0.5 + 0.5 * out / amp_total


def _fd_normals(points: np.ndarray, alpha: np.ndarray, frames: np.ndarray):
    """Per-pixel surface normals from central differences of the 3D points,
    expressed as (theta, phi) in the per-pixel view frame. Pixels without
    enough valid neighbors fall back to facing the camera."""
    H, W, _ = points.shape
    du = np.zeros_like(points)
    dv = np.zeros_like(points)
    du[:, 1:-1] = points[:, 2:] - points[:, :-2]
    du[:, 0] = points[:, 1] - points[:, 0]
    du[:, -1] = points[:, -1] - points[:, -2]
    dv[1:-1, :] = points[2:, :] - points[:-2, :]
    dv[0, :] = points[1, :] - points[0, :]
    dv[-1, :] = points[-1, :] - points[-2, :]
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    ok = alpha & (norm[..., 0] > 1e-12)
    n = np.where(ok[..., None], n / np.maximum(norm, 1e-12), 0.0)
    # camera-facing sign in the view frame; clamp the tilt into the box
    n_pf = np.einsum("hwij,hwi->hwj", frames, n)
    n_pf[..., 2] = np.abs(n_pf[..., 2])
    theta = np.arccos(np.clip(n_pf[..., 2], -1.0, 1.0))
    theta = np.where(ok, np.minimum(theta, THETA_MAX - 1e-3), 0.0)
    phi = np.where(ok, np.arctan2(n_pf[..., 1], n_pf[..., 0]), 0.0)
    return theta, phi


def gen_scene(kind: str, geom: RigGeometry, rng: np.random.Generator,
              channels: int = 1) -> SceneTruth:
    """Generate a procedural scene of the given kind at the rig's camera
    resolution. Raises ``DomainError`` for unknown kinds."""
    if kind not in SCENE_KINDS:
        raise DomainError(f"unknown scene kind '{kind}' (choose from {SCENE_KINDS})")
    H, W = geom.cam_res_h, geom.cam_res_w
    origins, dirs, zr = pixel_grid_rays(geom)
    z_min, z_max = zr[..., 0], zr[..., 1]
    valid = np.isfinite(z_min)

    i = (np.arange(W) + 0.5) / W
    j = (np.arange(H) + 0.5) / H
    u, v = np.meshgrid(i, j)

    d_center = float(np.linalg.norm(geom.volume_center - geom.camera_center()))
    depth = np.full((H, W), d_center)

    if kind == "plane":
        pass  # constant range surface
    elif kind == "sphere":
        radius = 0.4 * geom.volume_edge
        oc = origins - geom.volume_center
        b = np.sum(oc * dirs, axis=-1)
        c = np.sum(oc * oc, axis=-1) - radius**2
        disc = b * b - c
        hit = disc >= 0.0
        t = -b - np.sqrt(np.where(hit, disc, 0.0))
        depth = np.where(hit, t, INVALID_DEPTH)
        valid = valid & hit & (t > 0)
    elif kind in ("wavy", "steps", "random-svbrdf"):
        if kind == "steps":
            levels = 4
            ramp = np.floor(u * levels) / (levels - 1)
            depth = d_center + (ramp - 0.5) * 0.05
        else:
            amp = 0.015 if kind == "wavy" else 0.006
            ph1, ph2 = rng.uniform(0, 2 * np.pi, size=2)
            fu, fv = rng.uniform(1.0, 2.0, size=2)
            depth = d_center + amp * np.sin(2 * np.pi * fu * u + ph1) * np.cos(
                2 * np.pi * fv * v + ph2
            )

    if kind != "sphere":
        lo = np.where(valid, z_min + _DEPTH_MARGIN, 0.0)
        hi = np.where(valid, z_max - _DEPTH_MARGIN, 1.0)
        contains = valid & (lo <= hi)
        depth = np.clip(depth, lo, np.maximum(hi, lo))
        valid = contains
    else:
        valid = valid & (depth >= z_min - 1e-12) & (depth <= z_max + 1e-12)
    depth = np.where(valid, depth, INVALID_DEPTH)

    diffuse = np.stack([0.15 + 0.7 * _smooth_field(rng, u, v) for _ in range(channels)], axis=-1)
    specular = np.stack([0.05 + 0.55 * _smooth_field(rng, u, v) for _ in range(channels)], axis=-1)
    ax = ALPHA_MIN + (0.05 + 0.3 * _smooth_field(rng, u, v)) * (ALPHA_MAX - ALPHA_MIN) * 0.9
    ay = ALPHA_MIN + (0.05 + 0.3 * _smooth_field(rng, u, v)) * (ALPHA_MAX - ALPHA_MIN) * 0.9
    tangent = np.pi * 0.999 * _smooth_field(rng, u, v)

    frames = view_frame(dirs)
    if kind == "plane":
        theta = np.zeros((H, W))
        phi = np.zeros((H, W))
    elif kind == "sphere":
        pts = origins + depth[..., None] * dirs
        n_world = pts - geom.volume_center
        n_world /= np.maximum(np.linalg.norm(n_world, axis=-1, keepdims=True), 1e-12)
        n_pf = np.einsum("hwij,hwi->hwj", frames, n_world)
        theta = np.minimum(np.arccos(np.clip(n_pf[..., 2], -1, 1)), THETA_MAX - 1e-3)
        phi = np.arctan2(n_pf[..., 1], n_pf[..., 0])
        theta = np.where(valid, theta, 0.0)
        phi = np.where(valid, phi, 0.0)
    else:
        pts = origins + np.where(valid, depth, d_center)[..., None] * dirs
        theta, phi = _fd_normals(pts, valid, frames)

    return SceneTruth(
        depth=depth,
        alpha=valid,
        diffuse=np.where(valid[..., None], diffuse, 0.0),
        specular=np.where(valid[..., None], specular, 0.0),
        alpha_x=np.where(valid, ax, ALPHA_MIN),
        alpha_y=np.where(valid, ay, ALPHA_MIN),
        normal_theta=theta,
        normal_phi=phi,
        tangent=np.where(valid, tangent, 0.0),
    )


def save_scene(directory, scene: SceneTruth, geom: RigGeometry | None = None) -> None:
    """Write a scene as one raw float32 blob per map plus ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    maps = []
    for name, arr in scene.map_dict().items():
        fname = f"{name}.f32"
        save_raw(d / fname, arr)
        maps.append({"name": name, "file": fname, "shape": list(arr.shape)})
    manifest = {
        "version": 1,
        "resolution": list(scene.resolution),
        "channels": scene.channels,
        "maps": maps,
        "rig_hash": geom.fingerprint() if geom is not None else None,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_scene(directory) -> SceneTruth:
    """Inverse of ``save_scene``; raises ``ParseError`` on any inconsistency."""
    d = Path(directory)
    mf = d / "manifest.json"
    if not mf.exists():
        raise ParseError(f"missing manifest {mf}")
    try:
        manifest = json.loads(mf.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"bad manifest: {e}") from e
    if manifest.get("version") != 1:
        raise ParseError(f"unsupported scene version {manifest.get('version')}")
    W, H = manifest["resolution"]
    arrays = {}
    for entry in manifest["maps"]:
        arr, _ = load_raw(d / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise ParseError(f"map {entry['name']}: shape {arr.shape} != manifest {entry['shape']}")
        if arr.shape[0] != H or arr.shape[1] != W:
            raise ParseError(f"map {entry['name']}: resolution mismatch with manifest")
        arrays[entry["name"]] = arr
    required = {"depth", "alpha", "diffuse", "specular", "alpha_x", "alpha_y",
                "normal_theta", "normal_phi", "tangent"}
    missing = required - arrays.keys()
    if missing:
        raise ParseError(f"manifest lacks maps: {sorted(missing)}")
    return SceneTruth(
        depth=arrays["depth"],
        alpha=arrays["alpha"] > 0.5,
        diffuse=arrays["diffuse"],
        specular=arrays["specular"],
        alpha_x=arrays["alpha_x"],
        alpha_y=arrays["alpha_y"],
        normal_theta=arrays["normal_theta"],
        normal_phi=arrays["normal_phi"],
        tangent=arrays["tangent"],
    )
