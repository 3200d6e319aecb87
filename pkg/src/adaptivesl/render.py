"""Forward image formation and its analytic derivatives.

A pixel measurement under one light/mask pattern pair is

    I_c = sum_l  shade_c(l) * g(l) * light(l, c) * T(l)

where ``shade = f_ggx * (n.wi)+`` couples the candidate reflectance with the
surface cosine, ``g = (cos_led)+ * Psi(cos_led) / r^2`` is the LED-side
geometry (form-factor cosine, angular falloff, inverse square), ``light`` is
the LED intensity in the pattern, and ``T`` is the kernel-weighted mask
transmittance along the 25 area samples of that LED, looked up bilinearly
with zero outside the mask rectangle.

The measurement is linear in the light pattern and in the mask pattern;
``measurement_grad_patterns`` returns those exact cofactors. The batched
``Renderer`` paths below are the same arithmetic broadcast over pixels and
candidates, and also provide depth/BRDF derivatives for fine-tuning.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import brdf as _brdf
from .brdf import Candidate, GgxParams, ggx_shade, ggx_shade_vjp, shading_frame, shading_frame_vjp
from .errors import DomainError
from .patterns import PatternPair
from .rig import LedModel, PixelRay, RigGeometry

__all__ = [
    "Renderer",
    "Footprint",
    "eval_ggx",
    "simulate_measurement",
    "measurement_grad_patterns",
    "render_scene",
    "view_frame",
]

eval_ggx = _brdf.eval_ggx  # re-export: contract surface of this module


def view_frame(direction: np.ndarray) -> np.ndarray:
    """Per-pixel orthonormal frame (columns x, y, z) with z pointing from the
    surface toward the camera, i.e. z = -ray direction. Deterministic in the
    ray alone."""
    d = np.asarray(direction, dtype=np.float64)
    z = -d
    ref = np.zeros_like(z)
    use_y = np.abs(z[..., 0]) > 0.9
    ref[..., 0] = np.where(use_y, 0.0, 1.0)
    ref[..., 1] = np.where(use_y, 1.0, 0.0)
    x = ref - z * np.sum(ref * z, axis=-1, keepdims=True)
    x /= np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-14)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=-1)


@dataclass
class Footprint:
    """Bilinear mask-lookup data for every (point, LED, area sample).

    ``idx``/``w`` hold the four corner indices into the flattened mask and
    their kernel-premultiplied weights (zeroed outside the rectangle). The
    optional fields carry what the depth derivative of the lookup needs.
    """

    idx: np.ndarray
    w: np.ndarray
    dw_du: np.ndarray | None = None
    dw_dv: np.ndarray | None = None
    du_dz: np.ndarray | None = None
    dv_dz: np.ndarray | None = None


class Renderer:
    """Batched evaluator for one rig + LED model. All public array methods
    broadcast over arbitrary leading point dimensions."""

    def __init__(self, geom: RigGeometry, led: LedModel):
        self.geom = geom
        self.led = led
        self.led_pos = geom.led_positions()  # (L, 3)
        self.led_n = geom.led_normal()
        offs = led.sample_offsets()  # (25, 2)
        R = geom.led_plane_pose.rotation
        world_offs = offs @ np.stack([R[:, 0], R[:, 1]]).reshape(2, 3)
        self.samples = self.led_pos[:, None, :] + world_offs[None, :, :]  # (L, 25, 3)
        self.kernel = led.kernel.ravel()
        # mask-frame coordinates of the LED samples are capture-constant
        self._samp_m = geom.mask_plane_pose.inverse_apply(self.samples)
        self._mask_R = geom.mask_plane_pose.rotation
        self._mask_t = geom.mask_plane_pose.translation

    @property
    def n_led(self) -> int:
        return self.led_pos.shape[0]

    # ---------------------------------------------------------------- mask

    def footprint(self, x_k: np.ndarray, dirs: np.ndarray | None = None) -> Footprint:
        """Mask-lookup corners/weights for points ``x_k`` (..., 3).

        With ``dirs`` given (the ray directions of each point), also returns
        the derivative data of the lookup coordinates w.r.t. depth along the
        ray.
        """
        geom = self.geom
        x_k = np.asarray(x_k, dtype=np.float64)
        b = (x_k - self._mask_t) @ self._mask_R  # mask-frame scene points (..., 3)
        a = self._samp_m  # (L, 25, 3)
        za = a[..., 2]
        zb = b[..., 2][..., None, None]
        den = zb - za
        safe = np.abs(den) > 1e-15
        den_s = np.where(safe, den, 1.0)
        t = -za / den_s
        crosses = safe & (t >= 0.0) & (t <= 1.0)
        px = a[..., 0] + t * (b[..., 0][..., None, None] - a[..., 0])
        py = a[..., 1] + t * (b[..., 1][..., None, None] - a[..., 1])
        u = (px / geom.mask_phys_w + 0.5) * geom.mask_res_w
        v = (py / geom.mask_phys_h + 0.5) * geom.mask_res_h
        inrect = (
            crosses
            & (u >= 0.0) & (u <= geom.mask_res_w)
            & (v >= 0.0) & (v <= geom.mask_res_h)
        )

        tu = u - 0.5
        tv = v - 0.5
        i0 = np.floor(tu)
        j0 = np.floor(tv)
        fu = tu - i0
        fv = tv - j0
        i0 = i0.astype(np.int64)
        j0 = j0.astype(np.int64)

        W, H = geom.mask_res_w, geom.mask_res_h
        ii = np.stack([i0, i0 + 1, i0, i0 + 1], axis=-1)
        jj = np.stack([j0, j0, j0 + 1, j0 + 1], axis=-1)
        bw = np.stack(
            [(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], axis=-1
        )
        ok = (
            inrect[..., None]
            & (ii >= 0) & (ii <= W - 1)
            & (jj >= 0) & (jj <= H - 1)
        )
        idx = np.where(ok, jj * W + ii, 0)
        w = np.where(ok, bw * self.kernel[None, :, None], 0.0)

        fp = Footprint(idx=idx, w=w)
        if dirs is not None:
            d_m = np.asarray(dirs, dtype=np.float64) @ self._mask_R
            # t = -za / (zb - za); dzb/dz = d_m.z
            dt_dz = (za / den_s**2) * d_m[..., 2][..., None, None]
            dt_dz = np.where(safe, dt_dz, 0.0)
            dpx_dz = dt_dz * (b[..., 0][..., None, None] - a[..., 0]) + t * d_m[..., 0][..., None, None]
            dpy_dz = dt_dz * (b[..., 1][..., None, None] - a[..., 1]) + t * d_m[..., 1][..., None, None]
            fp.du_dz = dpx_dz / geom.mask_phys_w * geom.mask_res_w
            fp.dv_dz = dpy_dz / geom.mask_phys_h * geom.mask_res_h
            dw_du = np.stack([-(1 - fv), (1 - fv), -fv, fv], axis=-1)
            dw_dv = np.stack([-(1 - fu), -fu, (1 - fu), fu], axis=-1)
            fp.dw_du = np.where(ok, dw_du * self.kernel[None, :, None], 0.0)
            fp.dw_dv = np.where(ok, dw_dv * self.kernel[None, :, None], 0.0)
        return fp

    def transmittance(self, fp: Footprint, mask_flat: np.ndarray) -> np.ndarray:
        """Kernel-weighted bilinear mask transmittance per LED: (..., L)."""
        return (fp.w * mask_flat[fp.idx]).sum(axis=(-1, -2))

    def transmittance_dz(self, fp: Footprint, mask_flat: np.ndarray) -> np.ndarray:
        """d(transmittance)/d(depth) per LED, using footprint derivative data."""
        vals = mask_flat[fp.idx]
        g_u = (fp.dw_du * vals).sum(axis=-1)
        g_v = (fp.dw_dv * vals).sum(axis=-1)
        return (g_u * fp.du_dz + g_v * fp.dv_dz).sum(axis=-1)

    # ----------------------------------------------------------------- LEDs

    def led_geometry(self, x_k: np.ndarray, dirs: np.ndarray | None = None):
        """LED-side quantities for points ``x_k`` (..., 3).

        Returns ``(wi, g)`` with ``wi`` (..., L, 3) unit directions from the
        point toward each LED center and ``g`` (..., L) the geometric weight
        ``(cos_led)+ * Psi / r^2``. With ``dirs``, additionally returns
        ``(dwi_dz, dg_dz)``.
        """
        x_k = np.asarray(x_k, dtype=np.float64)
        v = self.led_pos - x_k[..., None, :]  # (..., L, 3)
        r = np.linalg.norm(v, axis=-1)
        r = np.maximum(r, 1e-12)
        wi = v / r[..., None]
        cos_led = -(wi @ self.led_n)
        psi = self.led.angular_falloff(cos_led)
        g = np.clip(cos_led, 0.0, None) * psi / r**2
        if dirs is None:
            return wi, g
        d = np.asarray(dirs, dtype=np.float64)[..., None, :]
        dr_dz = -np.sum(wi * d, axis=-1)
        dwi_dz = (-d - wi * dr_dz[..., None]) / r[..., None]
        dcos_dz = -(dwi_dz @ self.led_n)
        p = self.led.angular_exponent
        pos = cos_led > 0.0
        cos_s = np.where(pos, cos_led, 1.0)
        # g = cos^(1+p) / r^2 on the lit side
        dg_dz = np.where(
            pos,
            (1.0 + p) * cos_s ** p / r**2 * dcos_dz - 2.0 * cos_s ** (1.0 + p) / r**3 * dr_dz,
            0.0,
        )
        return wi, g, dwi_dz, dg_dz

    # ------------------------------------------------------------- shading

    def shade(self, frames: np.ndarray, wi_world: np.ndarray, theta, phi, psi,
              alpha_x, alpha_y, spec, diff):
        """Cosine-weighted BRDF per LED and channel.

        ``frames``: (..., 3, 3) per-point view frames; ``wi_world``:
        (..., L, 3); normal angles/roughness broadcast over (...); albedos
        (..., C). Returns (..., L, C).
        """
        wi_pf = np.einsum("...ij,...li->...lj", frames, wi_world)
        n = _brdf.normal_from_angles(theta, phi)
        t, b = shading_frame(n, psi)
        wo_l = np.stack([t[..., 2], b[..., 2], n[..., 2]], axis=-1)  # wo = +z in pixel frame
        wi_l = np.stack(
            [
                np.einsum("...lj,...j->...l", wi_pf, t),
                np.einsum("...lj,...j->...l", wi_pf, b),
                np.einsum("...lj,...j->...l", wi_pf, n),
            ],
            axis=-1,
        )
        return ggx_shade(
            wi_l,
            wo_l[..., None, :],
            np.asarray(alpha_x)[..., None],
            np.asarray(alpha_y)[..., None],
            np.asarray(spec)[..., None, :],
            np.asarray(diff)[..., None, :],
        )

    # ------------------------------------------------------ scalar contract

    def point_measurement(self, pair: PatternPair, ray: PixelRay, cand: Candidate) -> np.ndarray:
        x_k = ray.point_at(cand.depth)
        frames = view_frame(ray.direction)
        wi, g = self.led_geometry(x_k)
        sh = self.shade(
            frames, wi,
            cand.brdf.normal_theta, cand.brdf.normal_phi, cand.brdf.tangent_angle,
            cand.brdf.alpha_x, cand.brdf.alpha_y,
            cand.brdf.specular_albedo, cand.brdf.diffuse_albedo,
        )
        fp = self.footprint(x_k)
        T = self.transmittance(fp, pair.mask.values.ravel())
        light = pair.light.values.reshape(self.n_led, -1)
        return np.einsum("lc,l,lc,l->c", sh, g, light, T)


@dataclass
class CandidateRenderData:
    """Pattern-independent per-candidate tensors: everything Eq-style
    measurement assembly needs except the patterns themselves."""

    shade: np.ndarray  # (..., L, C)
    g: np.ndarray      # (..., L)
    fp: Footprint      # idx/w (..., L, 25, 4)


def candidate_render_data(
    r: Renderer,
    origins: np.ndarray,
    dirs: np.ndarray,
    depths: np.ndarray,
    scalars: dict[str, np.ndarray],
    channels: int,
) -> CandidateRenderData:
    """Precompute shade/geometry/footprint for candidates on pixel rays.

    ``origins``/``dirs``: (N, 3); ``depths``: (N, K); ``scalars``: BRDF scalar
    arrays of shape (N, K) keyed as in ``GgxParams.scalars``.
    """
    x_k = origins[:, None, :] + depths[..., None] * dirs[:, None, :]
    frames = view_frame(dirs)
    wi, g = r.led_geometry(x_k)
    spec = np.stack([scalars[f"specular_{c}"] for c in range(channels)], axis=-1)
    diff = np.stack([scalars[f"diffuse_{c}"] for c in range(channels)], axis=-1)
    shade = r.shade(
        frames[:, None, :, :], wi,
        scalars["normal_theta"], scalars["normal_phi"], scalars["tangent_angle"],
        scalars["alpha_x"], scalars["alpha_y"], spec, diff,
    )
    fp = r.footprint(x_k)
    return CandidateRenderData(shade=shade, g=g, fp=fp)


def measurements_from_data(
    r: Renderer, data: CandidateRenderData, pairs
) -> np.ndarray:
    """Measurements (..., J, C) of precomputed candidates under ``pairs``."""
    lead = data.g.shape[:-1]
    J = len(pairs)
    C = data.shade.shape[-1]
    out = np.empty(lead + (J, C))
    for j, pair in enumerate(pairs):
        T = r.transmittance(data.fp, pair.mask.values.ravel())
        light = pair.light.values.reshape(r.n_led, C)
        out[..., j, :] = np.einsum("...lc,...l,lc,...l->...c", data.shade, data.g, light, T)
    return out


def simulate_candidates_batch(
    r: Renderer,
    origins: np.ndarray,
    dirs: np.ndarray,
    depths: np.ndarray,
    scalars: dict[str, np.ndarray],
    channels: int,
    pairs,
    px_chunk: int = 24,
) -> np.ndarray:
    """Chunked-over-pixels version of the above for large candidate sets;
    returns (N, K, J, C)."""
    N, K = depths.shape
    out = np.empty((N, K, len(pairs), channels))
    for a in range(0, N, px_chunk):
        b = min(a + px_chunk, N)
        sub = {k: v[a:b] for k, v in scalars.items()}
        data = candidate_render_data(r, origins[a:b], dirs[a:b], depths[a:b], sub, channels)
        out[a:b] = measurements_from_data(r, data, pairs)
    return out


def _check_depth(ray: PixelRay, depth: float):
    if not ray.has_interval:
        raise DomainError("pixel ray has no valid-volume interval")
    if not (ray.z_min - 1e-12 <= depth <= ray.z_max + 1e-12):
        raise DomainError(
            f"candidate depth {depth} outside [{ray.z_min}, {ray.z_max}]"
        )


def simulate_measurement(
    geom: RigGeometry, led: LedModel, pair: PatternPair, ray: PixelRay, cand: Candidate
) -> np.ndarray:
    """Simulated pixel intensity (one value per channel) for ``cand`` under
    ``pair``. Raises ``DomainError`` if the depth leaves the ray's interval."""
    _check_depth(ray, cand.depth)
    return Renderer(geom, led).point_measurement(pair, ray, cand)


def measurement_grad_patterns(
    geom: RigGeometry, led: LedModel, pair: PatternPair, ray: PixelRay, cand: Candidate
):
    """Exact partials of the measurement w.r.t. every light value and every
    touched mask pixel.

    Returns ``(d_light, d_mask)`` shaped (led_rows, led_cols, C) and
    (mask_res_h, mask_res_w, C): the measurement is linear in both patterns,
    so these are the cofactors of each entry.
    """
    _check_depth(ray, cand.depth)
    r = Renderer(geom, led)
    x_k = ray.point_at(cand.depth)
    frames = view_frame(ray.direction)
    wi, g = r.led_geometry(x_k)
    sh = r.shade(
        frames, wi,
        cand.brdf.normal_theta, cand.brdf.normal_phi, cand.brdf.tangent_angle,
        cand.brdf.alpha_x, cand.brdf.alpha_y,
        cand.brdf.specular_albedo, cand.brdf.diffuse_albedo,
    )
    fp = r.footprint(x_k)
    T = r.transmittance(fp, pair.mask.values.ravel())
    C = sh.shape[-1]
    light = pair.light.values.reshape(r.n_led, C)

    d_light = (sh * (g * T)[:, None]).reshape(geom.led_rows, geom.led_cols, C)
    d_mask = np.zeros((geom.mask_res_h * geom.mask_res_w, C))
    per_c = sh * (g[:, None] * light)  # (L, C): dI_c / dT_l
    contrib = fp.w[..., None] * per_c[:, None, None, :]  # (L, 25, 4, C)
    np.add.at(d_mask, fp.idx.ravel(), contrib.reshape(-1, C))
    return d_light, d_mask.reshape(geom.mask_res_h, geom.mask_res_w, C)


def render_scene(
    geom: RigGeometry,
    led: LedModel,
    pair: PatternPair,
    scene,
    noise,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Simulated camera image (H, W, C) of ``scene`` under ``pair``.

    Valid pixels get the exact forward measurement at the ground-truth depth
    and reflectance plus zero-mean Gaussian noise of standard deviation
    ``noise_level * max_signal``, clamped at zero; invalid pixels are zero.
    """
    from .scene import SceneTruth  # local import to avoid a cycle

    if not isinstance(scene, SceneTruth):
        raise DomainError("render_scene expects a SceneTruth")
    H, W = scene.depth.shape
    if (W, H) != (geom.cam_res_w, geom.cam_res_h):
        raise DomainError(
            f"scene resolution {W}x{H} does not match camera "
            f"{geom.cam_res_w}x{geom.cam_res_h}"
        )
    r = Renderer(geom, led)
    from .rig import pixel_grid_rays

    origins, dirs, zr = pixel_grid_rays(geom)
    valid = scene.alpha & np.isfinite(zr[..., 0])
    img = np.zeros((H, W, scene.channels))
    if np.any(valid):
        o = origins[valid]
        d = dirs[valid]
        x_k = o + scene.depth[valid][:, None] * d
        frames = view_frame(d)
        wi, g = r.led_geometry(x_k)
        sh = r.shade(
            frames, wi,
            scene.normal_theta[valid], scene.normal_phi[valid], scene.tangent[valid],
            scene.alpha_x[valid], scene.alpha_y[valid],
            scene.specular[valid], scene.diffuse[valid],
        )
        fp = r.footprint(x_k)
        T = r.transmittance(fp, pair.mask.values.ravel())
        light = pair.light.values.reshape(r.n_led, scene.channels)
        img[valid] = np.einsum("nlc,nl,lc,nl->nc", sh, g, light, T)

    if noise is not None and noise.noise_level > 0.0:
        if rng is None:
            raise DomainError("noise requested but no rng supplied")
        peak = float(img.max())
        if peak > 0.0:
            img = img + rng.normal(0.0, noise.noise_level * peak, size=img.shape)
            img = np.clip(img, 0.0, None)
            img[~valid] = 0.0
    if noise is not None and noise.quantize_bits:
        peak = float(img.max())
        if peak > 0.0:
            levels = 2 ** int(noise.quantize_bits) - 1
            img = np.round(img / peak * levels) / levels * peak
    return img
