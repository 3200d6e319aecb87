"""Anisotropic GGX reflectance: evaluation and hand-derived gradients.

The model follows the common microfacet form: Lambertian diffuse plus a
specular lobe with the anisotropic GGX normal distribution, Smith
height-correlated masking-shadowing, and Schlick Fresnel whose F0 is the
specular albedo:

    f_c = diffuse_c / pi + specular_c * D * G * F_c / (4 (n.wi)(n.wo))

All directions here live in whatever orthonormal frame the caller uses; the
normal's spherical angles are interpreted in that same frame. The rendering
pipeline uses a per-pixel frame whose z axis points from the surface toward
the camera, so "camera-facing hemisphere" is simply theta in [0, THETA_MAX].

Gradients are written out manually (no autodiff); every VJP below is checked
against central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

__all__ = [
    "GgxParams",
    "Candidate",
    "BRDF_SCALAR_KEYS",
    "ALPHA_MIN",
    "ALPHA_MAX",
    "THETA_MAX",
    "eval_ggx",
    "normal_from_angles",
    "angles_from_normal",
    "shading_frame",
    "shading_frame_vjp",
    "ggx_shade",
    "ggx_shade_vjp",
]

ALPHA_MIN = 0.006
ALPHA_MAX = 0.5
THETA_MAX = np.deg2rad(80.0)

_EPS = 1e-14


@dataclass
class GgxParams:
    """Per-point GGX parameters. Albedos carry one value per color channel;
    the normal is stored as spherical angles (theta from the frame's +z,
    phi around it)."""

    diffuse_albedo: np.ndarray
    specular_albedo: np.ndarray
    alpha_x: float
    alpha_y: float
    normal_theta: float
    normal_phi: float
    tangent_angle: float

    def __post_init__(self):
        self.diffuse_albedo = np.atleast_1d(np.asarray(self.diffuse_albedo, dtype=np.float64))
        self.specular_albedo = np.atleast_1d(np.asarray(self.specular_albedo, dtype=np.float64))
        if self.diffuse_albedo.shape != self.specular_albedo.shape:
            raise DomainError("albedo channel counts differ")
        if np.any(self.diffuse_albedo < 0) or np.any(self.diffuse_albedo > 1):
            raise DomainError("diffuse albedo outside [0, 1]")
        if np.any(self.specular_albedo < 0) or np.any(self.specular_albedo > 1):
            raise DomainError("specular albedo outside [0, 1]")
        for a in (self.alpha_x, self.alpha_y):
            if not (ALPHA_MIN - 1e-12 <= a <= ALPHA_MAX + 1e-12):
                raise DomainError(f"roughness {a} outside [{ALPHA_MIN}, {ALPHA_MAX}]")

    @property
    def channels(self) -> int:
        return self.diffuse_albedo.shape[0]

    def normal(self) -> np.ndarray:
        """Unit normal in the caller's frame (see module docstring)."""
        return normal_from_angles(self.normal_theta, self.normal_phi)

    def scalars(self) -> dict[str, float]:
        """Flat name -> value view of every scalar parameter (histogram order)."""
        out = {}
        for c in range(self.channels):
            out[f"diffuse_{c}"] = float(self.diffuse_albedo[c])
        for c in range(self.channels):
            out[f"specular_{c}"] = float(self.specular_albedo[c])
        out["alpha_x"] = float(self.alpha_x)
        out["alpha_y"] = float(self.alpha_y)
        out["normal_theta"] = float(self.normal_theta)
        out["normal_phi"] = float(self.normal_phi)
        out["tangent_angle"] = float(self.tangent_angle)
        return out

    @staticmethod
    def from_scalars(values: dict[str, float], channels: int) -> "GgxParams":
        return GgxParams(
            diffuse_albedo=np.array([values[f"diffuse_{c}"] for c in range(channels)]),
            specular_albedo=np.array([values[f"specular_{c}"] for c in range(channels)]),
            alpha_x=values["alpha_x"],
            alpha_y=values["alpha_y"],
            normal_theta=values["normal_theta"],
            normal_phi=values["normal_phi"],
            tangent_angle=values["tangent_angle"],
        )


def BRDF_SCALAR_KEYS(channels: int) -> list[str]:
    """Ordered scalar-parameter names for a given channel count."""
    keys = [f"diffuse_{c}" for c in range(channels)]
    keys += [f"specular_{c}" for c in range(channels)]
    keys += ["alpha_x", "alpha_y", "normal_theta", "normal_phi", "tangent_angle"]
    return keys


@dataclass
class Candidate:
    """One hypothesized (depth, reflectance) tuple for a pixel."""

    depth: float
    brdf: GgxParams


def normal_from_angles(theta, phi) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def angles_from_normal(n) -> tuple[np.ndarray, np.ndarray]:
    n = np.asarray(n, dtype=np.float64)
    theta = np.arccos(np.clip(n[..., 2], -1.0, 1.0))
    phi = np.arctan2(n[..., 1], n[..., 0])
    return theta, phi


def _reference_axis(n: np.ndarray) -> np.ndarray:
    """Fixed tangent reference; switches to +y only for normals nearly along +x
    (never hit for theta <= THETA_MAX)."""
    ax = np.zeros_like(n)
    use_y = np.abs(n[..., 0]) > 0.95
    ax[..., 0] = np.where(use_y, 0.0, 1.0)
    ax[..., 1] = np.where(use_y, 1.0, 0.0)
    return ax


def shading_frame(n: np.ndarray, psi) -> tuple[np.ndarray, np.ndarray]:
    """Tangent/bitangent completing unit normal ``n``; ``psi`` rotates the
    tangent about the normal from its reference position."""
    n = np.asarray(n, dtype=np.float64)
    psi = np.asarray(psi, dtype=np.float64)
    a = _reference_axis(n)
    an = np.sum(a * n, axis=-1, keepdims=True)
    u = a - an * n
    un = np.linalg.norm(u, axis=-1, keepdims=True)
    t0 = u / np.maximum(un, _EPS)
    c0 = np.cross(n, t0)
    cp, sp = np.cos(psi)[..., None], np.sin(psi)[..., None]
    t = cp * t0 + sp * c0
    b = np.cross(n, t)
    return t, b


def shading_frame_vjp(n, psi, d_t, d_b) -> tuple[np.ndarray, np.ndarray]:
    """Backward of ``shading_frame``: upstream gradients on (t, b) down to
    (n, psi). Recomputes the cheap forward internals."""
    n = np.asarray(n, dtype=np.float64)
    psi = np.asarray(psi, dtype=np.float64)
    a = _reference_axis(n)
    an = np.sum(a * n, axis=-1, keepdims=True)
    u = a - an * n
    un = np.maximum(np.linalg.norm(u, axis=-1, keepdims=True), _EPS)
    t0 = u / un
    c0 = np.cross(n, t0)
    cp, sp = np.cos(psi)[..., None], np.sin(psi)[..., None]
    t = cp * t0 + sp * c0

    # b = n x t
    d_n = np.cross(t, d_b)
    d_t_total = d_t + np.cross(d_b, n)
    # t = cos(psi) t0 + sin(psi) c0
    d_psi = np.sum((-sp * t0 + cp * c0) * d_t_total, axis=-1)
    d_t0 = cp * d_t_total
    d_c0 = sp * d_t_total
    # c0 = n x t0
    d_n += np.cross(t0, d_c0)
    d_t0 += np.cross(d_c0, n)
    # t0 = u / |u|
    d_u = (d_t0 - t0 * np.sum(t0 * d_t0, axis=-1, keepdims=True)) / un
    # u = a - (a.n) n
    d_n += -(a * np.sum(n * d_u, axis=-1, keepdims=True) + an * d_u)
    return d_n, d_psi


def _ggx_core(wi_l, wo_l, alpha_x, alpha_y, spec):
    """Shared forward pieces of the specular lobe. Returns the per-channel
    specular factor ``spec * F * D * G / (4 zi zo)`` plus intermediates."""
    zi = wi_l[..., 2]
    zo = wo_l[..., 2]
    valid = (zi > 0) & (zo > 0)
    zi_s = np.where(valid, zi, 1.0)
    zo_s = np.where(valid, zo, 1.0)

    hl = wi_l + wo_l
    hn = np.maximum(np.linalg.norm(hl, axis=-1), _EPS)
    h = hl / hn[..., None]
    c = np.sum(h * wi_l, axis=-1)  # = h.wo as well

    q = (h[..., 0] / alpha_x) ** 2 + (h[..., 1] / alpha_y) ** 2 + h[..., 2] ** 2
    q = np.maximum(q, _EPS)
    D = 1.0 / (np.pi * alpha_x * alpha_y * q**2)

    def smith_m(w):
        wz2 = np.maximum(w[..., 2] ** 2, _EPS)
        return ((alpha_x * w[..., 0]) ** 2 + (alpha_y * w[..., 1]) ** 2) / wz2

    mi, mo = smith_m(wi_l), smith_m(wo_l)
    ri, ro = np.sqrt(1.0 + mi), np.sqrt(1.0 + mo)
    G = 1.0 / (1.0 + 0.5 * (ri - 1.0) + 0.5 * (ro - 1.0))

    one_c5 = (1.0 - np.clip(c, 0.0, 1.0)) ** 5
    F = spec + (1.0 - spec) * one_c5[..., None]
    S = D * G / (4.0 * zi_s * zo_s)
    spec_term = spec * F * S[..., None]
    cache = dict(zi=zi, zo=zo, valid=valid, zi_s=zi_s, zo_s=zo_s, hl=hl, hn=hn, h=h,
                 c=c, q=q, D=D, mi=mi, mo=mo, ri=ri, ro=ro, G=G, one_c5=one_c5,
                 F=F, S=S)
    return spec_term, cache


def ggx_shade(wi_l, wo_l, alpha_x, alpha_y, spec, diff) -> np.ndarray:
    """Cosine-weighted reflectance ``f * (n.wi)`` in the shading frame.

    ``wi_l``/``wo_l``: (..., 3) local direction components; ``spec``/``diff``:
    (..., C) albedos; ``alpha_*``: (...) roughness. Zero wherever either
    cosine is non-positive.
    """
    wi_l = np.asarray(wi_l, dtype=np.float64)
    wo_l = np.asarray(wo_l, dtype=np.float64)
    spec = np.asarray(spec, dtype=np.float64)
    diff = np.asarray(diff, dtype=np.float64)
    spec_term, cc = _ggx_core(wi_l, wo_l, alpha_x, alpha_y, spec)
    f = diff / np.pi + spec_term
    shade = f * cc["zi"][..., None]
    return np.where(cc["valid"][..., None], shade, 0.0)


def ggx_shade_vjp(wi_l, wo_l, alpha_x, alpha_y, spec, diff, d_shade) -> dict:
    """VJP of ``ggx_shade`` with upstream ``d_shade`` (..., C).

    Returns gradients for wi_l, alpha_x, alpha_y, spec and diff (wo is held
    fixed by every caller). Invalid-cosine points get zero gradient, matching
    the clamp in the forward pass.
    """
    wi_l = np.asarray(wi_l, dtype=np.float64)
    wo_l = np.asarray(wo_l, dtype=np.float64)
    spec = np.asarray(spec, dtype=np.float64)
    diff = np.asarray(diff, dtype=np.float64)
    alpha_x = np.asarray(alpha_x, dtype=np.float64)
    alpha_y = np.asarray(alpha_y, dtype=np.float64)

    spec_term, cc = _ggx_core(wi_l, wo_l, alpha_x, alpha_y, spec)
    valid = cc["valid"]
    d_shade = np.where(valid[..., None], np.asarray(d_shade, dtype=np.float64), 0.0)
    zi, zo = cc["zi"], cc["zo"]
    zi_s, zo_s = cc["zi_s"], cc["zo_s"]
    h, hn, c, q, D = cc["h"], cc["hn"], cc["c"], cc["q"], cc["D"]
    mi, mo, ri, ro, G = cc["mi"], cc["mo"], cc["ri"], cc["ro"], cc["G"]
    F, S, one_c5 = cc["F"], cc["S"], cc["one_c5"]

    f = diff / np.pi + spec_term

    # shade = f * zi
    d_f = d_shade * zi[..., None]
    d_zi = np.sum(d_shade * f, axis=-1)

    d_diff = d_f / np.pi
    # spec_term_c = spec_c * F_c * S
    d_spec = d_f * (F + spec * (1.0 - one_c5[..., None])) * S[..., None]
    d_S = np.sum(d_f * spec * F, axis=-1)

    # dF_c/dc = -5 (1 - spec_c) (1 - c)^4  (c clipped in forward)
    dF_dc = -5.0 * (1.0 - spec) * ((1.0 - np.clip(c, 0.0, 1.0)) ** 4)[..., None]
    dF_dc = np.where((c > 0.0)[..., None] & (c < 1.0)[..., None], dF_dc, 0.0)
    d_c = np.sum(d_f * spec * S[..., None] * dF_dc, axis=-1)

    # S = D G / (4 zi zo)
    d_D = d_S * G / (4.0 * zi_s * zo_s)
    d_G = d_S * D / (4.0 * zi_s * zo_s)
    d_zi = d_zi - d_S * D * G / (4.0 * zi_s**2 * zo_s)
    d_zo = -d_S * D * G / (4.0 * zi_s * zo_s**2)

    # G = 1 / (1 + (ri-1)/2 + (ro-1)/2)
    d_ri = -0.5 * d_G * G**2
    d_ro = -0.5 * d_G * G**2
    d_mi = d_ri / (2.0 * ri)
    d_mo = d_ro / (2.0 * ro)

    # m(w) = ((ax wx)^2 + (ay wy)^2) / wz^2
    wz_i = np.where(np.abs(wi_l[..., 2]) > _EPS, wi_l[..., 2], 1.0)
    wz_o = np.where(np.abs(wo_l[..., 2]) > _EPS, wo_l[..., 2], 1.0)
    d_wi = np.zeros_like(wi_l)
    d_wo = np.zeros(np.broadcast_shapes(wi_l.shape, wo_l.shape))
    d_wi[..., 0] += d_mi * 2.0 * alpha_x**2 * wi_l[..., 0] / wz_i**2
    d_wi[..., 1] += d_mi * 2.0 * alpha_y**2 * wi_l[..., 1] / wz_i**2
    d_wi[..., 2] += d_mi * (-2.0 * mi / wz_i)
    d_wo[..., 0] += d_mo * 2.0 * alpha_x**2 * wo_l[..., 0] / wz_o**2
    d_wo[..., 1] += d_mo * 2.0 * alpha_y**2 * wo_l[..., 1] / wz_o**2
    d_wo[..., 2] += d_mo * (-2.0 * mo / wz_o)
    d_ax = d_mi * 2.0 * alpha_x * wi_l[..., 0] ** 2 / wz_i**2
    d_ay = d_mi * 2.0 * alpha_y * wi_l[..., 1] ** 2 / wz_i**2
    d_ax = d_ax + d_mo * 2.0 * alpha_x * wo_l[..., 0] ** 2 / wz_o**2
    d_ay = d_ay + d_mo * 2.0 * alpha_y * wo_l[..., 1] ** 2 / wz_o**2

    # D = 1 / (pi ax ay q^2), q = (hx/ax)^2 + (hy/ay)^2 + hz^2
    d_q = d_D * (-2.0 * D / q)
    d_ax = d_ax + d_D * (-D / alpha_x) + d_q * (-2.0 * h[..., 0] ** 2 / alpha_x**3)
    d_ay = d_ay + d_D * (-D / alpha_y) + d_q * (-2.0 * h[..., 1] ** 2 / alpha_y**3)
    d_h = np.zeros_like(h)
    d_h[..., 0] = d_q * 2.0 * h[..., 0] / alpha_x**2
    d_h[..., 1] = d_q * 2.0 * h[..., 1] / alpha_y**2
    d_h[..., 2] = d_q * 2.0 * h[..., 2]

    # c = h . wi
    d_h += d_c[..., None] * wi_l
    d_wi += d_c[..., None] * h

    # h = hl / |hl|
    d_hl = (d_h - h * np.sum(h * d_h, axis=-1, keepdims=True)) / hn[..., None]
    d_wi += d_hl  # hl = wi + wo
    d_wo += d_hl

    # zi is wi_l[..., 2], zo is wo_l[..., 2]
    d_wi[..., 2] += d_zi
    d_wo[..., 2] += d_zo

    zero = lambda g: np.where(valid, g, 0.0)
    return {
        "wi_l": np.where(valid[..., None], d_wi, 0.0),
        "wo_l": np.where(valid[..., None], d_wo, 0.0),
        "alpha_x": zero(d_ax),
        "alpha_y": zero(d_ay),
        "spec": np.where(valid[..., None], d_spec, 0.0),
        "diff": np.where(valid[..., None], d_diff, 0.0),
    }


def eval_ggx(brdf: GgxParams, wi, wo) -> np.ndarray:
    """BRDF value (per channel, 1/sr) for unit directions ``wi``/``wo``
    expressed in the frame the normal angles refer to. Zero when either
    direction falls below the surface."""
    wi = np.asarray(wi, dtype=np.float64)
    wo = np.asarray(wo, dtype=np.float64)
    n = brdf.normal()
    t, b = shading_frame(n, brdf.tangent_angle)
    frame = np.stack([t, b, n], axis=-2)  # rows
    wi_l = frame @ wi
    wo_l = frame @ wo
    spec_term, cc = _ggx_core(
        wi_l, wo_l, brdf.alpha_x, brdf.alpha_y, brdf.specular_albedo
    )
    f = brdf.diffuse_albedo / np.pi + spec_term
    return np.where(cc["valid"][..., None], f, 0.0).reshape(brdf.diffuse_albedo.shape)
