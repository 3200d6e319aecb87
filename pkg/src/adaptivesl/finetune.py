"""Joint refinement of the depth map and GGX parameter maps.

Initialization reads each pixel's MAP estimate out of the probability models
(best-bin subdivision). Refinement then minimizes the smoothed-L1 difference
between captured and re-simulated measurements with AdamW over boxed
reparameterizations: depth and roughness through range-scaled sigmoids,
albedos through plain sigmoids, the normal as a normalized free 3-vector in
the per-pixel view frame, the tangent as a free angle. Runs coarse-to-fine:
K iterations per level, then 2x bilinear upsampling of maps and captures.

All gradients are assembled analytically from the renderer's depth
derivatives and the GGX VJPs; the test suite checks them against central
finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.special import expit

from .acquire import AcquisitionState
from .brdf import (
    ALPHA_MAX,
    ALPHA_MIN,
    ggx_shade,
    ggx_shade_vjp,
    normal_from_angles,
    shading_frame,
    shading_frame_vjp,
)
from .errors import DomainError
from .optim import AdamW
from .patterns import PatternPair
from .prob import map_estimate, score_against
from .render import (
    Renderer,
    candidate_render_data,
    measurements_from_data,
    render_scene,
    view_frame,
)
from .rig import LedModel, RigGeometry, pixel_grid_rays
from .scene import INVALID_DEPTH, SceneTruth
from .seeding import DOMAIN, spawn_rng

__all__ = ["ReconMaps", "FinetuneSchedule", "init_recon", "finetune", "relight"]

CHARBONNIER_DELTA = 1e-6
_LOGIT_CLIP = 1e-6


@dataclass
class ReconMaps(SceneTruth):
    """Reconstructed maps; same layout as a ground-truth scene, plus the rig
    they were estimated under."""

    geom: RigGeometry | None = None
    led: LedModel | None = None
    loss_history: list = field(default_factory=list)


@dataclass
class FinetuneSchedule:
    iters_per_level: int = 300
    levels: int = 1
    learning_rate: float = 1e-3
    weight_decay: float = 1e-6
    delta: float = CHARBONNIER_DELTA

    def __post_init__(self):
        if self.iters_per_level < 0 or self.levels < 1:
            raise DomainError("schedule needs levels >= 1 and iters >= 0")


DEAD_SIGNAL_REL = 1e-9  # pixels below this fraction of the image peak are shadowed


def init_recon(state: AcquisitionState, rng: np.random.Generator | None = None) -> ReconMaps:
    """Per-pixel MAP readout of the acquisition models into dense maps.

    Invalid pixels get depth -1 and zeroed parameters. Pixels that received
    essentially no light under any captured pattern (geometrically shadowed
    from every LED) carry no depth information and are marked invalid too.
    """
    if not state.patterns:
        raise DomainError("acquisition captured no patterns")
    if rng is None:
        rng = spawn_rng(state.config.seed, DOMAIN["map"])
    C = state.channels
    H, W = state.valid_mask.shape
    r = Renderer(state.geom, state.led)
    captured = state.captured_matrix()
    peak = captured.max() if captured.size else 0.0
    dead = captured.max(axis=1) <= DEAD_SIGNAL_REL * max(peak, 1e-300)

    maps = {
        "depth": np.full((H, W), INVALID_DEPTH),
        "diffuse": np.zeros((H, W, C)),
        "specular": np.zeros((H, W, C)),
        "alpha_x": np.full((H, W), ALPHA_MIN),
        "alpha_y": np.full((H, W), ALPHA_MIN),
        "normal_theta": np.zeros((H, W)),
        "normal_phi": np.zeros((H, W)),
        "tangent": np.zeros((H, W)),
    }
    alpha = state.valid_mask.copy()
    for i, m in enumerate(state.models):
        if dead[i]:
            alpha[state.px_row[i], state.px_col[i]] = False
            continue
        o = state.origins[i: i + 1]
        d = state.dirs[i: i + 1]

        def score_fn(trial: dict, kind: str) -> float:
            depths = np.array([[trial["depth"]]])
            scal = {k: np.array([[v]]) for k, v in trial.items() if k != "depth"}
            data = candidate_render_data(r, o, d, depths, scal, C)
            sim = measurements_from_data(r, data, state.patterns).ravel()
            return score_against(captured[i], sim, kind)

        cand = map_estimate(m, score_fn, rng)
        row, col = state.px_row[i], state.px_col[i]
        maps["depth"][row, col] = cand.depth
        s = cand.brdf.scalars()
        maps["diffuse"][row, col] = [s[f"diffuse_{c}"] for c in range(C)]
        maps["specular"][row, col] = [s[f"specular_{c}"] for c in range(C)]
        maps["alpha_x"][row, col] = s["alpha_x"]
        maps["alpha_y"][row, col] = s["alpha_y"]
        maps["normal_theta"][row, col] = s["normal_theta"]
        maps["normal_phi"][row, col] = s["normal_phi"]
        maps["tangent"][row, col] = s["tangent_angle"]

    return ReconMaps(
        depth=maps["depth"], alpha=alpha,
        diffuse=maps["diffuse"], specular=maps["specular"],
        alpha_x=maps["alpha_x"], alpha_y=maps["alpha_y"],
        normal_theta=maps["normal_theta"], normal_phi=maps["normal_phi"],
        tangent=maps["tangent"], geom=state.geom, led=state.led,
    )


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, _LOGIT_CLIP, 1.0 - _LOGIT_CLIP)
    return np.log(p / (1.0 - p))


def _upsample2x(arr: np.ndarray) -> np.ndarray:
    """Bilinear 2x upsampling matching the intrinsics convention
    (pixel centers at i + 0.5; output center maps to (i' + 0.5)/2 - 0.5)."""
    H, W = arr.shape[:2]
    jj = (np.arange(2 * H) + 0.5) / 2.0 - 0.5
    ii = (np.arange(2 * W) + 0.5) / 2.0 - 0.5
    cj, ci = np.meshgrid(jj, ii, indexing="ij")
    if arr.ndim == 2:
        return map_coordinates(arr, [cj, ci], order=1, mode="nearest")
    out = np.empty((2 * H, 2 * W, arr.shape[2]))
    for c in range(arr.shape[2]):
        out[..., c] = map_coordinates(arr[..., c], [cj, ci], order=1, mode="nearest")
    return out


def _scaled_geom(geom: RigGeometry, factor: int) -> RigGeometry:
    from dataclasses import replace

    return replace(
        geom,
        fx=geom.fx * factor, fy=geom.fy * factor,
        cx=geom.cx * factor, cy=geom.cy * factor,
        cam_res_w=geom.cam_res_w * factor, cam_res_h=geom.cam_res_h * factor,
    )


class _LevelProblem:
    """Free variables and the loss/gradient engine at one pyramid level."""

    def __init__(self, geom: RigGeometry, led: LedModel, recon: ReconMaps,
                 captures: list[np.ndarray], patterns: list[PatternPair],
                 delta: float):
        self.geom, self.led = geom, led
        self.patterns = patterns
        self.delta = delta
        self.renderer = Renderer(geom, led)
        origins, dirs, zr = pixel_grid_rays(geom)
        valid = recon.alpha & np.isfinite(zr[..., 0])
        self.valid = valid
        self.rows, self.cols = np.nonzero(valid)
        self.o = origins[valid]
        self.d = dirs[valid]
        self.zmin = zr[..., 0][valid]
        self.zmax = zr[..., 1][valid]
        self.frames = view_frame(self.d)
        self.C = recon.channels
        self.captured = np.stack([img[valid] for img in captures], axis=1)  # (N, J, C)

        dz = np.clip((recon.depth[valid] - self.zmin) / (self.zmax - self.zmin), 0.0, 1.0)
        self.tz = _logit(dz)
        self.td = _logit(recon.diffuse[valid])
        self.ts = _logit(recon.specular[valid])
        self.tax = _logit((recon.alpha_x[valid] - ALPHA_MIN) / (ALPHA_MAX - ALPHA_MIN))
        self.tay = _logit((recon.alpha_y[valid] - ALPHA_MIN) / (ALPHA_MAX - ALPHA_MIN))
        self.nv = normal_from_angles(recon.normal_theta[valid], recon.normal_phi[valid])
        self.psi = recon.tangent[valid].copy()

    @property
    def params(self) -> list[np.ndarray]:
        return [self.tz, self.td, self.ts, self.tax, self.tay, self.nv, self.psi]

    def snapshot(self):
        return [p.copy() for p in self.params]

    def restore(self, snap):
        for p, s in zip(self.params, snap):
            p[...] = s

    def loss_and_grads(self):
        N = self.o.shape[0]
        L = self.renderer.n_led
        C = self.C
        J = len(self.patterns)

        sz = expit(self.tz)
        z = self.zmin + (self.zmax - self.zmin) * sz
        diff = expit(self.td)
        spec = expit(self.ts)
        sax = expit(self.tax)
        say = expit(self.tay)
        ax = ALPHA_MIN + (ALPHA_MAX - ALPHA_MIN) * sax
        ay = ALPHA_MIN + (ALPHA_MAX - ALPHA_MIN) * say
        nn = np.linalg.norm(self.nv, axis=-1, keepdims=True)
        n = self.nv / np.maximum(nn, 1e-14)

        x_k = self.o + z[:, None] * self.d
        wi, g, dwi_dz, dg_dz = self.renderer.led_geometry(x_k, dirs=self.d)
        fp = self.renderer.footprint(x_k, dirs=self.d)

        wi_pf = np.einsum("nij,nli->nlj", self.frames, wi)
        dwi_dz_pf = np.einsum("nij,nli->nlj", self.frames, dwi_dz)
        t, b = shading_frame(n, self.psi)
        wo_l = np.stack([t[..., 2], b[..., 2], n[..., 2]], axis=-1)  # wo = z in pixel frame
        wi_l = np.stack([
            np.einsum("nlj,nj->nl", wi_pf, t),
            np.einsum("nlj,nj->nl", wi_pf, b),
            np.einsum("nlj,nj->nl", wi_pf, n),
        ], axis=-1)
        shade = ggx_shade(wi_l, wo_l[:, None, :], ax[:, None], ay[:, None],
                          spec[:, None, :], diff[:, None, :])  # (N, L, C)

        lights = np.stack([p.light.values.reshape(L, C) for p in self.patterns])  # (J, L, C)
        T = np.empty((N, L, J))
        dT_dz = np.empty((N, L, J))
        for j, pair in enumerate(self.patterns):
            mask_flat = pair.mask.values.ravel()
            T[..., j] = self.renderer.transmittance(fp, mask_flat)
            dT_dz[..., j] = self.renderer.transmittance_dz(fp, mask_flat)
        I = np.einsum("nlc,nl,jlc,nlj->njc", shade, g, lights, T)

        resid = I - self.captured
        rho = np.sqrt(resid**2 + self.delta**2)
        loss = float((rho - self.delta).sum())
        dI = resid / rho  # (N, J, C)

        d_shade = np.einsum("njc,nl,jlc,nlj->nlc", dI, g, lights, T)
        d_g = np.einsum("njc,nlc,jlc,nlj->nl", dI, shade, lights, T)
        d_T = np.einsum("njc,nlc,nl,jlc->nlj", dI, shade, g, lights)

        dz = np.einsum("nl,nl->n", d_g, dg_dz) + np.einsum("nlj,nlj->n", d_T, dT_dz)

        gv = ggx_shade_vjp(wi_l, wo_l[:, None, :], ax[:, None], ay[:, None],
                           spec[:, None, :], diff[:, None, :], d_shade)
        d_wi_l = gv["wi_l"]          # (N, L, 3)
        d_wo_l = gv["wo_l"].sum(1)   # (N, 3)
        d_ax = gv["alpha_x"].sum(1)
        d_ay = gv["alpha_y"].sum(1)
        d_spec = gv["spec"].sum(1)
        d_diff = gv["diff"].sum(1)

        # wi_l components -> (wi_pf, t, b, n); wo_l = (t_z, b_z, n_z)
        d_wi_pf = (d_wi_l[..., 0:1] * t[:, None, :]
                   + d_wi_l[..., 1:2] * b[:, None, :]
                   + d_wi_l[..., 2:3] * n[:, None, :])
        d_t = np.einsum("nl,nlj->nj", d_wi_l[..., 0], wi_pf)
        d_b = np.einsum("nl,nlj->nj", d_wi_l[..., 1], wi_pf)
        d_n = np.einsum("nl,nlj->nj", d_wi_l[..., 2], wi_pf)
        d_t[..., 2] += d_wo_l[..., 0]
        d_b[..., 2] += d_wo_l[..., 1]
        d_n[..., 2] += d_wo_l[..., 2]

        d_n_frame, d_psi = shading_frame_vjp(n, self.psi, d_t, d_b)
        d_n += d_n_frame
        d_nv = (d_n - n * np.sum(n * d_n, axis=-1, keepdims=True)) / np.maximum(nn, 1e-14)

        dz += np.einsum("nlj,nlj->n", d_wi_pf, dwi_dz_pf)

        d_tz = dz * (self.zmax - self.zmin) * sz * (1.0 - sz)
        d_td = d_diff * diff * (1.0 - diff)
        d_ts = d_spec * spec * (1.0 - spec)
        d_tax = d_ax * (ALPHA_MAX - ALPHA_MIN) * sax * (1.0 - sax)
        d_tay = d_ay * (ALPHA_MAX - ALPHA_MIN) * say * (1.0 - say)

        return loss, [d_tz, d_td, d_ts, d_tax, d_tay, d_nv, d_psi]

    def export(self, recon_like: ReconMaps) -> ReconMaps:
        H, W = self.valid.shape
        C = self.C
        out = ReconMaps(
            depth=np.full((H, W), INVALID_DEPTH), alpha=self.valid.copy(),
            diffuse=np.zeros((H, W, C)), specular=np.zeros((H, W, C)),
            alpha_x=np.full((H, W), ALPHA_MIN), alpha_y=np.full((H, W), ALPHA_MIN),
            normal_theta=np.zeros((H, W)), normal_phi=np.zeros((H, W)),
            tangent=np.zeros((H, W)), geom=self.geom, led=self.led,
            loss_history=list(recon_like.loss_history),
        )
        rows, cols = self.rows, self.cols
        out.depth[rows, cols] = self.zmin + (self.zmax - self.zmin) * expit(self.tz)
        out.diffuse[rows, cols] = expit(self.td)
        out.specular[rows, cols] = expit(self.ts)
        out.alpha_x[rows, cols] = ALPHA_MIN + (ALPHA_MAX - ALPHA_MIN) * expit(self.tax)
        out.alpha_y[rows, cols] = ALPHA_MIN + (ALPHA_MAX - ALPHA_MIN) * expit(self.tay)
        nn = self.nv / np.maximum(np.linalg.norm(self.nv, axis=-1, keepdims=True), 1e-14)
        theta = np.arccos(np.clip(nn[..., 2], -1.0, 1.0))
        phi = np.arctan2(nn[..., 1], nn[..., 0])
        out.normal_theta[rows, cols] = theta
        out.normal_phi[rows, cols] = phi
        out.tangent[rows, cols] = np.mod(self.psi, np.pi)
        return out


def _upsample_recon(recon: ReconMaps, geom2: RigGeometry, alpha2: np.ndarray) -> ReconMaps:
    """Bilinear 2x upsampling of all maps; normals go through vectors and are
    renormalized, the tangent angle through its double-angle unit vector."""
    # fill invalid pixels before interpolation so edges don't bleed the -1 sentinel
    fill = recon.depth[recon.alpha].mean() if recon.alpha.any() else 0.0
    depth = _upsample2x(np.where(recon.alpha, recon.depth, fill))
    nvec = normal_from_angles(recon.normal_theta, recon.normal_phi)
    nvec_up = _upsample2x(nvec)
    nvec_up /= np.maximum(np.linalg.norm(nvec_up, axis=-1, keepdims=True), 1e-14)
    cos2 = _upsample2x(np.cos(2.0 * recon.tangent))
    sin2 = _upsample2x(np.sin(2.0 * recon.tangent))
    tangent = np.mod(0.5 * np.arctan2(sin2, cos2), np.pi)
    return ReconMaps(
        depth=np.where(alpha2, depth, INVALID_DEPTH),
        alpha=alpha2,
        diffuse=np.clip(_upsample2x(recon.diffuse), 0.0, 1.0),
        specular=np.clip(_upsample2x(recon.specular), 0.0, 1.0),
        alpha_x=np.clip(_upsample2x(recon.alpha_x), ALPHA_MIN, ALPHA_MAX),
        alpha_y=np.clip(_upsample2x(recon.alpha_y), ALPHA_MIN, ALPHA_MAX),
        normal_theta=np.arccos(np.clip(nvec_up[..., 2], -1.0, 1.0)),
        normal_phi=np.arctan2(nvec_up[..., 1], nvec_up[..., 0]),
        tangent=tangent,
        geom=geom2, led=recon.led, loss_history=list(recon.loss_history),
    )


def finetune(recon: ReconMaps, state: AcquisitionState,
             schedule: FinetuneSchedule | None = None) -> ReconMaps:
    """Render-and-compare refinement of ``recon`` against the captures in
    ``state``, coarse-to-fine. The returned iterate per level is the best one
    seen, so each level's final loss never exceeds its initial loss."""
    if schedule is None:
        schedule = FinetuneSchedule()
    if recon.depth.shape != state.valid_mask.shape:
        raise DomainError("recon must start at the acquisition working resolution")

    geom = state.geom
    captures = list(state.captures)
    current = recon
    current.loss_history = list(recon.loss_history)

    for level in range(schedule.levels):
        prob = _LevelProblem(geom, state.led, current, captures, state.patterns,
                             schedule.delta)
        opt = AdamW(prob.params, lr=schedule.learning_rate,
                    weight_decay=schedule.weight_decay)
        curve = []
        best = (np.inf, prob.snapshot())
        for it in range(schedule.iters_per_level + 1):
            loss, grads = prob.loss_and_grads()
            if not np.isfinite(loss):
                raise RuntimeError(f"finetune diverged at level {level}, iter {it}")
            curve.append(loss)
            if loss < best[0]:
                best = (loss, prob.snapshot())
            if it == schedule.iters_per_level:
                break
            opt.step(grads)
        prob.restore(best[1])
        current = prob.export(current)
        current.loss_history.append({"level": level, "initial": curve[0],
                                     "final": best[0], "iters": len(curve) - 1})

        if level + 1 < schedule.levels:
            geom = _scaled_geom(geom, 2)
            _, _, zr2 = pixel_grid_rays(geom)
            alpha2 = np.repeat(np.repeat(current.alpha, 2, axis=0), 2, axis=1)
            alpha2 &= np.isfinite(zr2[..., 0])
            current = _upsample_recon(current, geom, alpha2)
            captures = [_upsample2x(img) for img in captures]
    return current


def relight(recon: ReconMaps, pair: PatternPair) -> np.ndarray:
    """Noise-free forward render of the reconstruction under any pattern pair
    (held-out validation)."""
    if recon.geom is None or recon.led is None:
        raise DomainError("recon carries no rig; attach geom/led before relighting")
    return render_scene(recon.geom, recon.led, pair, recon, noise=None)
