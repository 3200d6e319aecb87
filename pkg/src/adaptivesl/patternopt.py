"""Differentiable optimization of the next pattern batch.

Per pixel, up to ``n_peak`` peak candidates are extracted from the depth
histogram. Treating each candidate as its own class, the softmax over pairwise
ZNCC of the candidates' simulated measurement vectors (existing captures plus
the patterns being optimized) yields classification likelihoods; the summed
cross entropy is minimized w.r.t. the free pattern variables only. Gradients
chain the measurement's bilinear pattern cofactors through the ZNCC/softmax
Jacobians into the sigmoid parameterization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .brdf import Candidate, GgxParams
from .errors import DomainError
from .optim import AdamW
from .patterns import FreePatternVars, PatternPair, init_free_vars, realize, realize_grad
from .prob import PixelModels, zncc
from .render import CandidateRenderData, Renderer, candidate_render_data, measurements_from_data
from .rig import LedModel, RigGeometry

__all__ = [
    "PeakSet",
    "OptimConfig",
    "detect_peaks",
    "sample_peakset",
    "class_likelihood",
    "LossContext",
    "build_loss_context",
    "cross_entropy_loss",
    "optimize_next_patterns",
]

PEAK_WINDOW = 5          # centered strict-max window, in bins
PEAK_THRESHOLD = 0.5     # peaks must reach this fraction of the global max score


@dataclass
class PeakSet:
    """Per-pixel peak candidates with their depth-bin indices and raw scores."""

    candidates: list[Candidate] = field(default_factory=list)
    bins: list[int] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.candidates)


@dataclass
class OptimConfig:
    n_batch: int = 3
    n_peak: int = 3
    iters: int = 200
    learning_rate: float = 1e-3
    weight_decay: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.n_batch <= 0 or self.n_peak <= 0 or self.iters < 0:
            raise DomainError("n_batch, n_peak must be positive; iters >= 0")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise DomainError("bad optimizer settings")


def _draw_brdf(models: PixelModels, rng: np.random.Generator) -> GgxParams:
    scalars = {name: float(h.sample_values(1, rng)[0]) for name, h in models.brdf.items()}
    return GgxParams.from_scalars(scalars, models.channels)


def detect_peaks(models: PixelModels, n_peak: int, rng: np.random.Generator) -> PeakSet:
    """Local-maximum filtering with adaptive thresholding on the depth scores.

    A bin is a peak iff its score is the strict maximum of the centered
    5-bin window and at least half the global maximum. The top ``n_peak``
    peaks by score (ties to the lower bin) become candidates at the bin
    center, each with one BRDF draw from the current reflectance histograms.
    """
    s = models.depth.scores
    n = s.shape[0]
    half = PEAK_WINDOW // 2
    thresh = PEAK_THRESHOLD * s.max()
    peaks = []
    for i in range(n):
        lo, hi = max(0, i - half), min(n, i + half + 1)
        w = s[lo:hi]
        if s[i] >= thresh and np.sum(w > s[i]) == 0 and np.sum(w == s[i]) == 1:
            peaks.append(i)
    peaks.sort(key=lambda i: (-s[i], i))
    peaks = peaks[:n_peak]
    out = PeakSet()
    centers = models.depth.centers()
    for i in peaks:
        out.candidates.append(Candidate(depth=float(centers[i]), brdf=_draw_brdf(models, rng)))
        out.bins.append(i)
        out.scores.append(float(s[i]))
    return out


def sample_peakset(models: PixelModels, n_peak: int, rng: np.random.Generator) -> PeakSet:
    """Candidate set for the very first round: depth bins drawn from the
    (uniform) pmf without replacement, so a flat histogram still yields
    distinct hypotheses to disambiguate."""
    n_bin = models.depth.n_bin
    k = min(n_peak, n_bin)
    bins = rng.choice(n_bin, size=k, replace=False, p=models.depth.pmf)
    bins = np.sort(bins)
    out = PeakSet()
    for b in bins:
        depth = models.depth.lo + (int(b) + rng.random()) * models.depth.bin_width
        out.candidates.append(Candidate(depth=float(depth), brdf=_draw_brdf(models, rng)))
        out.bins.append(int(b))
        out.scores.append(float(models.depth.scores[b]))
    return out


def class_likelihood(sim_vectors: np.ndarray) -> np.ndarray:
    """Classification likelihoods: row-softmax of pairwise ZNCC.

    ``sim_vectors``: (N, L) with N >= 2 candidates. Rows sum to 1.
    """
    sims = np.asarray(sim_vectors, dtype=np.float64)
    if sims.ndim != 2 or sims.shape[0] < 2:
        raise DomainError("class_likelihood needs >= 2 candidate vectors")
    N = sims.shape[0]
    Z = np.empty((N, N))
    for a in range(N):
        for b in range(N):
            Z[a, b] = zncc(sims[a], sims[b])
    return _softmax_rows(Z)


def _softmax_rows(Z: np.ndarray) -> np.ndarray:
    e = np.exp(Z - Z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class _Group:
    """Pixels sharing one candidate count, packed densely."""

    A: int
    past: np.ndarray       # (N, A, Jp * C)
    data: CandidateRenderData


@dataclass
class LossContext:
    """Fixed context of one optimization round: peak candidates with their
    pattern-independent render tensors and already-captured blocks."""

    renderer: Renderer
    channels: int
    groups: list[_Group]
    n_eligible: int


def build_loss_context(
    geom: RigGeometry,
    led: LedModel,
    origins: np.ndarray,
    dirs: np.ndarray,
    peaksets: list[PeakSet],
    captured: list[PatternPair],
    channels: int,
) -> LossContext:
    """Pack per-pixel peak sets (>= 2 candidates each) into dense groups and
    precompute everything the per-iteration loss does not change."""
    r = Renderer(geom, led)
    groups = []
    n_eligible = 0
    for A in sorted({len(ps) for ps in peaksets if len(ps) >= 2}):
        sel = [i for i, ps in enumerate(peaksets) if len(ps) == A]
        n_eligible += len(sel)
        depths = np.array([[c.depth for c in peaksets[i].candidates] for i in sel])
        scal_names = peaksets[sel[0]].candidates[0].brdf.scalars().keys()
        scalars = {
            k: np.array([[c.brdf.scalars()[k] for c in peaksets[i].candidates] for i in sel])
            for k in scal_names
        }
        data = candidate_render_data(r, origins[sel], dirs[sel], depths, scalars, channels)
        if captured:
            past = measurements_from_data(r, data, captured)
            past = past.reshape(len(sel), A, len(captured) * channels)
        else:
            past = np.zeros((len(sel), A, 0))
        groups.append(_Group(A=A, past=past, data=data))
    return LossContext(renderer=r, channels=channels, groups=groups, n_eligible=n_eligible)


def cross_entropy_loss(ctx: LossContext, vars_batch: list[FreePatternVars]):
    """Total candidate-classification cross entropy and its gradients.

    Returns ``(loss, grads)`` where ``grads`` is a list of
    ``(d_light_raw, d_mask_raw)`` pairs aligned with ``vars_batch``.
    Raises ``DomainError`` when no pixel is eligible.
    """
    if ctx.n_eligible == 0:
        raise DomainError("nothing to optimize: no pixel has >= 2 peak candidates")
    B = len(vars_batch)
    pairs = [realize(v) for v in vars_batch]
    lights = np.stack([p.light.values.reshape(ctx.renderer.n_led, ctx.channels) for p in pairs])
    masks = [p.mask.values.ravel() for p in pairs]
    P = masks[0].shape[0]

    loss = 0.0
    d_lights = np.zeros_like(lights)  # (B, L, C)
    d_masks = np.zeros((B, P))

    for grp in ctx.groups:
        N, A = grp.past.shape[0], grp.A
        C = ctx.channels
        T = np.empty(grp.data.g.shape + (B,))  # (N, A, L, B)
        for b in range(B):
            T[..., b] = ctx.renderer.transmittance(grp.data.fp, masks[b])
        I_new = np.einsum("nalc,nal,blc,nalb->nabc", grp.data.shade, grp.data.g, lights, T)
        V = np.concatenate([grp.past, I_new.reshape(N, A, B * C)], axis=-1)

        # pairwise ZNCC with the constant-vector convention
        Vc = V - V.mean(axis=-1, keepdims=True)
        nrm = np.linalg.norm(Vc, axis=-1)
        const = nrm < 1e-12
        U = Vc / np.where(const, 1.0, nrm)[..., None]
        U[const] = 0.0
        Z = np.einsum("nav,nbv->nab", U, U)
        diag = np.arange(A)
        Z[:, diag, diag] = np.where(const, 0.0, 1.0)

        Y = _softmax_rows(Z)
        loss += float(-np.log(np.maximum(Y[:, diag, diag], 1e-300)).sum())

        dZ = Y.copy()
        dZ[:, diag, diag] -= 1.0
        dU = np.einsum("nab,nbv->nav", dZ, U) + np.einsum("nba,nbv->nav", dZ, U)
        dVc = (dU - U * np.sum(U * dU, axis=-1, keepdims=True)) / np.where(const, 1.0, nrm)[..., None]
        dVc[const] = 0.0
        dV = dVc - dVc.mean(axis=-1, keepdims=True)
        dI = dV[..., grp.past.shape[-1]:].reshape(N, A, B, C)

        d_lights += np.einsum("nabc,nalc,nal,nalb->blc", dI, grp.data.shade, grp.data.g, T)
        dT = np.einsum("nabc,nalc,nal,blc->nalb", dI, grp.data.shade, grp.data.g, lights)
        for b in range(B):
            contrib = (dT[..., b][..., None, None] * grp.data.fp.w).ravel()
            d_masks[b] += np.bincount(grp.data.fp.idx.ravel(), weights=contrib, minlength=P)

    grads = []
    for b, v in enumerate(vars_batch):
        gl, gm = realize_grad(
            v,
            d_lights[b].reshape(v.light_raw.shape),
            d_masks[b].reshape(v.mask_raw.shape),
        )
        grads.append((gl, gm))
    return loss, grads


def optimize_next_patterns(state, cfg: OptimConfig):
    """Optimize the next ``n_batch`` pattern pairs against ``state``.

    ``state`` provides rig/LED models, per-pixel peak sets, captured patterns
    and a seeded generator (see ``acquire.AcquisitionState``). Runs AdamW on
    the free pattern variables and returns ``(pairs, info)`` where the
    returned iterate is the best one seen, so its loss never exceeds the
    initialization loss. With no eligible pixel the realized initialization
    is returned unchanged.
    """
    rng = np.random.default_rng(cfg.seed)
    vars_batch = [
        init_free_vars(state.geom, state.channels, rng) for _ in range(cfg.n_batch)
    ]
    ctx = build_loss_context(
        state.geom, state.led, state.origins, state.dirs, state.peaksets,
        state.patterns, state.channels,
    )
    info = {"loss_curve": [], "eligible_pixels": ctx.n_eligible}
    if ctx.n_eligible == 0:
        return [realize(v) for v in vars_batch], info

    params = []
    for v in vars_batch:
        params.extend([v.light_raw, v.mask_raw])
    opt = AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)

    best_loss = np.inf
    best_snapshot = None
    for it in range(cfg.iters + 1):
        loss, grads = cross_entropy_loss(ctx, vars_batch)
        if not np.isfinite(loss):
            raise RuntimeError(
                f"pattern optimization diverged at iteration {it}: loss={loss}"
            )
        info["loss_curve"].append(loss)
        if loss < best_loss:
            best_loss = loss
            best_snapshot = [(v.light_raw.copy(), v.mask_raw.copy()) for v in vars_batch]
        if it == cfg.iters:
            break
        flat = []
        for gl, gm in grads:
            flat.extend([gl, gm])
        opt.step(flat)

    for v, (lr_, mr_) in zip(vars_batch, best_snapshot):
        v.light_raw[...] = lr_
        v.mask_raw[...] = mr_
    info["loss_initial"] = info["loss_curve"][0]
    info["loss_final"] = best_loss
    return [realize(v) for v in vars_batch], info
