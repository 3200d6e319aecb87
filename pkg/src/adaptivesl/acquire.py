"""The adaptive acquisition loop: optimize a pattern batch, capture, update
the per-pixel models, repeat until the pattern budget is exhausted.

Round 0 starts from uniform histograms (its candidate sets are drawn from
them directly); every later round first refreshes the models with a
Monte-Carlo update against all captures so far, then extracts peak candidate
sets and optimizes the next batch. A final update after the last capture
brings the histograms up to date with the full budget.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError
from .patterns import PatternPair, load_pattern_pair, random_pattern_pair, save_pattern_pair
from .patternopt import OptimConfig, PeakSet, detect_peaks, optimize_next_patterns, sample_peakset
from .prob import PixelModels, init_models, pmf_entropy, sample_scalars, update_models
from .rawio import load_raw, save_png, save_raw
from .render import Renderer, render_scene, simulate_candidates_batch
from .rig import LedModel, PixelRay, RigGeometry, pixel_grid_rays
from .scene import NoiseModel, SceneTruth
from .seeding import DOMAIN, derive_seed, spawn_rng

__all__ = [
    "AcquireConfig",
    "AcquisitionState",
    "SimulatedCapture",
    "ReplayCapture",
    "run_acquisition",
    "entropy_trace",
    "write_checkpoint",
]


@dataclass
class AcquireConfig:
    budget: int = 30
    n_batch: int = 3
    n_sample: int = 600
    n_bin: int = 100
    n_peak: int = 3
    channels: int = 1
    iters: int = 200
    learning_rate: float = 1e-3
    weight_decay: float = 1e-6
    seed: int = 0
    px_chunk: int = 24
    adaptive: bool = True  # False: seeded random fixed patterns (ablation baseline)

    def __post_init__(self):
        if self.budget <= 0 or self.budget % self.n_batch != 0:
            raise DomainError("budget must be a positive multiple of n_batch")
        for name in ("n_batch", "n_sample", "n_bin", "n_peak", "channels", "px_chunk"):
            if getattr(self, name) <= 0:
                raise DomainError(f"{name} must be positive")
        if self.n_batch * self.channels < 2:
            raise DomainError("n_batch * channels must be >= 2 (ZNCC needs vectors of length 2)")
        if self.iters < 0 or self.learning_rate <= 0 or self.weight_decay < 0:
            raise DomainError("bad optimizer settings")


class SimulatedCapture:
    """Capture adapter that renders a ground-truth scene (the simulator's
    stand-in for the physical camera)."""

    def __init__(self, geom: RigGeometry, led: LedModel, scene: SceneTruth,
                 noise: NoiseModel | None = None, seed: int = 0):
        self.geom = geom
        self.led = led
        self.scene = scene
        self.noise = noise
        self._rng = spawn_rng(seed, DOMAIN["capture"])

    @property
    def alpha(self) -> np.ndarray:
        return self.scene.alpha

    @property
    def channels(self) -> int:
        return self.scene.channels

    def capture(self, pair: PatternPair) -> np.ndarray:
        return render_scene(self.geom, self.led, pair, self.scene, self.noise, self._rng)


class ReplayCapture:
    """Capture adapter that replays stored captures from a checkpoint."""

    def __init__(self, checkpoint_dir):
        d = Path(checkpoint_dir)
        files = sorted((d / "captures").glob("capture_*.f32"))
        if not files:
            raise DomainError(f"no captures under {d}")
        self._images = [load_raw(f)[0] for f in files]
        self._next = 0
        alpha_file = d / "alpha.f32"
        self.alpha = None
        if alpha_file.exists():
            self.alpha = load_raw(alpha_file)[0] > 0.5

    @property
    def channels(self) -> int:
        return self._images[0].shape[2]

    def capture(self, pair: PatternPair) -> np.ndarray:
        if self._next >= len(self._images):
            raise DomainError("replay exhausted: more captures requested than stored")
        img = self._images[self._next]
        self._next += 1
        return img


@dataclass
class AcquisitionState:
    """Everything the loop accumulates, on the valid-pixel set."""

    geom: RigGeometry
    led: LedModel
    config: AcquireConfig
    valid_mask: np.ndarray                 # (H, W) bool
    px_row: np.ndarray                     # (N,)
    px_col: np.ndarray                     # (N,)
    origins: np.ndarray                    # (N, 3)
    dirs: np.ndarray                       # (N, 3)
    z_min: np.ndarray                      # (N,)
    z_max: np.ndarray                      # (N,)
    models: list[PixelModels]
    patterns: list[PatternPair] = field(default_factory=list)
    captures: list[np.ndarray] = field(default_factory=list)
    peaksets: list[PeakSet] = field(default_factory=list)
    round_index: int = 0
    log: list[dict] = field(default_factory=list)
    entropy_rounds: list[float] = field(default_factory=list)

    @property
    def channels(self) -> int:
        return self.config.channels

    @property
    def n_pixels(self) -> int:
        return len(self.models)

    def captured_matrix(self) -> np.ndarray:
        """Physical measurements stacked as (N, J*C)."""
        if not self.captures:
            return np.zeros((self.n_pixels, 0))
        per = [img[self.px_row, self.px_col, :] for img in self.captures]
        return np.concatenate(per, axis=1)

    def entropy_image(self) -> np.ndarray:
        H, W = self.valid_mask.shape
        img = np.zeros((H, W))
        for i, m in enumerate(self.models):
            img[self.px_row[i], self.px_col[i]] = pmf_entropy(m.depth.pmf)
        return img


def init_state(geom: RigGeometry, led: LedModel, cfg: AcquireConfig,
               alpha: np.ndarray | None) -> AcquisitionState:
    origins, dirs, zr = pixel_grid_rays(geom)
    valid = np.isfinite(zr[..., 0])
    if alpha is not None:
        if alpha.shape != valid.shape:
            raise DomainError("alpha mask resolution mismatch")
        valid = valid & alpha
    rows, cols = np.nonzero(valid)
    models = []
    for r_, c_ in zip(rows, cols):
        ray = PixelRay(
            origin=origins[r_, c_], direction=dirs[r_, c_],
            pixel=(c_ + 0.5, r_ + 0.5), z_min=zr[r_, c_, 0], z_max=zr[r_, c_, 1],
        )
        models.append(init_models(ray, n_bin=cfg.n_bin, channels=cfg.channels))
    return AcquisitionState(
        geom=geom, led=led, config=cfg, valid_mask=valid,
        px_row=rows, px_col=cols,
        origins=origins[valid], dirs=dirs[valid],
        z_min=zr[..., 0][valid], z_max=zr[..., 1][valid],
        models=models,
    )


def _update_round(state: AcquisitionState, rng: np.random.Generator) -> None:
    """Step (a): fresh candidates from the current models, simulated under
    every captured pattern, scattered into the histograms."""
    cfg = state.config
    draws = [sample_scalars(m, cfg.n_sample, rng) for m in state.models]
    depths = np.stack([d["depth"] for d in draws])
    scalars = {
        k: np.stack([d[k] for d in draws])
        for k in draws[0] if k != "depth"
    }
    r = Renderer(state.geom, state.led)
    sims = simulate_candidates_batch(
        r, state.origins, state.dirs, depths, scalars, cfg.channels,
        state.patterns, px_chunk=cfg.px_chunk,
    )
    sims = sims.reshape(state.n_pixels, cfg.n_sample, -1)
    for i, m in enumerate(state.models):
        cand_arrays = {k: (depths[i] if k == "depth" else scalars[k][i])
                       for k in ["depth", *scalars.keys()]}
        update_models(m, sims[i], cand_arrays)
    state.entropy_rounds.append(
        float(np.median([pmf_entropy(m.depth.pmf) for m in state.models]))
    )


def run_acquisition(adapter, geom: RigGeometry, led: LedModel, cfg: AcquireConfig,
                    out_dir=None) -> AcquisitionState:
    """Run the full adaptive loop for ``cfg.budget`` patterns; returns the
    final state (histograms updated through the last capture).

    On adapter failure the partial state is checkpointed to ``out_dir`` (when
    given) before the error propagates.
    """
    alpha = getattr(adapter, "alpha", None)
    state = init_state(geom, led, cfg, alpha)
    if state.n_pixels == 0:
        raise DomainError("no valid pixels: volume not visible or alpha empty")
    rounds = cfg.budget // cfg.n_batch
    out = Path(out_dir) if out_dir is not None else None

    try:
        for rnd in range(rounds):
            t0 = time.time()
            state.round_index = rnd
            if state.patterns:
                _update_round(state, spawn_rng(cfg.seed, DOMAIN["sample"], rnd))
                if out is not None:
                    _save_entropy_image(state, out, rnd)
            if cfg.adaptive:
                rng_peaks = spawn_rng(cfg.seed, DOMAIN["peaks"], rnd)
                if state.patterns:
                    state.peaksets = [detect_peaks(m, cfg.n_peak, rng_peaks) for m in state.models]
                else:
                    state.peaksets = [sample_peakset(m, cfg.n_peak, rng_peaks) for m in state.models]
                ocfg = OptimConfig(
                    n_batch=cfg.n_batch, n_peak=cfg.n_peak, iters=cfg.iters,
                    learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay,
                    seed=derive_seed(cfg.seed, DOMAIN["patterns_init"], rnd),
                )
                pairs, info = optimize_next_patterns(state, ocfg)
            else:
                rng_fixed = spawn_rng(cfg.seed, DOMAIN["fixed_patterns"], rnd)
                pairs = [random_pattern_pair(geom, cfg.channels, rng_fixed)
                         for _ in range(cfg.n_batch)]
                info = {"eligible_pixels": 0}
            for pair in pairs:
                img = adapter.capture(pair)
                H, W = state.valid_mask.shape
                if img.shape != (H, W, cfg.channels):
                    raise DomainError(f"capture shape {img.shape} != {(H, W, cfg.channels)}")
                state.patterns.append(pair)
                state.captures.append(img)
                block = img[state.px_row, state.px_col, :]
                for i, m in enumerate(state.models):
                    m.append_measurements(block[i])
            state.log.append({
                "round": rnd,
                "loss_initial": info.get("loss_initial"),
                "loss_final": info.get("loss_final"),
                "eligible_pixels": info["eligible_pixels"],
                "entropy_median": state.entropy_rounds[-1] if state.entropy_rounds else None,
                "seconds": time.time() - t0,
            })
        _update_round(state, spawn_rng(cfg.seed, DOMAIN["sample"], rounds))
        if out is not None:
            _save_entropy_image(state, out, rounds)
            write_checkpoint(state, out)
    except Exception:
        if out is not None:
            write_checkpoint(state, out, partial=True)
        raise
    return state


def replay_state(geom: RigGeometry, led: LedModel, cfg: AcquireConfig,
                 checkpoint_dir) -> AcquisitionState:
    """Rebuild the final acquisition state from a checkpoint by replaying the
    model updates against the stored patterns and captures (the expensive
    pattern optimization is skipped; the histogram evolution is identical)."""
    d = Path(checkpoint_dir)
    light_files = sorted((d / "patterns").glob("pair_*_light.f32"))
    names = [f.name[: -len("_light.f32")] for f in light_files]
    pairs = [load_pattern_pair(d / "patterns", n) for n in names]
    caps = ReplayCapture(d)
    if len(pairs) != cfg.budget or len(caps._images) != cfg.budget:
        raise DomainError(
            f"incomplete checkpoint: {len(pairs)} patterns / "
            f"{len(caps._images)} captures, budget {cfg.budget}"
        )
    state = init_state(geom, led, cfg, caps.alpha)
    rounds = cfg.budget // cfg.n_batch
    for rnd in range(rounds):
        if state.patterns:
            _update_round(state, spawn_rng(cfg.seed, DOMAIN["sample"], rnd))
        for b in range(cfg.n_batch):
            img = caps.capture(pairs[rnd * cfg.n_batch + b])
            H, W = state.valid_mask.shape
            if img.shape != (H, W, cfg.channels):
                raise DomainError(f"stored capture shape {img.shape} mismatches config")
            state.patterns.append(pairs[rnd * cfg.n_batch + b])
            state.captures.append(img)
            block = img[state.px_row, state.px_col, :]
            for i, m in enumerate(state.models):
                m.append_measurements(block[i])
    _update_round(state, spawn_rng(cfg.seed, DOMAIN["sample"], rounds))
    return state


def entropy_trace(state: AcquisitionState) -> np.ndarray:
    """Median depth-histogram entropy after each model update (nats)."""
    if not state.entropy_rounds:
        raise DomainError("no completed update rounds")
    return np.asarray(state.entropy_rounds)


def _save_entropy_image(state: AcquisitionState, out: Path, rnd: int) -> None:
    d = out / "entropy"
    d.mkdir(parents=True, exist_ok=True)
    img = state.entropy_image()
    save_png(d / f"round_{rnd:03d}.png", img / max(np.log(state.config.n_bin), 1e-9))


def write_checkpoint(state: AcquisitionState, out_dir, partial: bool = False) -> None:
    """Persist patterns, captures, histogram dumps and the run log."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for j, pair in enumerate(state.patterns):
        save_pattern_pair(out / "patterns", f"pair_{j:03d}", pair)
    cap = out / "captures"
    cap.mkdir(parents=True, exist_ok=True)
    for j, img in enumerate(state.captures):
        save_raw(cap / f"capture_{j:03d}.f32", img)
    save_raw(out / "alpha.f32", state.valid_mask.astype(np.float64))
    hist_dir = out / "hist"
    hist_dir.mkdir(parents=True, exist_ok=True)
    with open(hist_dir / "final.jsonl", "w") as fh:
        for i, m in enumerate(state.models):
            for kind, h in m.histograms.items():
                fh.write(json.dumps({
                    "pixel": [int(state.px_row[i]), int(state.px_col[i])],
                    "kind": kind, "lo": h.lo, "hi": h.hi,
                    "scores": np.round(h.scores, 9).tolist(),
                }) + "\n")
    with open(out / "log.jsonl", "w") as fh:
        for entry in state.log:
            fh.write(json.dumps(entry) + "\n")
    meta = {
        "partial": partial,
        "budget": state.config.budget,
        "n_batch": state.config.n_batch,
        "n_sample": state.config.n_sample,
        "n_bin": state.config.n_bin,
        "n_peak": state.config.n_peak,
        "channels": state.config.channels,
        "seed": state.config.seed,
        "resolution": [int(state.valid_mask.shape[1]), int(state.valid_mask.shape[0])],
        "patterns_captured": len(state.patterns),
        "rig_hash": state.geom.fingerprint(),
        "entropy_rounds": state.entropy_rounds,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=1))
