"""Per-pixel histogram probability models over depth and reflectance.

Each scalar (depth plus every GGX parameter) gets its own histogram over a
fixed range. A bin stores the best score seen for candidates falling in it:
ZNCC against the accumulated physical measurements for depth, inverse mean-L1
for reflectance. Normalization maps scores to a probability mass function;
ZNCC scores are first shifted by (s+1)/2 since they can be negative, and a
floor keeps every bin reachable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .brdf import ALPHA_MAX, ALPHA_MIN, THETA_MAX, BRDF_SCALAR_KEYS, Candidate, GgxParams
from .errors import DomainError
from .rig import PixelRay

__all__ = [
    "Histogram",
    "PixelModels",
    "default_brdf_ranges",
    "init_models",
    "sample_candidate",
    "sample_scalars",
    "zncc",
    "zncc_matrix",
    "update_models",
    "map_estimate",
    "pmf_entropy",
    "N_BIN_DEFAULT",
]

N_BIN_DEFAULT = 100
N_SAMPLE_DEFAULT = 600
SCORE_FLOOR = 1e-6   # pmf floor, keeps every bin reachable
L1_EPS = 1e-4        # inverse-L1 regularizer
SUBDIV = 5           # sub-bins per bin in MAP refinement
ZNCC_BETA = 12.0     # Boltzmann sharpness of the depth pmf (see normalize())
_CONST_NORM = 1e-12  # centered-norm threshold for the constant-vector convention


def default_brdf_ranges(channels: int = 1) -> dict[str, tuple[float, float]]:
    """Histogram ranges for every GGX scalar, in canonical order."""
    ranges: dict[str, tuple[float, float]] = {}
    for c in range(channels):
        ranges[f"diffuse_{c}"] = (0.0, 1.0)
    for c in range(channels):
        ranges[f"specular_{c}"] = (0.0, 1.0)
    ranges["alpha_x"] = (ALPHA_MIN, ALPHA_MAX)
    ranges["alpha_y"] = (ALPHA_MIN, ALPHA_MAX)
    ranges["normal_theta"] = (0.0, THETA_MAX)
    ranges["normal_phi"] = (-np.pi, np.pi)
    ranges["tangent_angle"] = (0.0, np.pi)
    return ranges


@dataclass
class Histogram:
    """Score histogram over [lo, hi] with a cached normalized pmf."""

    lo: float
    hi: float
    scores: np.ndarray
    kind: str = "zncc"  # "zncc" (shift (s+1)/2) or "inv_l1" (identity)
    pmf: np.ndarray = field(default=None)

    def __post_init__(self):
        if not self.lo < self.hi:
            raise DomainError(f"histogram range [{self.lo}, {self.hi}] is empty")
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.pmf is None:
            self.normalize()

    @property
    def n_bin(self) -> int:
        return self.scores.shape[0]

    @property
    def bin_width(self) -> float:
        return (self.hi - self.lo) / self.n_bin

    def centers(self) -> np.ndarray:
        return self.lo + (np.arange(self.n_bin) + 0.5) * self.bin_width

    def bin_of(self, value) -> np.ndarray:
        idx = np.floor((np.asarray(value) - self.lo) / self.bin_width).astype(np.int64)
        return np.clip(idx, 0, self.n_bin - 1)

    def shifted_scores(self) -> np.ndarray:
        """Scores mapped to non-negative pmf weights.

        ZNCC scores (which can be negative) go through a Boltzmann map
        exp(beta (s - max s)) so the distribution actually concentrates as the
        best bin separates from the rest; inverse-L1 scores are already
        positive and are used as-is.
        """
        if self.kind == "zncc":
            return np.exp(ZNCC_BETA * (self.scores - self.scores.max()))
        return self.scores

    def normalize(self) -> None:
        w = np.maximum(self.shifted_scores(), SCORE_FLOOR)
        self.pmf = w / w.sum()

    def scatter_max(self, bins: np.ndarray, values: np.ndarray) -> None:
        """Replace each hit bin's score with the max candidate score in it;
        unhit bins keep their previous score."""
        acc = np.full(self.n_bin, -np.inf)
        np.maximum.at(acc, bins, values)
        hit = np.isfinite(acc)
        self.scores[hit] = acc[hit]
        self.normalize()

    def sample_values(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Bin via the pmf, then uniform within the bin."""
        u = rng.random(n)
        cdf = np.cumsum(self.pmf)
        bins = np.searchsorted(cdf, u, side="right")
        bins = np.minimum(bins, self.n_bin - 1)
        frac = rng.random(n)
        return self.lo + (bins + frac) * self.bin_width


@dataclass
class PixelModels:
    """All histograms plus the accumulated physical measurement vector for one
    pixel. ``valid`` is False when the pixel's ray misses the valid volume."""

    ray: PixelRay
    depth: Histogram
    brdf: dict[str, Histogram]
    measurements: np.ndarray
    channels: int = 1
    valid: bool = True

    @property
    def histograms(self) -> dict[str, Histogram]:
        return {"depth": self.depth, **self.brdf}

    def append_measurements(self, values: np.ndarray) -> None:
        v = np.asarray(values, dtype=np.float64).ravel()
        if v.shape[0] != self.channels:
            raise DomainError("measurement block must hold one value per channel")
        self.measurements = np.concatenate([self.measurements, v])

    @property
    def n_captured(self) -> int:
        return self.measurements.shape[0] // self.channels


def init_models(
    ray: PixelRay,
    brdf_ranges: dict[str, tuple[float, float]] | None = None,
    n_bin: int = N_BIN_DEFAULT,
    channels: int = 1,
) -> PixelModels:
    """Uniform models over the pixel's depth interval and the BRDF boxes.
    A ray without a depth interval yields an invalid pixel."""
    if brdf_ranges is None:
        brdf_ranges = default_brdf_ranges(channels)
    if not ray.has_interval:
        dummy = Histogram(0.0, 1.0, np.zeros(n_bin))
        return PixelModels(ray=ray, depth=dummy, brdf={}, measurements=np.zeros(0),
                           channels=channels, valid=False)
    depth = Histogram(ray.z_min, ray.z_max, np.zeros(n_bin), kind="zncc")
    brdf = {
        name: Histogram(lo, hi, np.zeros(n_bin), kind="inv_l1")
        for name, (lo, hi) in brdf_ranges.items()
    }
    return PixelModels(ray=ray, depth=depth, brdf=brdf,
                       measurements=np.zeros(0), channels=channels)


def sample_scalars(models: PixelModels, n: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Draw ``n`` independent values from every histogram (depth first, then
    BRDF parameters in canonical order)."""
    if not models.valid:
        raise DomainError("cannot sample an invalid pixel")
    out = {"depth": models.depth.sample_values(n, rng)}
    for name, hist in models.brdf.items():
        out[name] = hist.sample_values(n, rng)
    return out


def sample_candidate(models: PixelModels, rng: np.random.Generator) -> Candidate:
    """One candidate: every scalar drawn independently from its histogram."""
    draws = sample_scalars(models, 1, rng)
    scalars = {k: float(v[0]) for k, v in draws.items() if k != "depth"}
    return Candidate(
        depth=float(draws["depth"][0]),
        brdf=GgxParams.from_scalars(scalars, models.channels),
    )


def zncc(a: np.ndarray, b: np.ndarray) -> float:
    """Zero-normalized cross-correlation of two equal-length vectors (>= 2
    entries). Constant vectors correlate to 0 by convention."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DomainError(f"zncc length mismatch: {a.shape} vs {b.shape}")
    if a.shape[0] < 2:
        raise DomainError("zncc needs vectors of length >= 2")
    ac = a - a.mean()
    bc = b - b.mean()
    na = np.linalg.norm(ac)
    nb = np.linalg.norm(bc)
    if na < _CONST_NORM or nb < _CONST_NORM:
        return 0.0
    return float(np.dot(ac, bc) / (na * nb))


def zncc_matrix(ref: np.ndarray, sims: np.ndarray) -> np.ndarray:
    """ZNCC of ``ref`` (L,) against each row of ``sims`` (..., L)."""
    ref = np.asarray(ref, dtype=np.float64)
    sims = np.asarray(sims, dtype=np.float64)
    if ref.shape[-1] != sims.shape[-1]:
        raise DomainError("zncc length mismatch")
    if ref.shape[-1] < 2:
        raise DomainError("zncc needs vectors of length >= 2")
    rc = ref - ref.mean()
    nr = np.linalg.norm(rc)
    sc = sims - sims.mean(axis=-1, keepdims=True)
    ns = np.linalg.norm(sc, axis=-1)
    if nr < _CONST_NORM:
        return np.zeros(sims.shape[:-1])
    good = ns > _CONST_NORM
    out = np.zeros(sims.shape[:-1])
    np.divide(sc @ rc, ns * nr, out=out, where=good)
    return out


def _scalar_arrays(cands, channels: int) -> dict[str, np.ndarray]:
    """Accept a candidate list or a dict of per-scalar arrays."""
    if isinstance(cands, dict):
        return {k: np.asarray(v, dtype=np.float64) for k, v in cands.items()}
    keys = ["depth"] + BRDF_SCALAR_KEYS(channels)
    out = {k: np.empty(len(cands)) for k in keys}
    for i, cand in enumerate(cands):
        out["depth"][i] = cand.depth
        for k, v in cand.brdf.scalars().items():
            out[k][i] = v
    return out


def update_models(models: PixelModels, sim: np.ndarray, cands) -> PixelModels:
    """Monte-Carlo histogram update from ``n_sample`` candidates.

    ``sim`` holds one simulated measurement vector per candidate, same length
    as the accumulated physical vector. Depth bins keep the best ZNCC score of
    their candidates; BRDF bins the best inverse mean-L1 score. All pmfs are
    renormalized. Returns ``models`` (updated in place).
    """
    sim = np.asarray(sim, dtype=np.float64)
    values = _scalar_arrays(cands, models.channels)
    n = values["depth"].shape[0]
    if sim.shape != (n, models.measurements.shape[0]):
        raise DomainError(
            f"sim shape {sim.shape} does not match {n} candidates x "
            f"{models.measurements.shape[0]} measurements"
        )
    scores_z = zncc_matrix(models.measurements, sim)
    models.depth.scatter_max(models.depth.bin_of(values["depth"]), scores_z)

    l1 = np.abs(sim - models.measurements).sum(axis=-1) / models.measurements.shape[0]
    scores_l1 = 1.0 / (l1 + L1_EPS)
    for name, hist in models.brdf.items():
        hist.scatter_max(hist.bin_of(values[name]), scores_l1)
    return models


def map_estimate(models: PixelModels, score_fn, rng: np.random.Generator) -> Candidate:
    """MAP-style refinement: for each histogram, re-score the 5 sub-bins of its
    best bin (other parameters held at their coarse argmax-bin centers via
    ``score_fn(scalars: dict, kind: str) -> float``), pick the best sub-bin and
    draw uniformly inside it. Ties break to the lowest index."""
    if not models.valid:
        raise DomainError("map_estimate on an invalid pixel")
    if models.n_captured < 1:
        raise DomainError("map_estimate needs at least one captured pattern")
    hists = models.histograms
    coarse = {
        name: float(h.centers()[int(np.argmax(h.scores))]) for name, h in hists.items()
    }
    refined: dict[str, float] = {}
    for name, h in hists.items():
        best_bin = int(np.argmax(h.scores))
        sub_w = h.bin_width / SUBDIV
        base = h.lo + best_bin * h.bin_width
        sub_centers = base + (np.arange(SUBDIV) + 0.5) * sub_w
        sub_scores = np.empty(SUBDIV)
        for k, center in enumerate(sub_centers):
            trial = dict(coarse)
            trial[name] = float(center)
            sub_scores[k] = score_fn(trial, h.kind)
        k_best = int(np.argmax(sub_scores))
        refined[name] = base + (k_best + rng.random()) * sub_w
    depth = refined.pop("depth")
    return Candidate(depth=depth, brdf=GgxParams.from_scalars(refined, models.channels))


def score_against(physical: np.ndarray, sim: np.ndarray, kind: str) -> float:
    """The per-candidate score the histograms store: ZNCC for depth,
    inverse mean-L1 for reflectance."""
    if kind == "zncc":
        return zncc(physical, sim)
    physical = np.asarray(physical, dtype=np.float64).ravel()
    sim = np.asarray(sim, dtype=np.float64).ravel()
    l1 = np.abs(sim - physical).sum() / physical.shape[0]
    return float(1.0 / (l1 + L1_EPS))


def pmf_entropy(pmf: np.ndarray) -> float:
    """Shannon entropy in nats."""
    p = np.asarray(pmf, dtype=np.float64)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())
