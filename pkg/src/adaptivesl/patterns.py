"""Pattern containers and the sigmoid parameterization of free pattern variables.

A light pattern assigns each LED an intensity in [0, 1] per color channel; a
mask pattern assigns each LCD pixel a transmittance in [0, 1], shared across
channels. Optimization runs on unconstrained variables: light values pass
through a plain sigmoid, mask values are multiplied by a large scale first so
the realized transmittance is pushed toward binary.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import DomainError, ParseError
from .rawio import load_raw, save_png, save_raw
from .rig import RigGeometry

__all__ = [
    "LightPattern",
    "MaskPattern",
    "PatternPair",
    "FreePatternVars",
    "MASK_SCALE",
    "realize",
    "realize_grad",
    "init_free_vars",
    "random_pattern_pair",
    "save_pattern_pair",
    "load_pattern_pair",
]

MASK_SCALE = 1e8
LIGHT_INIT_SIGMA = 0.1
MASK_INIT_SIGMA = 1e-7


def _check_unit(values: np.ndarray, what: str):
    if np.any(values < 0.0) or np.any(values > 1.0):
        raise DomainError(f"{what} values must lie in [0, 1]")
    if not np.all(np.isfinite(values)):
        raise DomainError(f"{what} values must be finite")


@dataclass
class LightPattern:
    """LED intensities, shape (led_rows, led_cols, channels), each in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise DomainError("light pattern must be (rows, cols, channels)")
        _check_unit(self.values, "light pattern")

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass
class MaskPattern:
    """LCD transmittances, shape (mask_res_h, mask_res_w), each in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DomainError("mask pattern must be (rows, cols)")
        _check_unit(self.values, "mask pattern")


@dataclass
class PatternPair:
    light: LightPattern
    mask: MaskPattern


@dataclass
class FreePatternVars:
    """Unconstrained optimization variables for one pattern pair."""

    light_raw: np.ndarray
    mask_raw: np.ndarray
    mask_scale: float = MASK_SCALE

    def __post_init__(self):
        self.light_raw = np.asarray(self.light_raw, dtype=np.float64)
        self.mask_raw = np.asarray(self.mask_raw, dtype=np.float64)
        if not (np.all(np.isfinite(self.light_raw)) and np.all(np.isfinite(self.mask_raw))):
            raise DomainError("free pattern variables must be finite")


def realize(vars: FreePatternVars) -> PatternPair:
    """Map free variables to a physical pattern pair via sigmoids."""
    light = expit(vars.light_raw)
    mask = expit(vars.mask_scale * vars.mask_raw)
    return PatternPair(LightPattern(light), MaskPattern(mask))


def realize_grad(vars: FreePatternVars, upstream_light: np.ndarray,
                 upstream_mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Chain upstream pattern-space gradients back to the free variables."""
    sl = expit(vars.light_raw)
    sm = expit(vars.mask_scale * vars.mask_raw)
    g_light = np.asarray(upstream_light) * sl * (1.0 - sl)
    g_mask = np.asarray(upstream_mask) * vars.mask_scale * sm * (1.0 - sm)
    return g_light, g_mask


def init_free_vars(geom: RigGeometry, channels: int, rng: np.random.Generator,
                   light_sigma: float = LIGHT_INIT_SIGMA,
                   mask_sigma: float = MASK_INIT_SIGMA) -> FreePatternVars:
    """Fresh variables: small zero-mean noise, mask noise sized to straddle
    the sigmoid transition at the default mask scale."""
    light_raw = rng.normal(0.0, light_sigma, size=(geom.led_rows, geom.led_cols, channels))
    mask_raw = rng.normal(0.0, mask_sigma, size=(geom.mask_res_h, geom.mask_res_w))
    return FreePatternVars(light_raw=light_raw, mask_raw=mask_raw)


def random_pattern_pair(geom: RigGeometry, channels: int,
                        rng: np.random.Generator) -> PatternPair:
    """A realized random pattern pair (the fixed, non-adaptive baseline)."""
    return realize(init_free_vars(geom, channels, rng))


def save_pattern_pair(directory, name: str, pair: PatternPair,
                      export_png: bool = True) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_raw(d / f"{name}_light.f32", pair.light.values,
             channels=pair.light.channels, kind="light")
    save_raw(d / f"{name}_mask.f32", pair.mask.values, channels=1, kind="mask")
    if export_png:
        save_png(d / f"{name}_light.png", pair.light.values)
        save_png(d / f"{name}_mask.png", pair.mask.values)


def load_pattern_pair(directory, name: str) -> PatternPair:
    d = Path(directory)
    light, lm = load_raw(d / f"{name}_light.f32")
    mask, mm = load_raw(d / f"{name}_mask.f32")
    if lm.get("kind") != "light" or mm.get("kind") != "mask":
        raise ParseError(f"pattern sidecars for '{name}' carry wrong kinds")
    return PatternPair(LightPattern(light), MaskPattern(mask))
