"""Run configuration: JSON schema, strict validation, rig construction.

The config file is a single JSON document. Unknown keys are rejected at every
nesting level and all constraints are checked before any compute starts. One
root seed drives every random decision through counter-based splits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .rig import LedModel, Pose, RigGeometry, look_at
from .scene import SCENE_KINDS, NoiseModel

__all__ = ["RunConfig", "load_config", "build_rig", "build_led"]

_TOP_KEYS = {
    "seed", "out_dir", "channels", "rig", "led", "scene", "noise",
    "budget", "n_batch", "n_sample", "n_bin", "n_peak",
    "optimizer", "resolution", "finetune", "adaptive",
}
_RIG_KEYS = {
    "preset", "led_rows", "led_cols", "led_pitch", "led_plane_z",
    "mask_res", "mask_phys", "volume_edge", "cam_eye",
}
_LED_KEYS = {"emit_half_w", "angular_exponent", "kernel"}
_SCENE_KEYS = {"kind", "path"}
_NOISE_KEYS = {"noise_level", "quantize_bits"}
_OPT_KEYS = {"iters", "learning_rate", "weight_decay"}
_FINETUNE_KEYS = {"iters_per_level", "levels"}


def _reject_unknown(d: dict, allowed: set, where: str):
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/out"
    channels: int = 1
    rig: dict = field(default_factory=dict)
    led: dict = field(default_factory=dict)
    scene: dict = field(default_factory=lambda: {"kind": "wavy", "path": None})
    noise: dict = field(default_factory=lambda: {"noise_level": 0.0, "quantize_bits": None})
    budget: int = 30
    n_batch: int = 3
    n_sample: int = 600
    n_bin: int = 100
    n_peak: int = 3
    optimizer: dict = field(default_factory=lambda: {
        "iters": 200, "learning_rate": 1e-3, "weight_decay": 1e-6})
    resolution: tuple[int, int] = (32, 16)
    finetune: dict = field(default_factory=lambda: {"iters_per_level": 300, "levels": 1})
    adaptive: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        _reject_unknown(self.rig, _RIG_KEYS, "rig")
        _reject_unknown(self.led, _LED_KEYS, "led")
        _reject_unknown(self.scene, _SCENE_KEYS, "scene")
        _reject_unknown(self.noise, _NOISE_KEYS, "noise")
        _reject_unknown(self.optimizer, _OPT_KEYS, "optimizer")
        _reject_unknown(self.finetune, _FINETUNE_KEYS, "finetune")
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")
        if self.budget <= 0 or self.budget % self.n_batch != 0:
            raise ConfigError("budget must be a positive multiple of n_batch")
        for name in ("n_batch", "n_sample", "n_bin", "n_peak"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        w, h = self.resolution
        if w <= 0 or h <= 0:
            raise ConfigError("resolution must be positive")
        kind = self.scene.get("kind")
        if self.scene.get("path") is None and kind not in SCENE_KINDS:
            raise ConfigError(f"scene.kind must be one of {SCENE_KINDS}")
        if self.noise.get("noise_level", 0.0) < 0:
            raise ConfigError("noise_level must be >= 0")
        if self.optimizer.get("iters", 0) < 0:
            raise ConfigError("optimizer.iters must be >= 0")
        if self.optimizer.get("learning_rate", 1e-3) <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.optimizer.get("weight_decay", 0.0) < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.finetune.get("levels", 1) < 1 or self.finetune.get("iters_per_level", 0) < 0:
            raise ConfigError("finetune needs levels >= 1 and iters_per_level >= 0")

    def noise_model(self) -> NoiseModel:
        return NoiseModel(
            noise_level=float(self.noise.get("noise_level", 0.0)),
            quantize_bits=self.noise.get("quantize_bits"),
        )

    def with_overrides(self, **kw) -> "RunConfig":
        from dataclasses import replace

        return replace(self, **kw)


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    _reject_unknown(raw, _TOP_KEYS, "top-level")
    if "resolution" in raw:
        raw["resolution"] = tuple(raw["resolution"])
    return RunConfig(**raw)


def build_rig(cfg: RunConfig) -> RigGeometry:
    """Rig from the config's resolution and rig section.

    Presets: ``desk`` (default; compact LED baseline and mask) and ``full``
    (the paper-scale layout: 48x64 LED array 5 cm behind a 1920x1080 mask).
    Individual keys override preset values.
    """
    r = cfg.rig
    preset = r.get("preset", "desk")
    w, h = cfg.resolution
    if preset == "desk":
        defaults = dict(led_rows=2, led_cols=2, led_pitch=0.10,
                        led_plane_z=-0.15, mask_res=128, mask_phys=0.16)
    elif preset == "full":
        defaults = dict(led_rows=48, led_cols=64, led_pitch=0.005,
                        led_plane_z=-0.05, mask_res=None, mask_phys=None)
    else:
        raise ConfigError(f"unknown rig preset '{preset}'")
    led_rows = int(r.get("led_rows", defaults["led_rows"]))
    led_cols = int(r.get("led_cols", defaults["led_cols"]))
    if preset == "desk":
        # desk preset interprets its pitch default as total baseline width
        default_pitch = defaults["led_pitch"] / max(max(led_rows, led_cols) - 1, 1)
    else:
        default_pitch = defaults["led_pitch"]
    led_pitch = float(r.get("led_pitch", default_pitch))
    led_z = float(r.get("led_plane_z", defaults["led_plane_z"]))
    volume_edge = float(r.get("volume_edge", 0.15))
    volume_center = np.array([0.0, 0.0, 0.15])
    cam_eye = np.array(r.get("cam_eye", [0.0, 0.24, 0.0]), dtype=np.float64)
    dist = float(np.linalg.norm(volume_center - cam_eye))
    f_px = (min(w, h) / 2.0) * dist / (volume_edge / 2.0 * np.sqrt(3.0) * 1.15)
    kw = {}
    if preset == "full":
        if r.get("mask_res") is not None:
            kw = dict(mask_res_w=int(r["mask_res"]), mask_res_h=int(r["mask_res"]))
        if r.get("mask_phys") is not None:
            kw.update(mask_phys_w=float(r["mask_phys"]), mask_phys_h=float(r["mask_phys"]))
    else:
        mask_res = int(r.get("mask_res", defaults["mask_res"]))
        mask_phys = float(r.get("mask_phys", defaults["mask_phys"]))
        kw = dict(mask_res_w=mask_res, mask_res_h=mask_res,
                  mask_phys_w=mask_phys, mask_phys_h=mask_phys)
    return RigGeometry(
        led_rows=led_rows, led_cols=led_cols, led_pitch=led_pitch,
        led_plane_pose=Pose(np.eye(3), np.array([0.0, 0.0, led_z])),
        mask_plane_pose=Pose.identity(),
        fx=f_px, fy=f_px, cx=w / 2.0, cy=h / 2.0,
        cam_res_w=w, cam_res_h=h,
        cam_pose=look_at(cam_eye, volume_center),
        volume_center=volume_center, volume_edge=volume_edge,
        **kw,
    )


def build_led(cfg: RunConfig) -> LedModel:
    l = cfg.led
    kernel = l.get("kernel")
    kw = {}
    if kernel is not None:
        kw["kernel"] = np.asarray(kernel, dtype=np.float64)
    return LedModel(
        emit_half_w=float(l.get("emit_half_w", 0.001)),
        angular_exponent=float(l.get("angular_exponent", 1.0)),
        **kw,
    )
