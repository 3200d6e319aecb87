"""Adaptive spatial-angular structured-light simulator.

End-to-end pipeline on synthetic scenes: forward rendering under light/mask
pattern pairs, per-pixel histogram probability models over depth and
reflectance, differentiable optimization of the next pattern batch, and
render-and-compare fine-tuning of depth plus GGX parameter maps.

Submodule imports are lazy so the CLI can configure threading before numpy
loads.
"""

import importlib

__version__ = "0.1.0"

_EXPORTS = {
    "DomainError": ".errors", "ParseError": ".errors", "ConfigError": ".errors",
    "Pose": ".rig", "RigGeometry": ".rig", "LedModel": ".rig", "PixelRay": ".rig",
    "camera_ray": ".rig", "depth_range": ".rig", "mask_hit": ".rig",
    "default_rig": ".rig", "desk_rig": ".rig",
    "LightPattern": ".patterns", "MaskPattern": ".patterns", "PatternPair": ".patterns",
    "FreePatternVars": ".patterns", "realize": ".patterns", "realize_grad": ".patterns",
    "GgxParams": ".brdf", "Candidate": ".brdf", "eval_ggx": ".brdf",
    "simulate_measurement": ".render", "measurement_grad_patterns": ".render",
    "render_scene": ".render", "Renderer": ".render",
    "Histogram": ".prob", "PixelModels": ".prob", "init_models": ".prob",
    "sample_candidate": ".prob", "zncc": ".prob", "update_models": ".prob",
    "map_estimate": ".prob",
    "PeakSet": ".patternopt", "OptimConfig": ".patternopt", "detect_peaks": ".patternopt",
    "class_likelihood": ".patternopt", "cross_entropy_loss": ".patternopt",
    "optimize_next_patterns": ".patternopt",
    "AcquireConfig": ".acquire", "AcquisitionState": ".acquire",
    "SimulatedCapture": ".acquire", "ReplayCapture": ".acquire",
    "run_acquisition": ".acquire", "entropy_trace": ".acquire",
    "ReconMaps": ".finetune", "FinetuneSchedule": ".finetune",
    "init_recon": ".finetune", "finetune": ".finetune", "relight": ".finetune",
    "SceneTruth": ".scene", "NoiseModel": ".scene", "gen_scene": ".scene",
    "save_scene": ".scene", "load_scene": ".scene",
    "DepthReport": ".metrics", "depth_metrics": ".metrics", "image_metrics": ".metrics",
    "RunConfig": ".config", "load_config": ".config",
}


def __getattr__(name):
    if name in _EXPORTS:
        module = importlib.import_module(_EXPORTS[name], __name__)
        return getattr(module, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(set(globals()) | set(_EXPORTS))
