"""Command-line entry point: scene generation, acquisition, fine-tuning,
evaluation, and one-axis ablation sweeps.

Exit codes: 0 success, 2 usage/config error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

__all__ = ["main"]

_ABLATE_AXES = ("budget", "n_sample", "n_batch", "n_peak", "n_bin", "resolution")


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="adaptivesl",
        description="Adaptive spatial-angular structured-light simulator.",
    )
    p.add_argument("--threads", type=int, default=None,
                   help="cap BLAS/OpenMP threads (set before numpy loads)")
    sub = p.add_subparsers(dest="command", required=True)

    sg = sub.add_parser("scene-gen", help="generate and save a synthetic scene")
    sg.add_argument("--config", required=True)
    sg.add_argument("--out", required=True)
    sg.add_argument("--seed", type=int, default=None)

    ac = sub.add_parser("acquire", help="run the adaptive acquisition loop")
    ac.add_argument("--config", required=True)
    ac.add_argument("--out", required=True)
    ac.add_argument("--seed", type=int, default=None)
    ac.add_argument("--scene", default=None,
                    help="scene directory (defaults to generating per config)")
    ac.add_argument("--replay", default=None,
                    help="replay captures from an existing checkpoint directory")

    ft = sub.add_parser("finetune", help="initialize and refine reconstruction maps")
    ft.add_argument("--config", required=True)
    ft.add_argument("--checkpoint", required=True)
    ft.add_argument("--out", required=True)
    ft.add_argument("--seed", type=int, default=None)

    ev = sub.add_parser("eval", help="depth metrics plus held-out relighting metrics")
    ev.add_argument("--config", required=True)
    ev.add_argument("--recon", required=True)
    ev.add_argument("--scene", required=True)
    ev.add_argument("--out", required=True, help="JSON report path")
    ev.add_argument("--seed", type=int, default=None)
    ev.add_argument("--n-holdout", type=int, default=3)

    ab = sub.add_parser("ablate", help="sweep one config axis, emit CSV + plot")
    ab.add_argument("--config", required=True)
    ab.add_argument("--axis", required=True, choices=_ABLATE_AXES)
    ab.add_argument("--values", required=True,
                    help="comma-separated values, e.g. 12,24,36")
    ab.add_argument("--out", required=True)
    ab.add_argument("--seed", type=int, default=None)
    ab.add_argument("--repeats", type=int, default=1)
    return p


def _apply_seed(cfg, seed):
    return cfg if seed is None else cfg.with_overrides(seed=seed)


def _load(args):
    from .config import load_config

    return _apply_seed(load_config(args.config), args.seed)


def cmd_scene_gen(args) -> int:
    import numpy as np

    from .config import build_rig
    from .scene import gen_scene, save_scene
    from .seeding import DOMAIN, spawn_rng
    from .rawio import save_png

    cfg = _load(args)
    geom = build_rig(cfg)
    rng = spawn_rng(cfg.seed, DOMAIN["scene"])
    scene = gen_scene(cfg.scene["kind"], geom, rng, cfg.channels)
    out = Path(args.out)
    save_scene(out, scene, geom)
    zspan = scene.depth[scene.alpha]
    depth_vis = (scene.depth - zspan.min()) / max(np.ptp(zspan), 1e-9)
    save_png(out / "depth.png", depth_vis * scene.alpha)
    save_png(out / "alpha.png", scene.alpha.astype(float))
    print(f"scene '{cfg.scene['kind']}' -> {out} "
          f"({int(scene.alpha.sum())} valid pixels)")
    return 0


def _acquire_config(cfg):
    from .acquire import AcquireConfig

    return AcquireConfig(
        budget=cfg.budget, n_batch=cfg.n_batch, n_sample=cfg.n_sample,
        n_bin=cfg.n_bin, n_peak=cfg.n_peak, channels=cfg.channels,
        iters=cfg.optimizer["iters"],
        learning_rate=cfg.optimizer["learning_rate"],
        weight_decay=cfg.optimizer["weight_decay"],
        seed=cfg.seed, adaptive=cfg.adaptive,
    )


def _load_or_gen_scene(cfg, geom, scene_dir):
    from .errors import ConfigError
    from .scene import gen_scene, load_scene
    from .seeding import DOMAIN, spawn_rng

    src = scene_dir or cfg.scene.get("path")
    if src is not None:
        scene = load_scene(src)
        if scene.resolution != tuple(cfg.resolution):
            raise ConfigError(
                f"scene resolution {scene.resolution} != config {cfg.resolution}"
            )
        if scene.channels != cfg.channels:
            raise ConfigError("scene channel count differs from config")
        return scene
    return gen_scene(cfg.scene["kind"], geom, spawn_rng(cfg.seed, DOMAIN["scene"]),
                     cfg.channels)


def cmd_acquire(args) -> int:
    from .acquire import ReplayCapture, SimulatedCapture, run_acquisition
    from .config import build_led, build_rig

    cfg = _load(args)
    geom = build_rig(cfg)
    led = build_led(cfg)
    if args.replay:
        adapter = ReplayCapture(args.replay)
    else:
        scene = _load_or_gen_scene(cfg, geom, args.scene)
        adapter = SimulatedCapture(geom, led, scene, cfg.noise_model(), seed=cfg.seed)
    state = run_acquisition(adapter, geom, led, _acquire_config(cfg), out_dir=args.out)
    print(f"captured {len(state.patterns)} patterns over "
          f"{len(state.log)} rounds -> {args.out}")
    print(f"median depth entropy: {state.entropy_rounds[0]:.3f} -> "
          f"{state.entropy_rounds[-1]:.3f} nats")
    return 0


def cmd_finetune(args) -> int:
    import numpy as np

    from .acquire import replay_state
    from .config import build_led, build_rig
    from .finetune import FinetuneSchedule, finetune, init_recon
    from .rawio import save_png
    from .scene import save_scene

    cfg = _load(args)
    geom = build_rig(cfg)
    led = build_led(cfg)
    state = replay_state(geom, led, _acquire_config(cfg), args.checkpoint)
    recon = init_recon(state)
    schedule = FinetuneSchedule(
        iters_per_level=cfg.finetune["iters_per_level"],
        levels=cfg.finetune["levels"],
        learning_rate=cfg.optimizer["learning_rate"],
        weight_decay=cfg.optimizer["weight_decay"],
    )
    recon = finetune(recon, state, schedule)
    out = Path(args.out)
    save_scene(out, recon, recon.geom)
    zs = recon.depth[recon.alpha]
    if zs.size:
        save_png(out / "depth.png",
                 (recon.depth - zs.min()) / max(np.ptp(zs), 1e-9) * recon.alpha)
    save_png(out / "diffuse.png", recon.diffuse)
    save_png(out / "specular.png", recon.specular)
    save_png(out / "roughness.png",
             np.stack([recon.alpha_x, recon.alpha_y], axis=-1) / 0.5)
    (out / "loss_history.json").write_text(json.dumps(recon.loss_history, indent=1))
    for level in recon.loss_history:
        print(f"level {level['level']}: loss {level['initial']:.4g} -> {level['final']:.4g}")
    print(f"reconstruction -> {out}")
    return 0


def cmd_eval(args) -> int:
    import numpy as np

    from .config import build_led, build_rig
    from .errors import DomainError
    from .finetune import ReconMaps, relight
    from .metrics import depth_metrics, image_metrics
    from .patterns import random_pattern_pair
    from .render import render_scene
    from .scene import load_scene
    from .seeding import DOMAIN, spawn_rng

    cfg = _load(args)
    geom = build_rig(cfg)
    led = build_led(cfg)
    recon_scene = load_scene(args.recon)
    truth = load_scene(args.scene)
    if recon_scene.resolution != truth.resolution:
        raise DomainError(
            f"recon {recon_scene.resolution} vs scene {truth.resolution} resolution"
        )
    recon = ReconMaps(**{k: getattr(recon_scene, k) for k in (
        "depth", "alpha", "diffuse", "specular", "alpha_x", "alpha_y",
        "normal_theta", "normal_phi", "tangent")}, geom=geom, led=led)
    mask = recon.alpha & truth.alpha
    depth = depth_metrics(recon.depth, truth.depth, mask)
    relights = []
    for k in range(args.n_holdout):
        rng = spawn_rng(cfg.seed, DOMAIN["holdout"], k)
        pair = random_pattern_pair(geom, cfg.channels, rng)
        ours = relight(recon, pair)
        ref = render_scene(geom, led, pair, truth, noise=None)
        relights.append(image_metrics(ours, ref, mask))
    report = {
        "depth": depth.as_dict(),
        "relight": relights,
        "relight_mean": {
            "psnr": float(np.mean([r["psnr"] for r in relights])),
            "ssim": float(np.mean([r["ssim"] for r in relights])),
        },
    }
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(report, indent=1))
    print(json.dumps(report, indent=1))
    return 0


def cmd_ablate(args) -> int:
    import csv

    import numpy as np

    from .acquire import SimulatedCapture, run_acquisition
    from .config import build_led, build_rig
    from .errors import ConfigError
    from .finetune import init_recon
    from .metrics import depth_metrics
    from .scene import gen_scene
    from .seeding import DOMAIN, derive_seed, spawn_rng

    cfg = _load(args)
    try:
        values = [int(v) for v in args.values.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"--values must be comma-separated integers: {e}") from e
    if not values:
        raise ConfigError("--values is empty")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for vi, value in enumerate(values):
        for rep in range(args.repeats):
            seed = derive_seed(cfg.seed, 100 + _ABLATE_AXES.index(args.axis), vi, rep)
            run_cfg = cfg.with_overrides(seed=seed)
            if args.axis == "resolution":
                run_cfg = run_cfg.with_overrides(resolution=(value, value))
            else:
                run_cfg = run_cfg.with_overrides(**{args.axis: value})
            run_cfg.validate()
            geom = build_rig(run_cfg)
            led = build_led(run_cfg)
            scene = gen_scene(run_cfg.scene["kind"], geom,
                              spawn_rng(seed, DOMAIN["scene"]), run_cfg.channels)
            adapter = SimulatedCapture(geom, led, scene, run_cfg.noise_model(), seed=seed)
            state = run_acquisition(adapter, geom, led, _acquire_config(run_cfg))
            recon = init_recon(state)
            rep_metrics = depth_metrics(recon.depth, scene.depth, state.valid_mask)
            rows.append({
                "axis": args.axis, "value": value, "repeat": rep, "seed": seed,
                **rep_metrics.as_dict(),
            })
            print(f"{args.axis}={value} repeat={rep}: "
                  f"rmse={rep_metrics.rmse_mm:.3f}mm inliers={rep_metrics.inlier_pct:.1f}%")

    csv_path = out / f"ablate_{args.axis}.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    med = [np.median([r["rmse_mm"] for r in rows if r["value"] == v]) for v in values]
    inl = [np.median([r["inlier_pct"] for r in rows if r["value"] == v]) for v in values]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    axes[0].plot(values, med, "o-")
    axes[0].set_xlabel(args.axis)
    axes[0].set_ylabel("median depth RMSE (mm)")
    axes[1].plot(values, inl, "o-")
    axes[1].set_xlabel(args.axis)
    axes[1].set_ylabel("median inliers (%)")
    fig.tight_layout()
    fig.savefig(out / f"ablate_{args.axis}.png", dpi=130)
    plt.close(fig)
    print(f"wrote {csv_path}")
    return 0


_COMMANDS = {
    "scene-gen": cmd_scene_gen,
    "acquire": cmd_acquire,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMEXPR_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        return _COMMANDS[args.command](args)
    except SystemExit:
        raise
    except Exception as e:
        from .errors import ConfigError, DomainError, ParseError

        if isinstance(e, (ConfigError, DomainError, ParseError)):
            print(f"error: {e}", file=sys.stderr)
            return 2
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
