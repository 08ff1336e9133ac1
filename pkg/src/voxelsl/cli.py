"""Command-line pipeline: gen-patterns -> simulate -> train -> eval -> export-depth-vis.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, RunConfig, load_run_config, parse_run_config
from .geometry import CameraModel, ProjectorModel
from .losses import write_loss_csv
from .metrics import DepthMap, depth_to_disparity, evaluate
from .patterns import Pattern, default_pattern_set, extended_pattern_set, reduce_pattern_set
from .simulator import RadiometricParams, analytic_scene, default_near, simulate_captures

log = logging.getLogger("voxelsl")

PATTERN_MANIFEST = "patterns.json"
CAPTURE_MANIFEST = "captures.json"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- pattern directories -----------------------------------------------------


def save_patterns(out_dir, patterns: list[Pattern], seed: int) -> dict:
    out = Path(out_dir)
    entries = []
    for i, p in enumerate(patterns):
        name = f"pat_{i:03d}.pgm"
        io.write_gray(out / name, p.image, bits=8)
        entries.append({"file": name, "cell": p.cell, "seed": p.seed, "sha256": io.sha256_file(out / name)})
    manifest = {
        "kind": "patterns",
        "width": int(patterns[0].width),
        "height": int(patterns[0].height),
        "seed": int(seed),
        "patterns": entries,
    }
    io.write_json(out / PATTERN_MANIFEST, manifest)
    return manifest


def load_patterns(pat_dir) -> tuple[list[Pattern], dict]:
    pat_dir = Path(pat_dir)
    mpath = pat_dir / PATTERN_MANIFEST
    if not mpath.exists():
        raise DataError(f"{pat_dir}: missing {PATTERN_MANIFEST}")
    manifest = json.loads(mpath.read_text())
    pats = []
    for e in manifest["patterns"]:
        img = io.read_gray(pat_dir / e["file"]).astype(np.float32)
        pats.append(Pattern(img, int(e["cell"]), int(e["seed"])))
    return pats, manifest


def load_captures(cap_dir) -> tuple[np.ndarray, dict]:
    cap_dir = Path(cap_dir)
    mpath = cap_dir / CAPTURE_MANIFEST
    if not mpath.exists():
        raise DataError(f"{cap_dir}: missing {CAPTURE_MANIFEST}")
    manifest = json.loads(mpath.read_text())
    imgs = [io.read_gray(cap_dir / e["file"]) for e in manifest["captures"]]
    if len({im.shape for im in imgs}) != 1:
        raise DataError("captures have differing sizes")
    return np.stack(imgs), manifest


# -- subcommands ---------------------------------------------------------------


def cmd_gen_patterns(args) -> int:
    if args.count > 9 or args.count < 1:
        raise UsageError("--count must be between 1 and 9")
    if args.count == 6:
        pats = default_pattern_set(args.width, args.height, args.seed)
    else:
        pats = reduce_pattern_set(extended_pattern_set(args.width, args.height, args.seed), args.count)
    save_patterns(args.out, pats, args.seed)
    print(f"wrote {len(pats)} patterns to {args.out}")
    return 0


def _rig(cfg: RunConfig | None, rig: dict | None) -> tuple[CameraModel, ProjectorModel]:
    from .config import CameraSpec, ProjectorSpec

    if cfg is not None and cfg.camera is not None:
        cam = cfg.camera.build()
    elif rig is not None:
        cam = CameraSpec.model_validate(rig["camera"]).build()
    else:
        cam = (cfg or RunConfig()).camera_model()
    if cfg is not None and cfg.projector is not None:
        proj = cfg.projector.build()
    elif rig is not None:
        proj = ProjectorSpec.model_validate(rig["projector"]).build()
    else:
        proj = (cfg or RunConfig()).projector_model()
    return cam, proj


def cmd_simulate(args) -> int:
    from .config import CameraSpec, ProjectorSpec

    cfg = load_run_config(args.config) if args.config else parse_run_config({})
    cam, proj = _rig(cfg, None)
    try:
        params = json.loads(args.params) if args.params else {}
    except json.JSONDecodeError as exc:
        raise DataError(f"--params is not valid JSON: {exc}") from None
    pats, pat_manifest = load_patterns(args.patterns)
    if (pats[0].width, pats[0].height) != (proj.intrinsics.width, proj.intrinsics.height):
        raise DataError("pattern size does not match the projector resolution")
    scene = analytic_scene(args.scene, params, cam)
    rad = cfg.radiometry.build()
    if args.noise is not None:
        rad = RadiometricParams(rad.B0, rad.F0, args.noise, rad.quantize_bits)
    sim = simulate_captures(scene, pats, cam, proj, rad, seed=args.seed)
    out = Path(args.out)
    entries = []
    for i, img in enumerate(sim.images):
        name = f"cap_{i:03d}.{args.format}"
        io.write_gray(out / name, img, bits=args.bits)
        entries.append({"file": name, "pattern": pat_manifest["patterns"][i]["file"], "sha256": io.sha256_file(out / name)})
    gt = np.where(sim.lit, scene.depth, 0.0)
    io.write_pfm(out / "gt_depth.pfm", gt)
    io.write_gray(out / "shadow_mask.pgm", sim.shadow.astype(float), bits=8)
    near = default_near(scene)
    manifest = {
        "kind": "captures",
        "scene": scene.description,
        "seed": args.seed,
        "radiometry": cfg.radiometry.model_dump(),
        "near": near,
        "camera": CameraSpec.from_model(cam).model_dump(),
        "projector": ProjectorSpec.from_model(proj).model_dump(),
        "patterns_manifest_sha256": io.sha256_file(Path(args.patterns) / PATTERN_MANIFEST),
        "captures": entries,
        "gt_depth": {"file": "gt_depth.pfm", "sha256": io.sha256_file(out / "gt_depth.pfm")},
        "shadow_mask": {"file": "shadow_mask.pgm", "sha256": io.sha256_file(out / "shadow_mask.pgm")},
    }
    io.write_json(out / CAPTURE_MANIFEST, manifest)
    print(f"wrote {len(entries)} captures to {out} (lit {sim.lit.mean():.1%}, near {near:.1f} mm)")
    return 0


def cmd_train(args) -> int:
    from .trainer import Trainer, extract_depth_map

    cfg = load_run_config(args.config) if args.config else parse_run_config({})
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.workers is not None:
        cfg.workers = args.workers
    if args.deterministic:
        cfg.workers = 1
    if cfg.workers < 1:
        raise UsageError("--workers must be >= 1")
    captures, cap_manifest = load_captures(args.captures)
    pats, _ = load_patterns(args.patterns)
    cam, proj = _rig(cfg, cap_manifest)
    tcfg = cfg.train.build()
    if tcfg.near is None:
        if "near" not in cap_manifest:
            raise DataError("no near plane in the config or the capture manifest")
        tcfg.near = float(cap_manifest["near"])
    out = Path(args.out)
    trainer = Trainer(captures, np.stack([p.image for p in pats]), cam, proj, tcfg, cfg.workers,
                      snapshot_path=str(out.with_suffix(".nan.ckpt")))
    grid = trainer.run()
    io.write_checkpoint(out, grid)
    if args.log:
        write_loss_csv(args.log, trainer.history)
    result = {
        "kind": "checkpoint",
        "checkpoint": {"file": out.name, "sha256": io.sha256_file(out)},
        "captures_manifest_sha256": io.sha256_file(Path(args.captures) / CAPTURE_MANIFEST),
        "train": tcfg.to_dict(),
        "workers": cfg.workers,
        "wall_clock_s": round(trainer.wall_clock_s, 3),
    }
    if args.depth_out:
        dm, _ = extract_depth_map(grid, cam, trainer.frame, tcfg.samples_per_ray, tcfg.w_min,
                                  tcfg.normalize_surface, tcfg.z_max)
        io.write_pfm(args.depth_out, np.where(dm.valid, dm.depth, 0.0))
        result["depth"] = {"file": str(args.depth_out), "sha256": io.sha256_file(args.depth_out)}
    io.write_json(out.with_name(out.name + ".json"), {k: v for k, v in result.items() if k != "wall_clock_s"})
    print(f"trained {tcfg.total_iters} iterations in {trainer.wall_clock_s:.1f}s; wrote {out}")
    return 0


def _thresholds(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise UsageError(f"bad --thresholds {text!r}") from None
    if not vals or min(vals) <= 0:
        raise UsageError("thresholds must be positive")
    return vals


def cmd_eval(args) -> int:
    est = io.read_pfm(args.est)
    gt = io.read_pfm(args.gt)
    if est.shape != gt.shape:
        (h1, w1), (h2, w2) = est.shape[:2], gt.shape[:2]
        raise DataError(f"map sizes differ: estimate {w1}x{h1} vs ground truth {w2}x{h2} (width x height)")
    metrics = evaluate(DepthMap.from_array(est), DepthMap.from_array(gt), args.fx, args.baseline,
                       _thresholds(args.thresholds))
    metrics["est_sha256"] = io.sha256_file(args.est)
    metrics["gt_sha256"] = io.sha256_file(args.gt)
    if args.out:
        if str(args.out).endswith(".csv"):
            with io.atomic_write(args.out, "w") as fh:
                wr = csv.writer(fh)
                wr.writerow(list(metrics))
                wr.writerow(list(metrics.values()))
        else:
            io.write_json(args.out, metrics)
    print(json.dumps(metrics, sort_keys=True))
    return 0


def cmd_export_depth_vis(args) -> int:
    data = io.read_pfm(args.input)
    valid = np.isfinite(data) & (data > 0)
    if args.depth:
        if not (args.fx and args.baseline):
            raise UsageError("--depth needs --fx and --baseline")
        disp = depth_to_disparity(DepthMap(np.where(valid, data, 0.0), valid), args.fx, args.baseline).disp
    else:
        disp = data
    vis = np.zeros(data.shape)
    if np.any(valid):
        lo, hi = float(disp[valid].min()), float(disp[valid].max())
        span = hi - lo if hi > lo else 1.0
        vis[valid] = (disp[valid] - lo) / span
    io.write_gray(args.out, vis, bits=8)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="voxelsl", description="Voxel-grid structured-light depth recovery.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-patterns", help="write a random binary pattern set")
    g.add_argument("--width", type=int, default=1400)
    g.add_argument("--height", type=int, default=1512)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=6, help="number of patterns (1-9)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_patterns)

    s = sub.add_parser("simulate", help="render captures of an analytic scene")
    s.add_argument("--scene", required=True, choices=["plane", "ramp", "sphere", "step"])
    s.add_argument("--params", default="{}", help="scene parameters as JSON")
    s.add_argument("--patterns", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="run config JSON (camera, projector, radiometry)")
    s.add_argument("--seed", type=int, default=0, help="noise seed")
    s.add_argument("--noise", type=float, help="override noise sigma")
    s.add_argument("--format", choices=["pgm", "png"], default="pgm")
    s.add_argument("--bits", type=int, choices=[8, 16], default=16)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="optimize a density grid and extract depth")
    t.add_argument("--config")
    t.add_argument("--patterns", required=True)
    t.add_argument("--captures", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--depth-out")
    t.add_argument("--log", help="loss CSV path")
    t.add_argument("--seed", type=int)
    t.add_argument("--workers", type=int)
    t.add_argument("--deterministic", action="store_true", help="single worker, fixed ray order")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="compare a depth map to ground truth")
    e.add_argument("--est", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--fx", type=float, required=True)
    e.add_argument("--baseline", type=float, required=True)
    e.add_argument("--thresholds", default="0.1,0.5,1")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-depth-vis", help="8-bit visualization of a disparity (or depth) PFM")
    x.add_argument("--input", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--depth", action="store_true", help="input holds depth; convert to disparity first")
    x.add_argument("--fx", type=float)
    x.add_argument("--baseline", type=float)
    x.set_defaults(func=cmd_export_depth_vis)
    return p


def run_pipeline(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help(sys.stderr)
            return 1
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (DataError, ConfigError, io.FormatError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"voxelsl: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_pipeline())
