"""posefield command line: gen-scene, pretrain, train, render, sample, eval.

Exit codes: 0 ok, 2 usage, 3 I/O, 4 missing artifact.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff
from .camera import CameraError, CameraPose, orbit_pose
from .checkpoint import MissingArtifact, load_checkpoint
from .config import ConfigError, build, dump_config, load_config
from .evalkit import eval_poses, guidance_sweep, image_to_numpy, novel_view_eval, opacity_png, pose_adherence
from .sampling import Conditioner, write_sample
from .scene import CATEGORIES, gen_scene, load_manifest, save_rgb
from .training import TrainingError, pretrain, prompt_for, train

log = logging.getLogger("posefield")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_MISSING = 0, 2, 3, 4


class UsageError(ValueError):
    pass


def parse_pose(text: str, manifest) -> CameraPose:
    """``az=..,el=..,r=..`` (degrees, world units, aimed at the origin) or
    ``matrix=r00,...,r22,t0,t1,t2`` (world-to-camera); returned in the scene frame."""
    W, H = manifest.width, manifest.height
    try:
        if text.startswith("matrix="):
            vals = [float(v) for v in text[len("matrix="):].split(",")]
            if len(vals) != 12:
                raise UsageError(f"matrix pose needs 12 numbers, got {len(vals)}")
            ref = orbit_pose(0, 0, 2.0, W, H)
            R, t = np.array(vals[:9]).reshape(3, 3), np.array(vals[9:])
            depth = float(np.linalg.norm(R.T @ t))
            world = CameraPose(R, t, ref.fx, ref.fy, ref.cx, ref.cy, W, H,
                               max(depth - 1.0, 0.05), depth + 1.0)
        else:
            kv = dict(item.split("=", 1) for item in text.split(","))
            if set(kv) != {"az", "el", "r"}:
                raise UsageError(f"pose needs exactly az, el, r; got {sorted(kv)}")
            world = orbit_pose(float(kv["az"]), float(kv["el"]), float(kv["r"]), W, H)
    except (ValueError, CameraError) as e:
        raise UsageError(f"malformed pose {text!r}: {e}") from e
    return manifest.scene_pose(world)


def _progress(every: int):
    def report(step, rec):
        if step % every == 0:
            loss = rec if isinstance(rec, float) else rec["loss"]
            log.info("step %d loss %.4f", step, loss)
    return report


def _overrides(args):
    return load_config(args.config) if getattr(args, "config", None) else {}


def _scene_for(args, meta):
    path = args.scene or meta.get("scene")
    if not path:
        raise UsageError("checkpoint records no scene; pass --scene")
    if not (Path(path) / "manifest.json").is_file() and not Path(path).is_file():
        raise MissingArtifact(f"scene manifest not found at {path}")
    return load_manifest(path)


def _conditioner(args, ov):
    unet, vocab, meta, _ = load_checkpoint(args.ckpt)
    manifest = _scene_for(args, meta)
    ec = build("eval", ov)
    prompt = getattr(args, "prompt", None) or meta.get("prompt") or prompt_for(manifest.category)
    return Conditioner(unet, vocab, manifest, ec.references), manifest, prompt, ec


def cmd_gen_scene(args) -> int:
    m = gen_scene(args.category, args.seed, args.out, views=args.views, n_val=args.val, radius=args.radius)
    print(m.root / "manifest.json")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    ov = _overrides(args)
    cfg = build("pretrain", ov, steps=args.steps, seed=args.seed)
    path = pretrain(args.category, cfg, args.out, progress=_progress(100))
    (Path(args.out) / "run.cfg").write_text(dump_config({"pretrain": cfg}))
    print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    ov = _overrides(args)
    cfg = build("train", ov, steps=args.steps, seed=args.seed)
    weights = build("loss", ov)
    manifest = load_manifest(args.scene)
    path = train(manifest, cfg, weights, args.out, args.base, progress=_progress(100))
    (Path(args.out) / "run.cfg").write_text(dump_config({"train": cfg, "loss": weights}))
    print(path)
    return EXIT_OK


def cmd_render(args) -> int:
    cond, manifest, prompt, ec = _conditioner(args, _overrides(args))
    pose = parse_pose(args.pose, manifest)
    layer = args.layer or cond.unet.pose_layers[-1]
    if layer not in cond.unet.pose_layers:
        raise UsageError(f"unknown pose layer {layer!r}; choose from {cond.unet.pose_layers}")
    size = args.size or ec.render_size
    r = cond.render(prompt, [cond.target_pose(pose)], size=size, layers=[layer])[layer]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_rgb(out / "rgb.png", image_to_numpy(r.rgb[0]))
    save_rgb(out / "opacity.png", opacity_png(r, 0))
    print(out / "rgb.png")
    return EXIT_OK


def cmd_sample(args) -> int:
    ov = _overrides(args)
    cond, manifest, prompt, _ = _conditioner(args, ov)
    g = build("guidance", ov, image=args.image_scale, text=args.text_scale)
    sc = build("sampler", ov, steps=args.steps, mode=args.mode)
    pose = parse_pose(args.pose, manifest)
    img = cond.generate(prompt, [pose], [args.seed], g, sc.steps, sc.mode)[0]
    png, _ = write_sample(args.out, img, args.seed, g, sc.steps, pose, prompt, sc.mode)
    print(png)
    return EXIT_OK


def cmd_eval(args) -> int:
    ov = _overrides(args)
    cond, manifest, prompt, ec = _conditioner(args, ov)
    g = build("guidance", ov)
    sc = build("sampler", ov)
    rep = novel_view_eval(cond, prompt, size=ec.render_size, layer=ec.layer or None)
    poses = eval_poses(manifest)
    if not args.skip_adherence:
        rep.pose_adherence = pose_adherence(cond, prompt, poses, list(range(args.seed, args.seed + ec.adherence_seeds)),
                                            g, sc.steps, ec.rotation, ec.fg_threshold, sc.mode)
    out = Path(args.out) if args.out else None
    if args.sweep:
        grid = (out.parent if out else Path(".")) / "sweep.png"
        rep.sweep = guidance_sweep(cond, prompt, poses, args.text_scales, args.image_scales,
                                   args.seed, sc.steps, grid)
    if out:
        rep.save(out)
    print(rep.to_json())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="posefield", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-scene", help="render a posed multi-view toy scene")
    s.add_argument("--category", choices=CATEGORIES, default="car")
    s.add_argument("--views", type=int, default=28)
    s.add_argument("--val", type=int, default=8)
    s.add_argument("--radius", type=float, default=2.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gen_scene)

    s = sub.add_parser("pretrain", help="fit the base denoiser on a category pool")
    s.add_argument("--category", choices=CATEGORIES, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("train", help="customize a base checkpoint on one scene")
    s.add_argument("--scene", required=True)
    s.add_argument("--base", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.set_defaults(fn=cmd_train)

    for name, fn, helptext in (("render", cmd_render, "field rgb/opacity at a pose"),
                               ("sample", cmd_sample, "guided sample at a pose"),
                               ("eval", cmd_eval, "metrics report")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--ckpt", required=True)
        s.add_argument("--scene")
        s.add_argument("--config")
        s.add_argument("--seed", type=int, default=0)
        s.set_defaults(fn=fn)
        if name in ("render", "sample"):
            s.add_argument("--pose", required=True, help="az=90,el=20,r=2 or matrix=r00,...,t2")
            s.add_argument("--prompt")
            s.add_argument("--out", required=True)
        if name == "render":
            s.add_argument("--layer")
            s.add_argument("--size", type=int)
        if name == "sample":
            s.add_argument("--steps", type=int)
            s.add_argument("--mode", choices=("ancestral", "deterministic"))
            s.add_argument("--image-scale", type=float)
            s.add_argument("--text-scale", type=float)
        if name == "eval":
            s.add_argument("--out")
            s.add_argument("--sweep", action="store_true")
            s.add_argument("--text-scales", type=float, nargs="+", default=[1.0, 3.5, 7.5])
            s.add_argument("--image-scales", type=float, nargs="+", default=[1.0, 3.5])
            s.add_argument("--skip-adherence", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    autodiff.configure_threads()
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as e:
        print(f"posefield: {e}", file=sys.stderr)
        return EXIT_USAGE
    except MissingArtifact as e:
        print(f"posefield: missing artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    except TrainingError as e:
        print(f"posefield: training aborted at {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"posefield: I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
