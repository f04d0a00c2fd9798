"""Pose adherence and masked PSNR over a grid of guidance scales for one checkpoint.

    python3 scripts/guidance_sweep.py --ckpt runs/car7/run/checkpoint --out runs/car7/sweep
"""

import argparse
import json
from pathlib import Path

from posefield.autodiff import configure_threads
from posefield.checkpoint import load_checkpoint
from posefield.evalkit import eval_poses, guidance_sweep
from posefield.sampling import Conditioner
from posefield.scene import load_manifest
from posefield.training import prompt_for


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ckpt", required=True)
    ap.add_argument("--scene", help="defaults to the scene recorded in the checkpoint")
    ap.add_argument("--out", required=True)
    ap.add_argument("--text-scales", type=float, nargs="+", default=[1.0, 3.5, 5.0, 7.5, 10.0])
    ap.add_argument("--image-scales", type=float, nargs="+", default=[1.0, 2.0, 3.5, 5.0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=50)
    args = ap.parse_args()
    configure_threads()
    unet, vocab, meta, _ = load_checkpoint(args.ckpt)
    manifest = load_manifest(args.scene or meta["scene"])
    cond = Conditioner(unet, vocab, manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = guidance_sweep(cond, prompt_for(manifest.category), eval_poses(manifest), args.text_scales,
                           args.image_scales, args.seed, args.steps, out / "grid.png")
    (out / "sweep.json").write_text(json.dumps(table, indent=1) + "\n")
    for row in table:
        print(f"text {row['text']:5.1f}  image {row['image']:4.1f}  delta_iou {row['delta_iou']}  psnr {row['psnr']}")


if __name__ == "__main__":
    main()
