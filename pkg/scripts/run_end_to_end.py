"""Scene, base pretraining, customization and evaluation in one go.

    python3 scripts/run_end_to_end.py --out runs/car7

Stages whose checkpoint already exists under --out are skipped.
"""

import argparse
import json
import logging
import time
from pathlib import Path

from posefield.autodiff import configure_threads
from posefield.checkpoint import load_checkpoint
from posefield.config import LossWeights, PretrainConfig, TrainConfig
from posefield.evalkit import eval_poses, novel_view_eval, pose_adherence
from posefield.sampling import Conditioner
from posefield.scene import gen_scene, load_manifest
from posefield.training import pretrain, prompt_for, train

log = logging.getLogger("e2e")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--category", default="car")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--pretrain-steps", type=int, default=PretrainConfig.steps)
    ap.add_argument("--steps", type=int, default=TrainConfig.steps)
    ap.add_argument("--adherence-seeds", type=int, default=4)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    configure_threads()
    out = Path(args.out)
    t0 = time.time()

    scene_dir = out / "scene"
    manifest = (load_manifest(scene_dir) if (scene_dir / "manifest.json").is_file()
                else gen_scene(args.category, args.seed, scene_dir))
    base = out / "base" / "checkpoint"
    if not (base / "manifest.json").is_file():
        pretrain(args.category, PretrainConfig(steps=args.pretrain_steps), out / "base",
                 progress=lambda s, loss: s % 200 == 0 and log.info("pretrain %d %.4f", s, loss))
    log.info("base ready after %.0fs", time.time() - t0)
    ckpt = train(manifest, TrainConfig(steps=args.steps), LossWeights(), out / "run", base,
                 progress=lambda s, r: s % 100 == 0 and log.info("train %d %s", s, {k: round(r[k], 4) for k in
                                                                                    ("loss", "rgb", "sil", "bg")}))
    log.info("customized after %.0fs", time.time() - t0)

    unet, vocab, _, _ = load_checkpoint(ckpt)
    cond = Conditioner(unet, vocab, manifest)
    prompt = prompt_for(manifest.category)
    rep = novel_view_eval(cond, prompt)
    train_rep = novel_view_eval(cond, prompt, indices=manifest.indices("train")[:8])
    rep.pose_adherence = pose_adherence(cond, prompt, eval_poses(manifest), list(range(args.adherence_seeds)))
    rep.save(out / "report.json")
    summary = {"psnr_val": rep.psnr_mean, "iou_val": rep.iou_mean, "psnr_train": train_rep.psnr_mean,
               "iou_train": train_rep.iou_mean, "delta_iou": rep.pose_adherence["delta_iou"],
               "seconds": round(time.time() - t0)}
    print(json.dumps(summary, indent=1))


if __name__ == "__main__":
    main()
