#!/usr/bin/env python3
"""End-to-end demo: generate a small synthetic corpus, train a tiny model
for a couple of epochs, run inference on held-out scenes, and score it.

Everything lands in ./demo_run (or --work-dir). Expect a few minutes on a
single core; the model is far too small to detect well — this script
exercises the pipeline, not the accuracy targets.
"""

import argparse
import pathlib
import sys

from irdet.cli import main


def sh(argv):
    print("+ irdet " + " ".join(argv))
    status = main(argv)
    if status != 0:
        sys.exit(status)


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--work-dir", default="demo_run")
    parser.add_argument("--epochs", type=int, default=2)
    parser.add_argument("--train-scenes", type=int, default=24)
    parser.add_argument("--eval-scenes", type=int, default=8)
    args = parser.parse_args()

    work = pathlib.Path(args.work_dir)
    work.mkdir(parents=True, exist_ok=True)
    (work / "config.txt").write_text(
        "base_channels=8\ndse_depths=1,1,1,1\nstate_dim=16\n"
    )
    (work / "scene_params.txt").write_text(
        "target_count=2,4\nsigma_range=1.6,2.6\namplitude_range=0.4,0.9\n"
    )

    sh(["gen", "--count", str(args.train_scenes), "--out-dir", str(work / "train"),
        "--params-file", str(work / "scene_params.txt"), "--seed", "0"])
    sh(["gen", "--count", str(args.eval_scenes), "--out-dir", str(work / "eval"),
        "--params-file", str(work / "scene_params.txt"), "--seed", "1000"])
    sh(["train", "--corpus", str(work / "train" / "manifest.csv"),
        "--config", str(work / "config.txt"),
        "--epochs", str(args.epochs), "--seed", "0",
        "--out-checkpoint", str(work / "model.ckpt"),
        "--loss-csv", str(work / "loss.csv")])

    eval_images = sorted(
        str(p) for p in (work / "eval").glob("scene_*.pgm")
        if not p.name.endswith("_mask.pgm")
    )
    sh(["infer", "--checkpoint", str(work / "model_best.ckpt"),
        "--out-dir", str(work / "pred")] + eval_images)
    # score predicted masks against the generated ground truth
    gt_dir = work / "gt"
    gt_dir.mkdir(exist_ok=True)
    for p in (work / "eval").glob("*_mask.pgm"):
        (gt_dir / p.name).write_bytes(p.read_bytes())
    for p in list((work / "pred").glob("*_conf.pgm")):
        p.unlink()  # eval pairs masks only
    sh(["eval", "--pred-dir", str(work / "pred"), "--gt-dir", str(gt_dir),
        "--out-dir", str(work / "report")])
    print(f"done; see {work / 'report' / 'report.txt'}")
