"""Command-line front door: gen | train | infer | eval | gradcheck | bench."""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import blocks as B
from . import metrics as M
from . import network as N
from . import pgm
from . import synthgen as S
from .scan import bench_scan, init_scan_params, s6_scan, ss2d
from .tensor import Tensor, fd_gradcheck


def _print_config(args):
    print("resolved config:")
    for k, v in sorted(vars(args).items()):
        if k != "func":
            print(f"  {k} = {v}")


def cmd_gen(args):
    params = S.SceneParams(seed=args.seed)
    if args.params_file:
        params = _scene_params_from_file(args.params_file, args.seed)
    manifest = S.generate_corpus(args.out_dir, args.count, params, seed=args.seed)
    print(f"wrote {args.count} scenes, manifest {manifest}")
    return 0


def _scene_params_from_file(path, seed):
    kv = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
    kwargs = {"seed": seed}
    for k, v in kv.items():
        if k in ("size", "target_count", "sigma_range", "amplitude_range"):
            kwargs[k] = tuple(float(s) if "." in s else int(s) for s in v.split(","))
        elif k in ("clutter_octaves", "seed"):
            kwargs[k] = int(v)
        else:
            kwargs[k] = float(v)
    return S.SceneParams(**kwargs)


def cmd_train(args):
    if args.config:
        with open(args.config) as fh:
            config = N.ModelConfig.from_lines(fh.readlines())
    else:
        config = N.ModelConfig()
    images, masks = S.load_corpus(args.corpus)
    h, w = images[0].shape
    config = N.ModelConfig(**{**config.__dict__, "input_size": (h, w)})
    model = N.Model(config, seed=args.seed)

    loss_rows = []
    best = [float("inf")]

    def log(epoch, step, loss):
        loss_rows.append((epoch, step, loss))

    def on_epoch_end(epoch, epoch_rows):
        mean_loss = float(np.mean([r[2] for r in epoch_rows]))
        print(f"epoch {epoch}: mean loss {mean_loss:.6f}")
        model.save(args.out_checkpoint)
        if mean_loss < best[0]:
            best[0] = mean_loss
            model.save(_best_path(args.out_checkpoint))

    try:
        N.train_loop(
            model, images, masks, epochs=args.epochs, seed=args.seed,
            batch_size=args.batch_size, lr=args.lr, log=log,
            on_epoch_end=on_epoch_end,
        )
    except FloatingPointError as e:
        _write_loss_csv(args.loss_csv, loss_rows)
        print(f"error: {e}", file=sys.stderr)
        return 1
    if not loss_rows:
        model.save(args.out_checkpoint)
        model.save(_best_path(args.out_checkpoint))
    _write_loss_csv(args.loss_csv, loss_rows)
    print(f"final checkpoint {args.out_checkpoint}, loss log {args.loss_csv}")
    return 0


def _best_path(path):
    root, ext = os.path.splitext(path)
    return f"{root}_best{ext}"


def _write_loss_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "loss"])
        writer.writerows(rows)


def cmd_infer(args):
    model = N.Model.load(args.checkpoint)
    for path in args.images:
        gray = pgm.read_gray(path)
        h, w = gray.shape
        if h % 16 or w % 16:
            print(
                f"error: {path} is {w}x{h}; sizes must be divisible by 16 "
                f"(e.g. {w - w % 16}x{h - h % 16})",
                file=sys.stderr,
            )
            return 1
        conf = N.infer(model, gray)
        stem, _ = os.path.splitext(path)
        out_stem = (
            os.path.join(args.out_dir, os.path.basename(stem))
            if args.out_dir
            else stem
        )
        if args.out_dir:
            os.makedirs(args.out_dir, exist_ok=True)
        pgm.write_gray(out_stem + "_conf.pgm", conf)
        pgm.write_mask(out_stem + "_pred.pgm", conf > args.threshold)
        print(f"wrote {out_stem}_conf.pgm and {out_stem}_pred.pgm")
    return 0


def cmd_eval(args):
    pred_files = sorted(f for f in os.listdir(args.pred_dir) if f.endswith(".pgm"))
    gt_files = sorted(f for f in os.listdir(args.gt_dir) if f.endswith(".pgm"))
    pred_set = {_eval_key(f): f for f in pred_files}
    gt_set = {_eval_key(f): f for f in gt_files}
    orphans = sorted(set(pred_set) ^ set(gt_set))
    if orphans:
        print(f"error: unmatched files: {orphans}", file=sys.stderr)
        return 1
    preds, gts = [], []
    for key in sorted(pred_set):
        preds.append(pgm.read_mask(os.path.join(args.pred_dir, pred_set[key])))
        gts.append(pgm.read_mask(os.path.join(args.gt_dir, gt_set[key])))
    report = M.evaluate(preds, gts)
    print(report.table())
    os.makedirs(args.out_dir, exist_ok=True)
    with open(os.path.join(args.out_dir, "report.txt"), "w") as fh:
        fh.write(report.table() + "\n")
    with open(os.path.join(args.out_dir, "metrics.csv"), "w") as fh:
        fh.write(report.metrics_csv())
    if report.roc:
        with open(os.path.join(args.out_dir, "roc.csv"), "w") as fh:
            fh.write(report.roc_csv())
    print(f"report written to {args.out_dir}")
    return 0


def _eval_key(name):
    stem = os.path.splitext(name)[0]
    for suffix in ("_pred", "_mask", "_conf"):
        if stem.endswith(suffix):
            stem = stem[: -len(suffix)]
    return stem


def cmd_gradcheck(args):
    rng = np.random.default_rng(args.seed)
    rows = []
    if args.scope == "ops":
        rows = _gradcheck_ops(rng)
        limit = 1e-4
    elif args.scope == "dse":
        rows = [("dual_stream", _gradcheck_dse(rng))]
        limit = 1e-4
    elif args.scope == "lasea":
        rows = [("multi_scale", _gradcheck_lasea(rng))]
        limit = 1e-4
    elif args.scope == "model":
        rows = [("tiny_model", _gradcheck_model(rng))]
        limit = 1e-3
    else:
        print(f"error: unknown scope {args.scope!r}", file=sys.stderr)
        return 2
    ok = True
    for name, err in rows:
        status = "pass" if err < limit else "FAIL"
        ok &= err < limit
        print(f"{name:<16} max rel err {err:.3e}  {status}")
    return 0 if ok else 1


def _gradcheck_ops(rng):
    from . import tensor as T

    x = Tensor(rng.uniform(-1, 1, (2, 4, 6, 6)), requires_grad=True)
    w = Tensor(rng.uniform(-1, 1, (4, 4, 3, 3)), requires_grad=True)
    b = Tensor(rng.uniform(-1, 1, 4), requires_grad=True)
    g = Tensor(rng.uniform(0.5, 1.5, 4), requires_grad=True)
    beta = Tensor(rng.uniform(-1, 1, 4), requires_grad=True)
    rows = []

    def sq(t):
        return (t * t).sum()

    rows.append(("conv2d", fd_gradcheck(lambda: sq(T.conv2d(x, w, b, padding=1)), [x, w, b], rng=rng)))
    rows.append(("max_pool2", fd_gradcheck(lambda: sq(T.max_pool2(x)), [x], rng=rng)))
    rows.append(("adaptive_avg", fd_gradcheck(lambda: sq(T.adaptive_avg_pool(x, 2)), [x], rng=rng)))
    rows.append(("upsample", fd_gradcheck(lambda: sq(T.upsample_bilinear(x, 2)), [x], rng=rng)))
    rows.append(("shuffle", fd_gradcheck(lambda: sq(T.channel_shuffle(x, 2)), [x], rng=rng)))
    rows.append(("layer_norm", fd_gradcheck(lambda: sq(T.layer_norm(x, g, beta)), [x, g, beta], rng=rng)))
    rows.append(("silu", fd_gradcheck(lambda: sq(x.silu()), [x], rng=rng)))
    rows.append(("sigmoid", fd_gradcheck(lambda: sq(x.sigmoid()), [x], rng=rng)))
    p = init_scan_params(4, 8, rng)
    xs = Tensor(rng.uniform(-1, 1, (4, 24)), requires_grad=True)
    rows.append(("s6_scan", fd_gradcheck(lambda: sq(s6_scan(xs, p)), [xs] + list(p.tensors().values()), rng=rng)))
    x4 = Tensor(rng.uniform(-1, 1, (1, 4, 5, 5)), requires_grad=True)
    ps = tuple(init_scan_params(4, 8, rng) for _ in range(4))
    targets = [x4] + [t for sp in ps for t in sp.tensors().values()]
    rows.append(("ss2d", fd_gradcheck(lambda: sq(ss2d(x4, ps)), targets, max_coords=3, rng=rng)))
    return rows


def _gradcheck_dse(rng):
    w = B.init_dual_stream(8, 4, rng)
    x = Tensor(rng.uniform(-1, 1, (1, 8, 6, 6)), requires_grad=True)

    def f():
        y = B.dual_stream_forward(x, w)
        return (y * y).sum()

    return fd_gradcheck(f, [x] + list(w.tensors().values()), max_coords=3, rng=rng)


def _gradcheck_lasea(rng):
    w = B.init_multi_scale(8, rng)
    x = Tensor(rng.uniform(-1, 1, (1, 8, 6, 6)), requires_grad=True)
    mode = B.SampleMode(train=True, seed=11)

    def f():
        y = B.multi_scale_forward(x, w, mode)
        return (y * y).sum()

    return fd_gradcheck(f, [x] + list(w.tensors().values()), max_coords=3, rng=rng)


def _gradcheck_model(rng):
    config = N.ModelConfig(
        base_channels=4, dse_depths=(1, 0, 0, 1), state_dim=4, input_size=(32, 32)
    )
    model = N.Model(config, seed=3)
    image = rng.uniform(0, 1, (1, 3, 32, 32))
    mask = (rng.random((1, 1, 32, 32)) > 0.9).astype(float)

    def f():
        maps = model.forward(Tensor(image), B.SampleMode(train=False))
        return N.soft_iou_loss(maps, mask)

    params = list(model.named_parameters().values())
    return fd_gradcheck(f, params, max_coords=1, rng=rng)


def cmd_bench(args):
    lengths = [int(s) for s in args.lengths.split(",")]
    rows, slope = bench_scan(
        lengths, d_inner=args.d_inner, state_dim=args.state_dim,
        repeats=args.repeats, seed=args.seed,
    )
    writer = csv.writer(sys.stdout)
    writer.writerow(["L", "D_inner", "N", "nanos_per_scan"])
    writer.writerows(rows)
    print(f"# log-log slope: {slope:.4f}")
    if args.out_csv:
        with open(args.out_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["L", "D_inner", "N", "nanos_per_scan"])
            w.writerows(rows)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="irdet", description="small-target detector toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic corpus")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--params-file", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train on a corpus manifest")
    p.add_argument("--corpus", required=True, help="path to manifest.csv")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--loss-csv", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run inference on PGM images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out-dir", default=None)
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--scope", choices=["ops", "dse", "lasea", "model"], required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="scan runtime benchmark")
    p.add_argument("--lengths", default="1024,2048,4096,8192,16384,32768,65536")
    p.add_argument("--d-inner", type=int, default=4)
    p.add_argument("--state-dim", type=int, default=8)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-csv", default=None)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _print_config(args)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
