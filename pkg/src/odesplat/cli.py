"""Command line entry point (``odesplat``)."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .autodiff import ContractError, NumericError
from .config import TrainConfig, desk_config, load_config, save_config
from .evaluation import center_error, evaluate, plot_metrics, summarize, write_csv
from .scenes import KINDS, SceneSpec, generate_scene, load_dataset, load_ground_truth, save_dataset, split_dataset, to_png
from .trainer import Trainer, load_pipeline

ABLATION_AXES = ("latent_space", "neural_ode", "affine")


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else desk_config()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _split(ds, cfg: TrainConfig):
    return split_dataset(ds, cfg.split_threshold, cfg.split_inclusive)


def _frame_ids(ds, part):
    pos = {id(f): i for i, f in enumerate(ds.frames)}
    return [pos[id(f)] for f in part.frames]


def _train(cfg: TrainConfig, data_dir, out: Path) -> Trainer:
    ds = load_dataset(data_dir)
    train_ds, _ = _split(ds, cfg)
    gt = load_ground_truth(data_dir)
    points = gt[0].mu if gt is not None else None
    if points is None and cfg.init == "points":
        cfg = cfg.replace(init="unit_cube")
    tr = Trainer(cfg, train_ds, init_points=points)
    out.mkdir(parents=True, exist_ok=True)
    tr.run(checkpoint_dir=out)
    tr.save(out / "model.ckpt")
    tr.write_log(out / "train_log.csv")
    return tr


def _evaluate(pipeline, data_dir, cfg: TrainConfig, splits=("train", "extrapolation")):
    ds = load_dataset(data_dir)
    parts = dict(zip(("train", "extrapolation"), _split(ds, cfg)))
    rows = []
    for name in splits:
        rows += evaluate(pipeline.render, parts[name], name, _frame_ids(ds, parts[name]))
    rows.sort(key=lambda r: r.frame_id)
    return rows


def cmd_generate(args) -> int:
    kw = {"kind": args.kind}
    for name in ("n_gaussians", "n_cameras", "n_timesteps", "resolution", "angular_velocity"):
        v = getattr(args, name)
        if v is not None:
            kw[name] = v
    spec = SceneSpec(**kw)
    ds, base, _ = generate_scene(spec, seed=args.seed or 0)
    save_dataset(ds, args.out, base)
    print(f"wrote {len(ds)} frames to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    tr = _train(cfg, args.data, out)
    save_config(cfg, out / "config.json")
    rows = _evaluate(tr.pipeline, args.data, cfg)
    write_csv(rows, out / "metrics.csv")
    for split, m in summarize(rows).items():
        print(f"{split}: psnr {m['psnr']:.3f} ssim {m['ssim']:.4f} l1 {m['l1']:.5f}")
    return 0


def _load_for(args):
    pipe = load_pipeline(args.checkpoint)
    return pipe, pipe.cfg


def cmd_render(args) -> int:
    pipe, _ = _load_for(args)
    ds = load_dataset(args.data)
    if not 0 <= args.camera < len(ds.cameras):
        raise ContractError(f"camera {args.camera} out of range (dataset has {len(ds.cameras)})")
    img = pipe.render(ds.cameras[args.camera], args.t)
    to_png(img, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_extrapolate(args) -> int:
    pipe, cfg = _load_for(args)
    ds = load_dataset(args.data)
    _, extra = _split(ds, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for fid, fr in zip(_frame_ids(ds, extra), extra.frames):
        to_png(pipe.render(ds.cameras[fr.camera], fr.t), out / f"{fid:05d}.png")
    rows = evaluate(pipe.render, extra, "extrapolation", _frame_ids(ds, extra))
    write_csv(rows, out / "metrics.csv")
    print(f"extrapolation: psnr {summarize(rows)['extrapolation']['psnr']:.3f} over {len(rows)} frames")
    return 0


def cmd_evaluate(args) -> int:
    pipe, cfg = _load_for(args)
    splits = ("train", "extrapolation") if args.split == "all" else (args.split,)
    rows = _evaluate(pipe, args.data, cfg, splits)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(rows, out / "metrics.csv")
    plot_metrics(rows, out)
    summary = summarize(rows)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    for split, m in summary.items():
        print(f"{split}: psnr {m['psnr']:.3f} ssim {m['ssim']:.4f} l1 {m['l1']:.5f}")
    return 0


def cmd_ablate(args) -> int:
    base = _config(args)
    out = Path(args.out)
    gt = load_ground_truth(args.data)
    results = []
    for arm, value in (("on", True), ("off", False)):
        cfg = base.replace(**{args.axis: value})
        tr = _train(cfg, args.data, out / arm)
        rows = _evaluate(tr.pipeline, args.data, cfg)
        write_csv(rows, out / arm / "metrics.csv")
        s = summarize(rows)
        cerr = center_error(tr.pipeline, gt[1], args.t_error) if gt is not None else float("nan")
        results.append([args.axis, arm, s["train"]["psnr"], s["train"]["ssim"], s["extrapolation"]["psnr"], s["extrapolation"]["ssim"], cerr])
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["axis", "arm", "train_psnr", "train_ssim", "extrapolation_psnr", "extrapolation_ssim", "center_error"])
        for r in results:
            w.writerow(r[:2] + [f"{v:.6f}" for v in r[2:]])
    for r in results:
        print(f"{r[0]}={r[1]}: extrapolation psnr {r[4]:.3f}, center error {r[6]:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="training config JSON (default: desk-scale preset)")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="odesplat", description="Dynamic Gaussian splatting with latent ODE dynamics.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-scene", parents=[common], help="render a synthetic dynamic scene")
    g.add_argument("--kind", choices=KINDS, default="rotation")
    g.add_argument("--out", required=True)
    g.add_argument("--n-gaussians", type=int)
    g.add_argument("--n-cameras", type=int)
    g.add_argument("--n-timesteps", type=int)
    g.add_argument("--resolution", type=int)
    g.add_argument("--angular-velocity", type=float)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="train on the training split of a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("render", parents=[common], help="render one view at time t")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--camera", type=int, default=0)
    r.add_argument("--t", type=float, required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_render)

    x = sub.add_parser("extrapolate", parents=[common], help="render and score the held-out future frames")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(fn=cmd_extrapolate)

    e = sub.add_parser("evaluate", parents=[common], help="per-frame metrics CSV and plots")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", choices=("train", "extrapolation", "all"), default="all")
    e.set_defaults(fn=cmd_evaluate)

    a = sub.add_parser("ablate", parents=[common], help="train on/off arms of one component")
    a.add_argument("--axis", choices=ABLATION_AXES, required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--t-error", type=float, default=0.9, help="time for the particle-center error")
    a.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ContractError, NumericError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
