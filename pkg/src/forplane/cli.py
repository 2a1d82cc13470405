"""Command-line entry point.

Subcommands: synth, train, render, decompose, eval, gradcheck, bench-march,
sweep. Every run prints its fully-resolved configuration first, so any result
can be reproduced from the dump. Exit codes: 0 success, 1 usage error,
2 data error, 3 numerical failure.

--threads (or the FORPLANE_THREADS env var, which wins) sizes the render
worker pool and caps the BLAS pools; training itself is always serial so
fixed seeds stay bit-reproducible.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; the contract says 1
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _configure_threads(argv: list[str]) -> int:
    threads = 1
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif a.startswith("--threads="):
            threads = a.split("=", 1)[1]
    threads = os.environ.get("FORPLANE_THREADS", threads)
    try:
        threads = max(1, int(threads))
    except ValueError:
        threads = 1
    # cap BLAS pools before numpy loads so math stays on the requested cores
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(threads))
    return threads


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.add_argument("--threads", type=int, default=1,
                   help="render worker threads (FORPLANE_THREADS overrides)")


def build_parser() -> _Parser:
    parser = _Parser(prog="forplane",
                     description="factorized-plane dynamic scene reconstruction")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic oracle dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--radius", type=float, default=0.28)
    p.add_argument("--amplitude", type=float, default=0.15)
    p.add_argument("--sigma0", type=float, default=25.0)
    p.add_argument("--occluder", action="store_true")
    p.add_argument("--oracle-steps", type=int, default=4096)
    _add_common(p)

    p = sub.add_parser("train", help="optimize a scene")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("render", help="render frames from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", default="all", help="'all', 'train', 'eval' or i,j,k")
    p.add_argument("--steps", type=int)
    p.add_argument("--dense", action="store_true", help="disable the indicator grid")
    _add_common(p)

    p = sub.add_parser("decompose", help="full / static-only / dynamic-only renders")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    _add_common(p)

    p = sub.add_parser("eval", help="metric table against ground truth")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="eval", choices=("train", "eval", "all"))
    p.add_argument("--steps", type=int)
    _add_common(p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--instances", type=int, default=5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    _add_common(p)

    p = sub.add_parser("bench-march", help="dense vs indicator-grid marching")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=4, help="frame count to average")
    p.add_argument("--steps", type=int)
    _add_common(p)

    p = sub.add_parser("sweep", help="train over a grid of loss weights")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--param", action="append", default=[],
                   metavar="KEY=V1,V2,...", help="repeatable, e.g. loss.lambda_tv=1e-4,1e-3")
    p.add_argument("--iterations", type=int, default=400)
    _add_common(p)
    return parser


def _load_cfg(args):
    from .config import Config, load_config
    cfg = load_config(args.config) if args.config else Config()
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    return cfg.validate()


def _dump_effective(cfg_or_ns, extra=None):
    if hasattr(cfg_or_ns, "to_flat"):
        flat = cfg_or_ns.to_flat()
    else:
        flat = {k: v for k, v in vars(cfg_or_ns).items() if k != "command"}
    if extra:
        flat.update(extra)
    print("effective configuration:")
    print(json.dumps(flat, indent=2, sort_keys=True, default=str))


def _manifest(out_dir: str, paths: list[str]) -> None:
    rel = [os.path.relpath(p, out_dir) for p in paths]
    mp = os.path.join(out_dir, "manifest.json")
    with open(mp, "w", encoding="utf-8") as fh:
        json.dump({"files": sorted(rel)}, fh, indent=1)


def _frame_indices(spec: str, dataset, split_mode: str):
    from .trainer import split_indices
    train_idx, eval_idx = split_indices(len(dataset.frames), split_mode)
    if spec == "all":
        return list(range(len(dataset.frames)))
    if spec == "train":
        return train_idx
    if spec == "eval":
        return eval_idx or train_idx
    try:
        return [int(s) for s in spec.split(",")]
    except ValueError:
        raise SystemExit(EXIT_USAGE)


def _write_csv(path: str, rows: list[dict]) -> None:
    if not rows:
        return
    keys = list(rows[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)


# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .dataio import SynthConfig, generate_synthetic, save_dataset
    scfg = SynthConfig(width=args.width, height=args.height, frames=args.frames,
                       radius=args.radius, amplitude=args.amplitude,
                       sigma0=args.sigma0, occluder=args.occluder,
                       oracle_steps=args.oracle_steps)
    _dump_effective(args)
    ds, _ = generate_synthetic(scfg)
    os.makedirs(args.out, exist_ok=True)
    save_dataset(ds, args.out)
    files = [os.path.join(args.out, "meta.json")]
    for sub in ("images", "masks", "depth"):
        d = os.path.join(args.out, sub)
        files += [os.path.join(d, f) for f in os.listdir(d)]
    _manifest(args.out, files)
    print(f"wrote {len(ds.frames)} frames to {args.out}")
    return EXIT_OK


def cmd_train(args, threads: int) -> int:
    from .config import save_config
    from .dataio import load_dataset
    from .trainer import save_checkpoint_file, train
    cfg = _load_cfg(args)
    _dump_effective(cfg)
    dataset = load_dataset(args.dataset)
    os.makedirs(args.out, exist_ok=True)
    state, rows = train(dataset, cfg, log=print)
    ckpt = os.path.join(args.out, "checkpoint.fpln")
    save_checkpoint_file(state, ckpt)
    metrics_csv = os.path.join(args.out, "metrics.csv")
    _write_csv(metrics_csv, rows)
    cfg_path = os.path.join(args.out, "config.json")
    save_config(cfg, cfg_path)
    _manifest(args.out, [ckpt, metrics_csv, cfg_path])
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def cmd_render(args, threads: int) -> int:
    from .dataio import load_dataset, write_outputs
    from .renderer import render_image
    from .trainer import frame_tau, load_checkpoint_file
    state = load_checkpoint_file(args.checkpoint)
    dataset = load_dataset(args.dataset)
    _dump_effective(state.config, {"render.frames": args.frames,
                                   "render.dense": args.dense})
    steps = args.steps or state.config.render.eval_steps
    idx = _frame_indices(args.frames, dataset, state.config.train.split)
    renders = []
    frames = []
    for i in idx:
        fr = dataset.frames[i]
        import numpy as np
        tau = float(frame_tau(np.array([i]), len(dataset.frames))[0])
        img = render_image(state.bundle(), None if args.dense else state.grid,
                           dataset.camera(i), tau, steps,
                           t_min=0.0 if args.dense else state.config.render.t_min,
                           use_grid=not args.dense, threads=threads)
        renders.append(img)
        frames.append(fr)
    os.makedirs(args.out, exist_ok=True)
    paths = write_outputs(renders, frames, args.out, dataset.depth_scale)
    _manifest(args.out, paths)
    print(f"wrote {len(paths)} files to {args.out}")
    return EXIT_OK


def cmd_decompose(args, threads: int) -> int:
    import numpy as np

    from .dataio import load_dataset, write_color_png
    from .planes import force_field_to_identity
    from .renderer import render_image
    from .trainer import frame_tau, load_checkpoint_file
    state = load_checkpoint_file(args.checkpoint)
    dataset = load_dataset(args.dataset)
    _dump_effective(state.config, {"decompose.frame": args.frame})
    steps = args.steps or state.config.render.eval_steps
    cam = dataset.camera(args.frame)
    tau = float(frame_tau(np.array([args.frame]), len(dataset.frames))[0])

    views = {"full": state.planes,
             "static": force_field_to_identity(state.planes, "dynamic"),
             "dynamic": force_field_to_identity(state.planes, "static")}
    os.makedirs(args.out, exist_ok=True)
    paths = []
    for name, view in views.items():
        img = render_image(state.bundle(view), state.grid, cam, tau, steps,
                           t_min=state.config.render.t_min, threads=threads)
        rgb = img["rgb"]
        if name == "dynamic":  # re-normalized to [0, 1] for visualization
            lo, hi = rgb.min(), rgb.max()
            rgb = (rgb - lo) / (hi - lo) if hi > lo else np.zeros_like(rgb)
        path = os.path.join(args.out, f"{name}.png")
        write_color_png(path, rgb)
        paths.append(path)
    _manifest(args.out, paths)
    print(f"wrote {', '.join(paths)}")
    return EXIT_OK


def cmd_eval(args, threads: int) -> int:
    import numpy as np

    from .dataio import load_dataset
    from .trainer import evaluate_frames, load_checkpoint_file
    state = load_checkpoint_file(args.checkpoint)
    dataset = load_dataset(args.dataset)
    _dump_effective(state.config, {"eval.split": args.split})
    idx = _frame_indices(args.split, dataset, state.config.train.split)
    rows, _ = evaluate_frames(state, dataset, idx, steps=args.steps,
                              threads=threads)
    mean_row = {"frame": "mean"}
    for key in ("psnr", "psnr_masked", "ssim", "depth_rmse"):
        vals = [r[key] for r in rows if r.get(key) is not None]
        mean_row[key] = float(np.mean(vals)) if vals else ""
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "eval.csv")
    _write_csv(path, rows + [mean_row])
    _manifest(args.out, [path])
    print(f"mean psnr {mean_row['psnr']:.3f}  psnr* {mean_row['psnr_masked']:.3f}  "
          f"ssim {mean_row['ssim']:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck
    _dump_effective(args)
    reports = run_gradcheck(num_instances=args.instances, log=print)
    worst = max(r.max_rel_err for r in reports)
    print(f"worst relative error over {sum(r.num_params for r in reports)} "
          f"parameters: {worst:.3e}")
    if worst >= args.tolerance:
        print("gradcheck FAILED", file=sys.stderr)
        return EXIT_NUMERIC
    print("gradcheck passed")
    return EXIT_OK


def cmd_bench_march(args, threads: int) -> int:
    import time

    import numpy as np

    from .dataio import load_dataset
    from .metrics import psnr
    from .renderer import render_image
    from .trainer import frame_tau, load_checkpoint_file
    state = load_checkpoint_file(args.checkpoint)
    dataset = load_dataset(args.dataset)
    _dump_effective(state.config, {"bench.frames": args.frames})
    steps = args.steps or state.config.render.eval_steps
    idx = list(range(min(args.frames, len(dataset.frames))))
    rows = []
    for strategy in ("dense", "grid"):
        use_grid = strategy == "grid"
        bundle = state.bundle()
        bundle.eval_count = 0
        t0 = time.perf_counter()
        psnrs = []
        rays = 0
        for i in idx:
            fr = dataset.frames[i]
            tau = float(frame_tau(np.array([i]), len(dataset.frames))[0])
            img = render_image(bundle, state.grid if use_grid else None,
                               dataset.camera(i), tau, steps,
                               t_min=state.config.render.t_min if use_grid else 0.0,
                               use_grid=use_grid, threads=threads)
            psnrs.append(psnr(img["rgb"], fr.image))
            rays += dataset.width * dataset.height
        ms = (time.perf_counter() - t0) * 1e3 / len(idx)
        rows.append({"strategy": strategy,
                     "samples_per_ray": bundle.eval_count / rays,
                     "ms_per_frame": ms,
                     "psnr": float(np.mean(psnrs))})
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "bench_march.csv")
    _write_csv(path, rows)
    _manifest(args.out, [path])
    for r in rows:
        print(f"{r['strategy']:>5}: {r['samples_per_ray']:8.2f} samples/ray  "
              f"{r['ms_per_frame']:9.1f} ms/frame  psnr {r['psnr']:.3f}")
    return EXIT_OK


def _parse_sweep_grid(specs: list[str]) -> list[tuple[str, list[float]]]:
    grid = []
    for spec in specs:
        key, _, vals = spec.partition("=")
        if not vals or not key.startswith("loss."):
            raise SystemExit(EXIT_USAGE)
        try:
            grid.append((key, [float(v) for v in vals.split(",")]))
        except ValueError:
            raise SystemExit(EXIT_USAGE)
    return grid


def cmd_sweep(args, threads: int) -> int:
    import itertools

    import numpy as np

    from .config import config_from_flat
    from .dataio import load_dataset
    from .trainer import evaluate_frames, split_indices, train
    base = _load_cfg(args)
    base.train.iterations = args.iterations
    grid = _parse_sweep_grid(args.param) or [("loss.lambda_tv", [base.loss.lambda_tv])]
    _dump_effective(base, {"sweep.grid": dict(grid)})
    dataset = load_dataset(args.dataset)
    train_idx, _ = split_indices(len(dataset.frames), base.train.split)
    rows = []
    keys = [k for k, _ in grid]
    for combo in itertools.product(*[v for _, v in grid]):
        cfg = config_from_flat(dict(zip(keys, combo)), base=config_from_flat(base.to_flat()))
        state, _ = train(dataset, cfg)
        ev, _ = evaluate_frames(state, dataset, train_idx[:4],
                                steps=cfg.render.train_steps, threads=threads)
        row = dict(zip(keys, combo))
        row["psnr"] = float(np.mean([r["psnr"] for r in ev]))
        row["psnr_masked"] = float(np.mean([r["psnr_masked"] for r in ev]))
        rows.append(row)
        print("  ".join(f"{k}={v}" for k, v in row.items()))
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "sweep.csv")
    _write_csv(path, rows)
    _manifest(args.out, [path])
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    threads = _configure_threads(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    from .errors import DataError, NumericalError
    try:
        if args.command == "synth":
            return cmd_synth(args)
        if args.command == "train":
            return cmd_train(args, threads)
        if args.command == "render":
            return cmd_render(args, threads)
        if args.command == "decompose":
            return cmd_decompose(args, threads)
        if args.command == "eval":
            return cmd_eval(args, threads)
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        if args.command == "bench-march":
            return cmd_bench_march(args, threads)
        if args.command == "sweep":
            return cmd_sweep(args, threads)
        parser.error(f"unknown command {args.command}")
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
