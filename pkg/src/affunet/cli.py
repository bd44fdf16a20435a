"""``affunet`` command line: gradient checks, toy data, training, ablation,
position maps, rendering and benchmarks.

Exit codes: 0 success, 1 usage, 2 numerical failure, 3 I/O.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("affunet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out(args, default: str) -> Path:
    return Path(args.out or default)


def _config_dict(args) -> dict:
    if not args.config:
        return {}
    try:
        return json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"config {args.config} is not valid JSON: {e}") from None


# --- commands -------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    from . import gradcheck

    report = gradcheck.run(args.target, seeds=args.seeds)
    seconds = report.pop("seconds")
    out = _out(args, "gradcheck")
    _write_json(out / "gradcheck.json", report)
    _write_json(out / "timings.json", seconds)
    for name, g in report["groups"].items():
        print(f"{'ok  ' if g['passed'] else 'FAIL'} {name:40s} max_rel_error={g['max_rel_error']:.3e}")
    for name, v in report.get("zero_case_max_abs_grad", {}).items():
        print(f"{'ok  ' if v == 0 else 'FAIL'} zero_case/{name:30s} max_abs_grad={v:.3e}")
    if not report["passed"]:
        print("gradcheck failed: " + ", ".join(report["failed"]), file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_make_toyset(args) -> int:
    from .geometry import load_bundled_head
    from .toyset import make_toyset

    if args.n < 1:
        raise UsageError("--n must be at least 1")
    if args.heldout is not None and not 0 <= args.heldout < args.n:
        raise UsageError("--heldout must be in [0, n)")
    if args.resolution % 8:
        raise UsageError("--resolution must be a multiple of 8")
    template = load_bundled_head()
    data = make_toyset(args.n, args.seed, args.resolution, args.heldout, args.aligned, template)
    out = _out(args, "toyset")
    data.save(out, template)
    print(f"wrote {len(data)} samples ({data.n_heldout} held out) to {out}")
    return EXIT_OK


def _run_config(args, **overrides):
    from .train import RunConfig

    d = _config_dict(args)
    d.update({k: v for k, v in overrides.items() if v is not None})
    d["seed"] = args.seed
    d["threads"] = args.threads
    if args.out:
        d["out"] = args.out
    try:
        return RunConfig(**d)
    except TypeError as e:
        raise UsageError(f"bad config: {e}") from None


def cmd_train(args) -> int:
    from .train import train

    stages = [int(s) for s in args.stages.split(",")] if args.stages else None
    if stages and any(s not in (1, 2, 3) for s in stages):
        raise UsageError("--stages takes a comma list drawn from 1,2,3")
    epochs = tuple(int(e) for e in args.epochs.split(",")) if args.epochs else None
    if epochs is not None and len(epochs) != 3:
        raise UsageError("--epochs takes three comma-separated counts")
    cfg = _run_config(args, dataset=args.dataset, stage=args.stage, max_steps=args.max_steps,
                      batch_size=args.batch_size, epochs=epochs,
                      adversarial=False if args.no_adversarial else None)
    if args.adv_weight is not None:
        cfg.weights.adv = args.adv_weight
    for report in train(cfg, stages):
        print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .train import ablate_affconv

    cfg = _run_config(args, dataset=args.dataset, ablation_steps=args.steps, batch_size=args.batch_size)
    report = ablate_affconv(cfg)
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_posmap(args) -> int:
    from .geometry import bundled_head_path, load_obj, rasterize_position_map, round_trip_error

    path = Path(args.mesh) if args.mesh else bundled_head_path()
    mesh = load_obj(path)
    pm = rasterize_position_map(mesh, args.resolution)
    out = _out(args, "posmap")
    out.mkdir(parents=True, exist_ok=True)
    stem = out / path.stem
    pm.save(stem)
    pm.export_png(str(stem) + ".png")
    err, tol = round_trip_error(mesh, pm)
    summary = {"mesh": path.name, "resolution": args.resolution, "coverage": pm.coverage(),
               "round_trip_max_error": err, "round_trip_tolerance": tol}
    _write_json(Path(str(stem) + ".summary.json"), summary)
    print(f"coverage {pm.coverage():.6f}")
    print(f"round-trip max interior error {err:.3e} (tolerance {tol:.3e})")
    return EXIT_OK if err < tol else EXIT_NUMERICAL


def cmd_render(args) -> int:
    import torch

    from .geometry import load_obj
    from .networks import FaceNets, NetworkConfig, load_checkpoint
    from .render import Camera, Pose, overlay, render, save_png8
    from .toyset import ToySet

    data = ToySet.load(args.dataset)
    if not 0 <= args.index < len(data):
        raise UsageError(f"--index must be in [0, {len(data)})")
    template = load_obj(Path(args.dataset) / "template.obj")
    sample = data.sample(args.index)
    diffuse, light, pm, pose = sample.diffuse, sample.light, sample.position, sample.pose
    if args.checkpoint:
        manifest = json.loads((Path(args.checkpoint) / "manifest.json").read_text())
        c = manifest["config"]
        nets = FaceNets(NetworkConfig(c["resolution"], c["width"], affine=c["affine"]), c["seed"])
        load_checkpoint(args.checkpoint, dict(nets.named_children()))
        with torch.no_grad():
            img = sample.image[None]
            diffuse, light = nets.diffuse(img)[0], nets.light(img)[0]
            pos = nets.position(img)[0].permute(1, 2, 0).numpy()
        pm = type(pm)(pos, pm.valid)
    if args.yaw is not None or args.pitch is not None:
        pose = Pose.from_euler(yaw=math.radians(args.yaw or 0.0), pitch=math.radians(args.pitch or 0.0))
    res = data.meta["resolution"]
    with torch.no_grad():
        img, cov = render(pm, template, diffuse, light, pose, Camera.for_uv_frame(res))
        composite = overlay(img, cov, sample.background)
    out = _out(args, "render")
    out.mkdir(parents=True, exist_ok=True)
    save_png8(out / f"render_{args.index:04d}.png", composite)
    save_png8(out / f"diffuse_{args.index:04d}.png", diffuse)
    save_png8(out / f"light_{args.index:04d}.png", light)
    print(f"wrote renders for sample {args.index} to {out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from . import bench

    rows = bench.run(args.op, args.sizes, batch=args.batch, channels=args.channels,
                     repeats=args.repeats, seed=args.seed)
    text = bench.to_csv(rows)
    out = _out(args, "bench")
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.csv").write_text(text)
    sys.stdout.write(text)
    for size, r in sorted(bench.ratios(rows).items()):
        print(f"# size {size}: affconv/conv time ratio {r:.2f}")
    return EXIT_OK


# --- parser -----------------------------------------------------------------------


def _global_flags(parser, suppress: bool) -> None:
    # subcommands repeat the global flags with suppressed defaults so that
    # ``affunet --seed 3 train`` and ``affunet train --seed 3`` agree
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=d(7))
    parser.add_argument("--threads", type=int, default=d(1))
    parser.add_argument("--config", default=d(None), help="JSON file with RunConfig fields")
    parser.add_argument("--out", default=d(None), help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    _global_flags(common, suppress=True)

    p = _Parser(prog="affunet", description=__doc__.split("\n\n")[0].replace("\n", " "))
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    g.add_argument("--target", choices=("affconv", "losses", "renderer", "all"), default="all")
    g.add_argument("--seeds", type=int, default=5)
    g.set_defaults(func=cmd_gradcheck)

    t = sub.add_parser("make-toyset", parents=[common], help="synthesize a toy dataset")
    t.add_argument("--n", type=int, default=250)
    t.add_argument("--resolution", type=int, default=64)
    t.add_argument("--heldout", type=int, help="held-out count (default n/5)")
    t.add_argument("--aligned", action="store_true", help="identity poses (control set)")
    t.set_defaults(func=cmd_make_toyset)

    tr = sub.add_parser("train", parents=[common], help="three-stage training")
    tr.add_argument("--dataset")
    tr.add_argument("--stage", type=int, choices=(1, 2, 3))
    tr.add_argument("--stages", help="comma list, e.g. 1,2,3")
    tr.add_argument("--epochs", help="three comma-separated epoch counts")
    tr.add_argument("--max-steps", type=int)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--adv-weight", type=float)
    tr.add_argument("--no-adversarial", action="store_true")
    tr.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate-affconv", parents=[common], help="affine vs vanilla diffuse network")
    a.add_argument("--dataset")
    a.add_argument("--steps", type=int)
    a.add_argument("--batch-size", type=int)
    a.set_defaults(func=cmd_ablate)

    pm = sub.add_parser("posmap", parents=[common], help="UV position map from an OBJ mesh")
    pm.add_argument("mesh", nargs="?", help="OBJ with UVs (default: bundled synthetic head)")
    pm.add_argument("--resolution", type=int, default=512)
    pm.set_defaults(func=cmd_posmap)

    r = sub.add_parser("render", parents=[common], help="render a toy sample or network output")
    r.add_argument("--dataset", required=True)
    r.add_argument("--index", type=int, default=0)
    r.add_argument("--checkpoint", help="checkpoint directory; render its predictions")
    r.add_argument("--yaw", type=float, help="override pose (degrees)")
    r.add_argument("--pitch", type=float, help="override pose (degrees)")
    r.set_defaults(func=cmd_render)

    b = sub.add_parser("bench", parents=[common], help="conv vs affine conv timing")
    b.add_argument("--op", nargs="+", choices=("conv", "affconv"), default=["conv", "affconv"])
    b.add_argument("--sizes", nargs="+", type=int, default=[16, 32, 64])
    b.add_argument("--batch", type=int, default=4)
    b.add_argument("--channels", type=int, default=16)
    b.add_argument("--repeats", type=int, default=10)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("affunet: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE

    from .geometry import ObjParseError
    from .tensor import set_determinism
    from .train import NumericalError

    set_determinism(args.threads)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"affunet: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError) as e:
        print(f"affunet: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, ObjParseError) as e:
        print(f"affunet: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"affunet: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
