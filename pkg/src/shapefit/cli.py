"""Command-line entry points.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import ShapeFitError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="shapefit", description="3D pose/shape auto-labeling toolkit")
    sub = p.add_subparsers(dest="command", metavar="command")

    bp = sub.add_parser("build-prior", help="build the PCA shape prior", parents=[])
    bp.add_argument("--models", required=True,
                    help="directory of .slfg grids or procedural:<count>")
    bp.add_argument("--dim", type=int, default=5)
    bp.add_argument("--grid", default="64x32x32")
    bp.add_argument("--voxel", type=float, default=0.1)
    bp.add_argument("--out", required=True)

    ft = sub.add_parser("fit", help="fit all instances of a scene")
    ft.add_argument("--scene", required=True)
    ft.add_argument("--prior", required=True)
    ft.add_argument("--iters", type=int, default=150)
    ft.add_argument("--lr", type=float, default=0.1)
    ft.add_argument("--w-mask", type=float, default=1.0)
    ft.add_argument("--w-pc", type=float, default=1.0)
    ft.add_argument("--w-ground", type=float, default=0.1)
    ft.add_argument("--zeta", type=float, default=40.0)
    ft.add_argument("--sequential", action="store_true",
                    help="fit instances one at a time instead of batched")
    ft.add_argument("--out", required=True)

    sy = sub.add_parser("synth", help="generate seeded synthetic scenes")
    sy.add_argument("--seed", type=int, required=True)
    sy.add_argument("--scenes", type=int, default=1)
    sy.add_argument("--beams", type=int, default=64)
    sy.add_argument("--sigma-r", type=float, default=0.02)
    sy.add_argument("--instances", default="1:5", help="min:max per scene")
    sy.add_argument("--prior", default=None,
                    help="prior file for shape sampling (default: procedural)")
    sy.add_argument("--out", required=True)

    ev = sub.add_parser("eval", help="evaluate labels against ground truth")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--iou", type=float, action="append", default=None,
                    help="IoU threshold(s); may repeat (default 0.5 and 0.7)")
    ev.add_argument("--out", default=None, help="write the report JSON here")

    hr = sub.add_parser("harness", help="run the ablation/robustness sweep")
    hr.add_argument("--suite", required=True, help="sweep spec JSON")
    hr.add_argument("--out", required=True, help="CSV output path")
    hr.add_argument("--table", default=None, help="also write a text table")

    sv = sub.add_parser("serve", help="run the labeling service")
    sv.add_argument("--port", type=int, default=int(os.environ.get("SLF_PORT", 8008)))
    sv.add_argument("--segmenter", default=os.environ.get("SLF_SEGMENTER_URL", "none"))
    sv.add_argument("--scenes", default=os.environ.get("SLF_SCENES_DIR", "."))
    sv.add_argument("--prior", default=None)
    sv.add_argument("--host", default="127.0.0.1")
    return p


def _cmd_build_prior(args) -> int:
    from .prior import build_prior, save_prior
    from .sdf import load_grid, procedural_bank

    dims = tuple(int(x) for x in args.grid.lower().split("x"))
    if len(dims) != 3:
        raise _UsageError("--grid must look like 64x32x32")
    if args.models.startswith("procedural:"):
        count = int(args.models.split(":", 1)[1])
        bank = procedural_bank(count=count, dims=dims, voxel_size=args.voxel)
    else:
        paths = sorted(Path(args.models).glob("*.slfg"))
        if not paths:
            raise ShapeFitError(f"no .slfg files in {args.models}")
        bank = [load_grid(p) for p in paths]
    prior = build_prior(bank, d=args.dim)
    save_prior(prior, args.out)
    print(f"wrote {args.out}: n={prior.n} d={prior.d} models={prior.model_count}")
    return 0


def _cmd_fit(args) -> int:
    from .energy import EnergyWeights
    from .fit import FitConfig, fit_scene, results_to_labels
    from .prior import load_prior
    from .render import RenderConfig
    from .scene import load_scene

    prior = load_prior(args.prior)
    scene = load_scene(args.scene)
    cfg = FitConfig(
        learning_rate=args.lr,
        iterations=args.iters,
        weights=EnergyWeights(w_mask=args.w_mask, w_pc=args.w_pc, w_ground=args.w_ground),
        render=RenderConfig(zeta=args.zeta),
    )
    results = fit_scene(scene, prior, cfg, batched=not args.sequential)
    labels = results_to_labels(results, cfg)
    Path(args.out).write_text(json.dumps(labels, indent=1, sort_keys=True))
    print(f"wrote {args.out}: {len(results)} instances")
    return 0


def _cmd_synth(args) -> int:
    from .prior import build_prior, load_prior
    from .sdf import procedural_bank
    from .synth import LidarModel, SynthConfig, gen_suite

    if args.prior:
        prior = load_prior(args.prior)
    else:
        prior = build_prior(procedural_bank(), d=5)
    lo, hi = (int(x) for x in args.instances.split(":"))
    cfg = SynthConfig(
        seed=args.seed,
        n_instances=(lo, hi),
        lidar=LidarModel(beams=args.beams, sigma_r=args.sigma_r),
    )
    paths = gen_suite(args.seed, args.scenes, cfg, prior, args.out)
    print(f"wrote {len(paths)} scene(s) under {args.out}")
    return 0


def _cmd_eval(args) -> int:
    from .metrics import eval_labels_files

    thresholds = tuple(args.iou) if args.iou else (0.5, 0.7)
    report = eval_labels_files(args.pred, args.gt, thresholds)
    text = json.dumps(report.to_dict(), indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def _cmd_harness(args) -> int:
    from .metrics import format_harness_table, run_harness

    spec = json.loads(Path(args.suite).read_text())
    rows = run_harness(spec, out_csv=args.out, out_table=args.table,
                       progress=lambda msg: print(f"[cell] {msg}", file=sys.stderr))
    print(format_harness_table(rows))
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    segmenter_url = None if args.segmenter in ("none", "", None) else args.segmenter
    app = create_app(args.scenes, prior_path=args.prior, segmenter_url=segmenter_url)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


_COMMANDS = {
    "build-prior": _cmd_build_prior,
    "fit": _cmd_fit,
    "synth": _cmd_synth,
    "eval": _cmd_eval,
    "harness": _cmd_harness,
    "serve": _cmd_serve,
}


def cli_dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_usage(sys.stderr)
            return 1
        return _COMMANDS[args.command](args)
    except _UsageError:
        return 1
    except (ShapeFitError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 3
    except Exception as exc:  # pragma: no cover - internal errors
        print(f"internal error: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
