"""Command-line entry point.

    mvprompt mvgen --config "pixel(f) + local(fb)" --image in.png --seed 0 --out runs/a
    mvprompt gen3d --config "pixel(f) + local(f)" --image in.png --seed 0 --out runs/b --iters 100
    mvprompt eval  --images renders/ --image prompt.png --text "a dog" --seed 0 --out runs/c

Defaults can come from a flat key=value run-config file (--run-config); the
MVPROMPT_OUT environment variable provides the default output root.
"""

from __future__ import annotations

import argparse
import os
import sys

from .errors import ConfigError, DivergenceError, ParseError
from .metrics import format_entry
from .pipeline import RunManifest, load_run_config, run

OUT_ROOT_ENV = "MVPROMPT_OUT"


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--run-config", help="flat key=value file with default settings")
    p.add_argument("--seed", type=int, help="run seed (default 0)")
    p.add_argument("--out", help=f"output directory (default ${OUT_ROOT_ENV}/<run name>)")
    p.add_argument("--text", help="text prompt")
    p.add_argument("--image-size", type=int, dest="image_size",
                   help="image side length (default 32)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvprompt",
                                     description="multi-image-prompted multi-view "
                                                 "generation, 3D generation, and scoring")
    sub = parser.add_subparsers(dest="mode", required=True)

    mvgen = sub.add_parser("mvgen", help="sample four views under a controller config")
    mvgen.add_argument("--config", help='controller config, e.g. "pixel(f) + local(fb)"')
    mvgen.add_argument("--image", help="front prompt image (PNG)")
    mvgen.add_argument("--steps", type=int, help="DDIM steps (default 10)")
    mvgen.add_argument("--real-views", dest="real_views",
                       help="directory with user-supplied back/left/right.png views")
    _add_common(mvgen)

    gen3d = sub.add_parser("gen3d", help="optimize a radiance field with SDS")
    gen3d.add_argument("--config", help="controller config string")
    gen3d.add_argument("--image", help="front prompt image (PNG)")
    gen3d.add_argument("--steps", type=int, help="DDIM steps for prompt-view generation")
    gen3d.add_argument("--iters", type=int, dest="iterations", help="SDS iterations (default 100)")
    gen3d.add_argument("--real-views", dest="real_views")
    gen3d.add_argument("--mock-guidance", action="store_true",
                       help="use the convex-pull mock guidance instead of the diffusion model")
    _add_common(gen3d)

    ev = sub.add_parser("eval", help="score a directory of images")
    ev.add_argument("--images", dest="images_dir", help="directory of images to score")
    ev.add_argument("--image", help="prompt image the CLIP(IM) score compares against")
    ev.add_argument("--config", help="config label for the report (optional)")
    _add_common(ev)
    return parser


def manifest_from_args(args: argparse.Namespace) -> RunManifest:
    fields: dict = {}
    if getattr(args, "run_config", None):
        fields.update(load_run_config(args.run_config))
    for key in ("config", "image", "images_dir", "real_views", "text",
                "seed", "steps", "iterations", "image_size", "out"):
        value = getattr(args, key, None)
        if value is not None:
            fields["out_dir" if key == "out" else key] = value
    if getattr(args, "mock_guidance", False):
        fields["guidance"] = "convex-pull"
    fields["mode"] = args.mode
    fields.setdefault("seed", 0)

    if "out_dir" not in fields:
        root = os.environ.get(OUT_ROOT_ENV)
        if not root:
            raise ConfigError(
                f"no output directory: pass --out or set ${OUT_ROOT_ENV}")
        fields["out_dir"] = os.path.join(root, f"{args.mode}-seed{fields['seed']}")
    return RunManifest(**fields)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        manifest = manifest_from_args(args)
        report = run(manifest)
    except (ConfigError, ParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    print(f"run written to {manifest.out_dir}")
    print(f"  config   {report.config}")
    print(f"  QIS      {format_entry(report.qis.mean, report.qis.std)}")
    print(f"  CLIP(TX) {format_entry(report.clip_tx.mean, report.clip_tx.std)}")
    print(f"  CLIP(IM) {format_entry(report.clip_im.mean, report.clip_im.std)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
