"""``sketchbodynet`` command line.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 runtime or numeric failure.
"""

import argparse
import os
import sys

import numpy as np

from . import pipeline
from .bodymodel import BodyModelError, load_body_model, make_mini_model, save_body_model, smpl_forward_np, write_obj
from .metrics import OracleModel, evaluate_dataset
from .network import CheckpointError, NetConfig, init_network, load_checkpoint, save_checkpoint
from .sketchgen import (
    INK,
    NoBodyFoundError,
    PGMError,
    extract_edges,
    ink_mask,
    rasterize_silhouette,
    read_pgm,
    write_pgm,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
OVERLAY_EDGE = 128


class DataError(Exception):
    """Bad input data; maps to exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def render_overlay(sketch, vertices, faces, cam):
    """Input strokes (0) with the projected silhouette's boundary drawn in grey."""
    sketch = np.asarray(sketch)
    mask = rasterize_silhouette(vertices, faces, cam, sketch.shape[0])
    out = np.full(sketch.shape, 255, dtype=np.uint8)
    out[extract_edges(mask) == INK] = OVERLAY_EDGE
    out[ink_mask(sketch)] = INK
    return out


def _load_model(path):
    try:
        return load_body_model(path)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"invalid body model {path}: {exc}") from exc


def _model_from_checkpoint(ckpt, override=None):
    if override:
        return _load_model(override)
    path = ckpt.extra.get("body_model")
    if path and os.path.exists(path):
        return _load_model(path)
    return make_mini_model()


def cmd_make_model(args):
    spec = make_mini_model(args.seed)
    save_body_model(args.out, spec)
    print(f"wrote {args.out}: V={spec.V} F={spec.F} K={spec.K} n_beta={spec.n_beta}")


def cmd_gen_data(args):
    spec = _load_model(args.model)
    views = pipeline.default_views(args.views)
    manifest = pipeline.build_dataset(spec, args.count, views, args.seed, args.out, args.resolution,
                                      n_freehand=args.freehand)
    print(os.path.join(args.out, "manifest.json"))
    print(f"{len(manifest.records)} records")


def cmd_init(args):
    spec = _load_model(args.model)
    cfg = NetConfig.for_body_model(spec)
    save_checkpoint(args.out, init_network(cfg, args.seed), cfg, pipeline.rng_record(args.seed), 0,
                    {"body_model": os.path.abspath(args.model)})
    print(f"wrote {args.out}")


def _train_config(args, spec):
    if args.config is None:
        return pipeline.desk_config(spec)
    try:
        return pipeline.load_train_config(args.config)
    except (OSError, ValueError, TypeError) as exc:
        raise DataError(f"invalid train config {args.config}: {exc}") from exc


def cmd_train(args):
    manifest = pipeline.load_manifest(args.manifest)
    spec = _load_model(manifest.path_of(manifest.body_model))
    cfg = _train_config(args, spec)
    if args.seed is not None:
        cfg.seed = args.seed
    log_path = args.log or args.out_checkpoint + ".log.tsv"
    result = pipeline.srt_train(manifest, cfg, checkpoint_path=args.out_checkpoint, log_path=log_path,
                                resume_from=args.resume, max_steps=args.max_steps, spec=spec)
    final = f"{result.history[-1]['total']:.6g}" if result.history else "n/a"
    print(f"steps={result.steps} final_loss={final}")


def cmd_infer(args):
    ckpt = load_checkpoint(args.checkpoint)
    spec = _model_from_checkpoint(ckpt, args.model)
    try:
        sketch = read_pgm(args.image)
    except OSError as exc:
        raise DataError(str(exc)) from exc
    if sketch.shape[0] != sketch.shape[1]:
        raise DataError(f"sketch must be square, got {sketch.shape}")
    model = pipeline.NetworkModel(ckpt.params, ckpt.config)
    theta, beta, cam = model.predict_image(sketch)
    verts, _ = smpl_forward_np(spec, theta, beta)
    write_obj(args.out_obj, verts, spec.faces)
    if args.out_overlay:
        write_pgm(args.out_overlay, render_overlay(sketch, verts, spec.faces, cam))
    print(f"wrote {args.out_obj}" + (f" and {args.out_overlay}" if args.out_overlay else ""))


def cmd_eval(args):
    manifest = pipeline.load_manifest(args.manifest)
    if args.oracle:
        spec = _load_model(manifest.path_of(manifest.body_model))
        model, label = OracleModel(), "Oracle"
    else:
        ckpt = load_checkpoint(args.checkpoint)
        spec = _model_from_checkpoint(ckpt, args.model)
        model, label = pipeline.NetworkModel(ckpt.params, ckpt.config), "SketchBodyNet"
    report = evaluate_dataset(model, pipeline.load_samples(manifest), spec)
    if all(report.counts[k] == 0 for k in ("mpjpe", "reconst_error", "acc", "f1")):
        raise DataError("no sample carries the annotations any metric needs")
    with open(args.report, "w") as f:
        f.write(report.to_json() + "\n")
    table = report.to_table(label)
    with open(os.path.splitext(args.report)[0] + ".txt", "w") as f:
        f.write(table)
    sys.stdout.write(table)
    print("samples per metric: " + ", ".join(f"{k}={v}" for k, v in report.counts.items()))


def build_parser():
    parser = _Parser(prog="sketchbodynet", description="3-D human body recovery from sketches.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("make-model", help="write the built-in mini body model")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_model)

    p = sub.add_parser("gen-data", help="render a synthetic sketch dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--count", type=int, required=True, help="number of sampled bodies")
    p.add_argument("--views", type=int, default=14, help="evenly spaced yaw views per body")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--freehand", type=int, default=0, help="extra bodies rendered as pseudo-freehand records")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("init", help="write an untrained checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("train", help="two-stage training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="JSON TrainConfig (desk defaults if omitted)")
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--log", help="loss history path (default: <checkpoint>.log.tsv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="reconstruct a mesh from one sketch")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out-obj", required=True)
    p.add_argument("--out-overlay")
    p.add_argument("--model", help="body model (default: the one recorded in the checkpoint)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="evaluate on a manifest")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--oracle", action="store_true", help="use ground-truth parameters as predictions")
    p.add_argument("--manifest", required=True)
    p.add_argument("--report", required=True, help="JSON report path; the table goes next to it as .txt")
    p.add_argument("--model")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (DataError, pipeline.ManifestError, NoBodyFoundError, PGMError, BodyModelError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (pipeline.TrainingDivergedError, FloatingPointError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
